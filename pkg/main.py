#!/usr/bin/env python3
"""
Command-line entry point for vitrl
Train a run, evaluate a checkpoint, or plot and tabulate results from metrics files
"""

import argparse
import os
import sys

from src.logging_config import attach_run_log, get_logger, setup_logging
from src.nncore import CheckpointError


def run_train(args, logger):
    from src.trainer import TrainConfig, Trainer

    config = TrainConfig.from_json(args.config, seed=args.seed)
    out_dir = args.out or os.path.join("reports", f"{config.tag}_seed{config.seed}")
    attach_run_log(out_dir)
    trainer = Trainer(config, out_dir)

    resume = os.path.join(out_dir, "checkpoint.pt")
    if args.resume and os.path.exists(resume):
        trainer.load_checkpoint(resume)

    rows = trainer.train()
    final = rows[-1]
    print(f"\nTRAINING COMPLETE: {config.tag} (seed {config.seed})")
    print(f"{'='*60}")
    print(f"{'Step':<10} {'Return':<20} {'Critic':<10} {'Aux':<10} {'Alpha'}")
    print(f"{'-'*60}")
    for row in rows:
        ret = f"{row.mean_return:.1f} +/- {row.std_return:.1f}"
        print(f"{row.agent_step:<10} {ret:<20} {row.rl_critic_loss:<10.4f} {row.aux_loss:<10.4f} {row.alpha:.4f}")
    print(f"\nFinal eval return: {final.mean_return:.2f}")
    print(f"Results saved in: {os.path.abspath(out_dir)}")
    logger.info(f"Run {config.tag} seed {config.seed} finished at step {final.agent_step}")


def run_eval(args, logger):
    from src.trainer import load_trainer

    trainer = load_trainer(args.checkpoint)
    mean_return, std_return = trainer.evaluate(args.episodes)
    print(f"\nEVALUATION: {trainer.config.tag} at agent step {trainer.agent_step}")
    print(f"{'='*60}")
    print(f"Episodes: {args.episodes or trainer.config.eval_episodes}")
    print(f"Return:   {mean_return:.2f} +/- {std_return:.2f}")
    logger.info(f"Evaluated {args.checkpoint}: {mean_return:.2f} +/- {std_return:.2f}")


def run_plot(args, logger):
    from src.reporter import emit_plots

    path = emit_plots(args.inputs, args.out)
    print(f"SUCCESS: Learning curves written to: {os.path.abspath(path)}")


def run_table(args, logger):
    from src.reporter import summarize_runs

    table = summarize_runs(args.inputs, args.steps, args.out)
    print("\nRESULTS: mean +/- std eval return across seeds")
    print(f"{'='*60}")
    print(f"{'Config':<32} {'Runs':<6} " + " ".join(f"{step:<20}" for step in args.steps))
    print(f"{'-'*60}")
    for tag, row in table.iterrows():
        cells = " ".join(f"{row[f'{s}_mean']:.1f} +/- {row[f'{s}_std']:.1f}".ljust(20) for s in args.steps)
        print(f"{tag:<32} {int(row['runs']):<6} {cells}")
    if args.out:
        print(f"\nTable saved in: {os.path.abspath(args.out)}")


def main():
    parser = argparse.ArgumentParser(description="Pixel-based RL with ViT encoders and auxiliary tasks")
    parser.add_argument("command", choices=["train", "eval", "plot", "table"],
                        help="Command to execute")
    parser.add_argument("--config", help="Flat JSON config file (for train)")
    parser.add_argument("--seed", type=int, help="Override the config seed (for train)")
    parser.add_argument("--out", help="Run directory for train, image file for plot, CSV file for table")
    parser.add_argument("--resume", action="store_true", help="Continue from <out>/checkpoint.pt if present")
    parser.add_argument("--checkpoint", help="Checkpoint file (for eval)")
    parser.add_argument("--episodes", type=int, help="Evaluation episodes (default: config value)")
    parser.add_argument("--inputs", nargs="+", help="metrics.csv files (for plot and table)")
    parser.add_argument("--steps", nargs="+", type=int, help="Agent steps to tabulate (for table)")
    parser.add_argument("--log-level", default="INFO", help="Logging level (LOG_LEVEL env var wins)")

    args = parser.parse_args()
    setup_logging(args.log_level)
    logger = get_logger("cli")

    if args.command == "train" and not args.config:
        print("ERROR: --config argument required for train command")
        sys.exit(1)
    if args.command == "eval" and not args.checkpoint:
        print("ERROR: --checkpoint argument required for eval command")
        sys.exit(1)
    if args.command == "plot" and (not args.inputs or not args.out):
        print("ERROR: --inputs and --out arguments required for plot command")
        sys.exit(1)
    if args.command == "table" and (not args.inputs or not args.steps):
        print("ERROR: --inputs and --steps arguments required for table command")
        sys.exit(1)

    commands = {"train": run_train, "eval": run_eval, "plot": run_plot, "table": run_table}
    try:
        commands[args.command](args, logger)
    except (ValueError, RuntimeError, CheckpointError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"ERROR: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()
