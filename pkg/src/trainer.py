"""
Training and evaluation loop: environment, replay, augmentation, encoder,
auxiliary task and SAC, with seeding, scheduling, metrics and checkpoints
"""

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import center_crop, to_float
from .auxtasks import AUX_TASKS, make_aux_task
from .encoders import make_encoder
from .envsim import ENV_SPECS, FRAME_SIZE, FRAME_STACK, ReplayLogWriter, make_env
from .logging_config import get_logger
from .nncore import CheckpointError, count_parameters, load_container, save_container
from .replay import ReplayBuffer, Transition
from .reporter import MetricsReporter
from .sac import SacAgent, to_tensors
from .utils import format_duration, make_rng, make_torch_generator, set_seed_everywhere

logger = get_logger("trainer")

# independent numpy streams derived from the run seed
ACTION_STREAM = 1
SAMPLE_STREAM = 2
CROP_STREAM = 3
AUX_STREAM = 4
EPISODE_STREAM = 5
EVAL_STREAM = 6

# keys that may differ between a checkpoint and the config resuming it
RESUMABLE_KEYS = ("total_steps", "checkpoint_frequency")


@dataclass
class TrainConfig:
    """
    Run configuration. Step counts are agent steps, i.e. after action repeat.
    total_steps counts steps after the initial random phase.
    """
    env: str = "cartpole_swingup"
    encoder: str = "vit"
    aux_task: str = "none"
    seed: int = 1
    total_steps: int = 100000
    episode_length: Optional[int] = None
    action_repeat: Optional[int] = None

    # hyperparameter table
    observation_size: int = 100
    image_size: int = 84
    replay_buffer_size: int = 100000
    initial_steps: int = 1000
    frame_stack: int = 3
    hidden_dim: int = 1024
    eval_episodes: int = 10
    eval_frequency: int = 10000
    optimizer: str = "adam"
    encoder_lr: float = 1e-3
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    alpha_lr: float = 1e-4
    batch_size: int = 512
    encoder_tau: float = 0.05
    critic_tau: float = 0.01
    discount: float = 0.99
    initial_temperature: float = 0.1
    latent_dim: int = 128
    critic_update_frequency: int = 2
    patch_size: int = 12
    vit_depth: int = 4
    vit_mlp_dim: int = 128
    attention_heads: int = 8
    data2vec_k: int = 2
    data2vec_beta: float = 2.0

    # auxiliary task details
    contrastive_batch_size: int = 128
    d2v_mask_ratio: float = 0.40
    mae_mask_ratio: float = 0.75
    d2v_target_includes_first: bool = False
    mae_decoder_dim: int = 64
    mae_decoder_depth: int = 2
    mae_decoder_heads: int = 4

    # SAC details
    actor_log_std_min: float = -10.0
    actor_log_std_max: float = 2.0
    actor_beta: float = 0.9
    critic_beta: float = 0.9
    alpha_beta: float = 0.5
    cnn_pool: int = 2

    # run plumbing
    checkpoint_frequency: int = 0
    record_replay_log: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.env not in ENV_SPECS:
            raise ValueError(f"Unknown env '{self.env}'. Available: {sorted(ENV_SPECS)}")
        if self.encoder not in ("vit", "cnn"):
            raise ValueError(f"encoder must be 'vit' or 'cnn', got '{self.encoder}'")
        if self.aux_task not in AUX_TASKS:
            raise ValueError(f"aux_task must be one of {list(AUX_TASKS)}, got '{self.aux_task}'")
        if self.encoder == "cnn" and self.aux_task != "none":
            raise ValueError("the cnn encoder only runs without an auxiliary task")
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got '{self.optimizer}'")
        if (self.observation_size, self.image_size, self.frame_stack) != (FRAME_SIZE, 84, FRAME_STACK):
            raise ValueError("observation geometry is fixed at 100 -> 84 with 3 stacked frames")
        for name in ("total_steps", "initial_steps", "checkpoint_frequency"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("replay_buffer_size", "batch_size", "eval_episodes", "eval_frequency",
                     "critic_update_frequency", "hidden_dim", "latent_dim", "contrastive_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("d2v_mask_ratio", "mae_mask_ratio"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        for name in ("encoder_tau", "critic_tau", "discount"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.initial_temperature <= 0:
            raise ValueError(f"initial_temperature must be positive, got {self.initial_temperature}")

    @classmethod
    def from_dict(cls, values, **overrides):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"Unknown config keys: {unknown}")
        merged = {**values, **{k: v for k, v in overrides.items() if v is not None}}
        return cls(**merged)

    @classmethod
    def from_json(cls, path, **overrides):
        """
        Load a flat JSON object; unknown keys are rejected

        Args:
            path (str): Config file
            **overrides: Values replacing the file's (None is ignored)
        """
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
        if not isinstance(values, dict):
            raise ValueError(f"{path} must hold a flat JSON object")
        return cls.from_dict(values, **overrides)

    def to_dict(self):
        return asdict(self)

    @property
    def tag(self):
        return f"{self.env}-{self.encoder}-{self.aux_task}"


@dataclass
class MetricsRow:
    agent_step: int
    mean_return: float
    std_return: float
    rl_critic_loss: float
    rl_actor_loss: float
    aux_loss: float
    alpha: float
    wall_seconds: float


def _rng_state(rng):
    return rng.bit_generator.state


def _set_rng_state(rng, state):
    rng.bit_generator.state = state


class Trainer:
    """Owns every piece of one run and steps them in a fixed order"""

    def __init__(self, config, out_dir=None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        set_seed_everywhere(config.seed)

        replay_log = None
        if config.record_replay_log and self.out_dir is not None:
            replay_log = ReplayLogWriter(self.out_dir / "replay_log.bin")
        self.env = make_env(config.env, config.episode_length, replay_log, config.action_repeat)
        self.eval_env = make_env(config.env, config.episode_length, action_repeat=config.action_repeat)
        self.action_dim = self.env.spec.action_dim

        self.replay = ReplayBuffer(
            config.replay_buffer_size,
            frame_shape=(3, FRAME_SIZE, FRAME_SIZE),
            action_dim=self.action_dim,
            frame_stack=config.frame_stack,
        )
        self.encoder = make_encoder(config)
        self.agent = SacAgent(self.encoder, self.action_dim, config, generator=make_torch_generator(config.seed))
        self.aux_task = make_aux_task(config.aux_task, self.encoder, config)

        self.rngs = {
            "action": make_rng(config.seed, ACTION_STREAM),
            "sample": make_rng(config.seed, SAMPLE_STREAM),
            "crop": make_rng(config.seed, CROP_STREAM),
            "aux": make_rng(config.seed, AUX_STREAM),
            "episode": make_rng(config.seed, EPISODE_STREAM),
        }

        self.reporter = MetricsReporter(self.out_dir, config.tag) if self.out_dir is not None else None
        self.rows = []

        self.agent_step = 0
        self.update_step = 0
        self.aux_updates = 0
        self.episode = -1
        self.episode_return = 0.0
        self.done = True
        self.last_losses = {"critic_loss": math.nan, "actor_loss": math.nan, "aux_loss": math.nan}
        self.elapsed = 0.0

        logger.info(
            f"Run {config.tag} seed {config.seed}: encoder params {count_parameters(self.encoder):,}, "
            f"{config.initial_steps} initial + {config.total_steps} training steps"
        )

    @property
    def final_step(self):
        return self.config.initial_steps + self.config.total_steps

    def _start_episode(self):
        self.episode += 1
        seed = int(self.rngs["episode"].integers(0, 2 ** 63 - 1))
        self.env.reset(seed)
        self.episode_return = 0.0
        self.done = False

    def _act(self, observation):
        if self.agent_step < self.config.initial_steps:
            return self.rngs["action"].uniform(-1.0, 1.0, size=self.action_dim)
        obs = to_float(center_crop(observation.stacked()))
        return self.agent.select_action(obs, mode="train")

    def step(self):
        """One agent step: act, store, then the scheduled updates"""
        if self.done:
            self._start_episode()

        observation = self.env.observation
        action = self._act(observation)
        result = self.env.step(action)
        self.episode_return += result.reward

        self.replay.push(Transition(observation.latest, action, result.reward, result.terminated, self.episode))
        if result.done:
            self.replay.push(Transition(result.observation.latest, None, 0.0, result.terminated, self.episode))
            logger.debug(f"Episode {self.episode} finished with return {self.episode_return:.2f}")
            self.done = True

        self.agent_step += 1
        if self.agent_step > self.config.initial_steps:
            self._update()

    def _update(self):
        self.update_step += 1
        batch = self.replay.sample(self.config.batch_size, self.rngs["sample"])
        losses = self.agent.update(to_tensors(batch, self.rngs["crop"]), self.update_step)
        self.last_losses.update(losses)
        self.last_losses["aux_loss"] = self.aux_task.update(batch.obs, self.rngs["aux"])
        self.aux_updates += 1

    def evaluate(self, n_episodes=None):
        """
        Run full episodes with eval-mode actions on center crops

        The same episode seeds are used at every evaluation, and neither the
        training environment nor any training stream is touched.

        Returns:
            tuple: (mean return, std return)
        """
        n_episodes = n_episodes or self.config.eval_episodes
        seeds = make_rng(self.config.seed, EVAL_STREAM).integers(0, 2 ** 63 - 1, size=n_episodes)
        returns = []
        for seed in seeds:
            observation = self.eval_env.reset(int(seed))
            total, done = 0.0, False
            while not done:
                obs = to_float(center_crop(observation.stacked()))
                result = self.eval_env.step(self.agent.select_action(obs, mode="eval"))
                total += result.reward
                observation, done = result.observation, result.done
            returns.append(total)
        returns = np.asarray(returns)
        return float(returns.mean()), float(returns.std())

    def _record(self):
        mean_return, std_return = self.evaluate()
        row = MetricsRow(
            agent_step=self.agent_step,
            mean_return=mean_return,
            std_return=std_return,
            rl_critic_loss=self.last_losses["critic_loss"],
            rl_actor_loss=self.last_losses["actor_loss"],
            aux_loss=self.last_losses["aux_loss"],
            alpha=float(self.agent.alpha.detach()),
            wall_seconds=self.elapsed,
        )
        self.rows.append(row)
        if self.reporter is not None:
            self.reporter.append(asdict(row))
        logger.info(
            f"step {row.agent_step}: return {row.mean_return:.2f} +/- {row.std_return:.2f}, "
            f"critic {row.rl_critic_loss:.4f}, aux {row.aux_loss:.4f}, alpha {row.alpha:.4f}"
        )
        return row

    def train(self, until=None):
        """
        Run to the final step (or to `until`), evaluating at step 0, every
        eval_frequency steps and at the end

        Returns:
            list: MetricsRow sequence so far
        """
        until = self.final_step if until is None else min(until, self.final_step)
        if self.reporter is not None and not self.reporter.metadata_file.exists():
            self.reporter.save_metadata(self.config.to_dict(), self.config.seed)
        if self.agent_step == 0 and not self.rows:
            self._record()

        started = time.time() - self.elapsed
        while self.agent_step < until:
            self.step()
            self.elapsed = time.time() - started
            at_end = self.agent_step == self.final_step
            if self.agent_step % self.config.eval_frequency == 0 or at_end:
                self._record()
            if (self.config.checkpoint_frequency and self.out_dir is not None
                    and self.agent_step % self.config.checkpoint_frequency == 0):
                self.save_checkpoint(self.out_dir / "checkpoint.pt")

        if self.agent_step == self.final_step and self.out_dir is not None:
            self.save_checkpoint(self.out_dir / "checkpoint.pt")
            logger.info(f"Training finished in {format_duration(self.elapsed)}")
        return self.rows

    # ------------------------------------------------------------------
    # Checkpoints

    def state_dict(self):
        return {
            "config": self.config.to_dict(),
            "encoder": self.encoder.state_dict(),
            "agent": self.agent.state_dict(),
            "aux_task": self.aux_task.state_dict(),
            "replay": self.replay.state_dict(),
            "env": self.env.get_state(),
            "rngs": {name: _rng_state(rng) for name, rng in self.rngs.items()},
            "torch_generator": self.agent.generator.get_state(),
            "torch_global": torch.get_rng_state(),
            "counters": {
                "agent_step": self.agent_step,
                "update_step": self.update_step,
                "aux_updates": self.aux_updates,
                "episode": self.episode,
                "episode_return": self.episode_return,
                "done": self.done,
                "elapsed": self.elapsed,
            },
            "last_losses": dict(self.last_losses),
            "rows": [asdict(r) for r in self.rows],
        }

    def save_checkpoint(self, path):
        save_container(path, self.state_dict())
        return Path(path)

    def load_checkpoint(self, path):
        """
        Restore a run saved by save_checkpoint

        Raises:
            CheckpointError: Unreadable container or a config that differs
                from this trainer's (other than the run length)
        """
        payload = load_container(path)
        saved = payload["config"]
        current = self.config.to_dict()
        diffs = sorted(k for k in set(saved) | set(current)
                       if k not in RESUMABLE_KEYS and saved.get(k) != current.get(k))
        if diffs:
            raise CheckpointError(f"Checkpoint {path} was written with a different config: {diffs}")

        self.encoder.load_state_dict(payload["encoder"])
        self.agent.load_state_dict(payload["agent"])
        self.aux_task.load_state_dict(payload["aux_task"])
        self.replay.load_state_dict(payload["replay"])
        self.env.set_state(payload["env"])
        for name, state in payload["rngs"].items():
            _set_rng_state(self.rngs[name], state)
        self.agent.generator.set_state(payload["torch_generator"])
        torch.set_rng_state(payload["torch_global"])

        counters = payload["counters"]
        self.agent_step = counters["agent_step"]
        self.update_step = counters["update_step"]
        self.aux_updates = counters["aux_updates"]
        self.episode = counters["episode"]
        self.episode_return = counters["episode_return"]
        self.done = counters["done"]
        self.elapsed = counters["elapsed"]
        self.last_losses = dict(payload["last_losses"])
        self.rows = [MetricsRow(**r) for r in payload["rows"]]
        if self.reporter is not None:
            self.reporter.rows = [asdict(r) for r in self.rows]
            self.reporter.flush()

        logger.info(f"Resumed {self.config.tag} at agent step {self.agent_step} from {path}")
        return self


def train(config, out_dir=None):
    """Build a trainer for config and run it to the end"""
    return Trainer(config, out_dir).train()


def load_trainer(path, out_dir=None, **overrides):
    """Rebuild a trainer from a checkpoint's own config"""
    payload = load_container(path)
    config = TrainConfig.from_dict(payload["config"], **overrides)
    return Trainer(config, out_dir).load_checkpoint(path)
