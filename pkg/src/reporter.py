#!/usr/bin/env python3
"""
Metrics files and learning-curve plots for training runs.
Each run folder holds metrics.csv, timing.csv and run_metadata.json.
"""

import json
import os
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from .logging_config import get_logger

logger = get_logger("reporter")

METRICS_COLUMNS = [
    "agent_step",
    "mean_return",
    "std_return",
    "rl_critic_loss",
    "rl_actor_loss",
    "aux_loss",
    "alpha",
]
TIMING_COLUMNS = ["agent_step", "wall_seconds"]

METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
METADATA_FILE = "run_metadata.json"

BAND_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


class MetricsReporter:
    """Writes one run's evaluation rows as they arrive"""

    def __init__(self, out_dir, config_tag):
        self.out_dir = Path(out_dir)
        self.config_tag = config_tag
        os.makedirs(self.out_dir, exist_ok=True)

        self.metrics_file = self.out_dir / METRICS_FILE
        self.timing_file = self.out_dir / TIMING_FILE
        self.metadata_file = self.out_dir / METADATA_FILE
        self.rows = []

    def append(self, row):
        """
        Add one evaluation row and rewrite both CSV files

        Args:
            row (dict): METRICS_COLUMNS plus wall_seconds
        """
        missing = [c for c in METRICS_COLUMNS + ["wall_seconds"] if c not in row]
        if missing:
            raise ValueError(f"metrics row is missing {missing}")
        self.rows.append(dict(row))
        self.flush()

    def flush(self):
        df = pd.DataFrame(self.rows, columns=METRICS_COLUMNS + ["wall_seconds"])
        # wall time stays out of metrics.csv
        df[METRICS_COLUMNS].to_csv(self.metrics_file, index=False, float_format="%.8g")
        df[TIMING_COLUMNS].to_csv(self.timing_file, index=False, float_format="%.3f")

    def save_metadata(self, config, seed):
        metadata = {
            "config_tag": self.config_tag,
            "seed": seed,
            "config": config,
            "created": datetime.now().isoformat(timespec="seconds"),
        }
        with open(self.metadata_file, "w", encoding="utf-8") as f:
            json.dump(metadata, f, indent=2, sort_keys=True, default=str)
        return self.metadata_file


def load_metrics(path):
    """
    Read a metrics file and the config tag recorded beside it

    Returns:
        tuple: (DataFrame, config tag)
    """
    path = Path(path)
    if not path.exists():
        raise ValueError(f"Metrics file not found: {path}")
    df = pd.read_csv(path)
    missing = [c for c in METRICS_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path} is not a metrics file (missing {missing})")

    metadata_file = path.parent / METADATA_FILE
    if metadata_file.exists():
        with open(metadata_file, "r", encoding="utf-8") as f:
            tag = json.load(f).get("config_tag", path.parent.name)
    else:
        tag = path.parent.name
    return df, tag


def aggregate_runs(runs):
    """
    Mean and standard deviation of eval return across runs sharing a config tag

    Args:
        runs (list): (DataFrame, tag) pairs as returned by load_metrics

    Returns:
        dict: tag -> DataFrame with agent_step, mean, std, runs

    Raises:
        ValueError: If runs under one tag were evaluated at different steps
    """
    if not runs:
        raise ValueError("No metrics files given")

    grouped = {}
    for df, tag in runs:
        grouped.setdefault(tag, []).append(df)

    curves = {}
    for tag, frames in grouped.items():
        steps = frames[0]["agent_step"].to_numpy()
        for df in frames[1:]:
            if not np.array_equal(df["agent_step"].to_numpy(), steps):
                raise ValueError(f"Runs tagged '{tag}' have mismatched step grids")
        returns = np.stack([df["mean_return"].to_numpy(dtype=np.float64) for df in frames])
        curves[tag] = pd.DataFrame({
            "agent_step": steps,
            "mean": returns.mean(axis=0),
            "std": returns.std(axis=0),
            "runs": len(frames),
        })
    return curves


def summarize_runs(paths, steps, out_path=None):
    """
    Results table: eval return mean and std across seeds per config tag at fixed step budgets

    Args:
        paths (list): metrics.csv files
        steps (list): Agent steps to report; every tag must have been evaluated at each
        out_path (str): Optional CSV destination

    Returns:
        DataFrame: One row per config tag with runs, <step>_mean and <step>_std columns
    """
    if not steps:
        raise ValueError("No steps given for the results table")
    if not paths:
        raise ValueError("No metrics files given")
    curves = aggregate_runs([load_metrics(p) for p in paths])

    records = []
    for tag, curve in sorted(curves.items()):
        indexed = curve.set_index("agent_step")
        record = {"config_tag": tag, "runs": int(curve["runs"].iloc[0])}
        for step in steps:
            if step not in indexed.index:
                raise ValueError(f"Runs tagged '{tag}' were not evaluated at step {step}")
            record[f"{step}_mean"] = float(indexed.at[step, "mean"])
            record[f"{step}_std"] = float(indexed.at[step, "std"])
        records.append(record)
    table = pd.DataFrame(records).set_index("config_tag")

    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_path, encoding="utf-8", float_format="%.4f")
        logger.info(f"Wrote results table for {len(table)} config(s) to {out_path}")
    return table


def emit_plots(paths, out_path):
    """
    Draw one learning curve per config tag, with a mean +/- std band when several seeds share it

    Args:
        paths (list): metrics.csv files
        out_path (str): Output image; .svg/.pdf/.png go through kaleido, .html is written directly

    Returns:
        Path: The written file
    """
    if not paths:
        raise ValueError("No metrics files given")
    curves = aggregate_runs([load_metrics(p) for p in paths])

    fig = go.Figure()
    for i, (tag, curve) in enumerate(sorted(curves.items())):
        color = BAND_COLORS[i % len(BAND_COLORS)]
        steps = curve["agent_step"]
        if curve["runs"].iloc[0] > 1:
            fig.add_trace(go.Scatter(
                x=pd.concat([steps, steps[::-1]]),
                y=pd.concat([curve["mean"] + curve["std"], (curve["mean"] - curve["std"])[::-1]]),
                fill="toself",
                fillcolor=color,
                opacity=0.2,
                line=dict(width=0),
                hoverinfo="skip",
                showlegend=False,
            ))
        fig.add_trace(go.Scatter(
            x=steps,
            y=curve["mean"],
            mode="lines",
            name=f"{tag} (n={curve['runs'].iloc[0]})",
            line=dict(color=color, width=2),
        ))

    fig.update_layout(
        title="Evaluation return",
        xaxis_title="Agent steps",
        yaxis_title="Mean episode return",
        template="plotly_white",
    )

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix == ".html":
        fig.write_html(str(out_path))
    else:
        fig.write_image(str(out_path))
    logger.info(f"Wrote learning curves for {len(curves)} config(s) to {out_path}")
    return out_path
