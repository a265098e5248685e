"""Delimited outputs and the matplotlib figures rendered next to them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AblationRow, MethodRow
from .models.base import History, Model
from .orchestrate import RunResult, TraceRow

FIG_DPI = 150


def _ensure_dir(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# --- training trace ---------------------------------------------------------


def write_trace_csv(path, trace: Sequence[TraceRow]) -> Path:
    path = _ensure_dir(Path(path))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "value", "lr", "applied"])
        for row in trace:
            writer.writerow([row.step, repr(row.value), repr(row.lr), int(row.applied)])
    return path


def figure_trace(path, trace: Sequence[TraceRow], title: str = "training objective") -> Path:
    path = _ensure_dir(Path(path))
    steps = [r.step for r in trace]
    values = [r.value for r in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, values, lw=0.8, color="tab:blue")
    if len(values) >= 50:
        kernel = np.ones(50) / 50.0
        smooth = np.convolve(values, kernel, mode="valid")
        ax.plot(steps[49:], smooth, lw=1.8, color="tab:red", label="50-step mean")
        ax.legend()
    ax.set_xlabel("gradient step")
    ax.set_ylabel("lower bound (nats)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


# --- evaluation report -------------------------------------------------------


def figure_methods(path, rows: Sequence[MethodRow], title: str = "total EIG bounds") -> Path:
    path = _ensure_dir(Path(path))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    names = [r.method if r.shift is None else f"{r.method} (s={r.shift:g})" for r in rows]
    x = np.arange(len(rows))
    lower = np.array([r.lower for r in rows])
    upper = np.array([r.upper for r in rows])
    ax.errorbar(x - 0.1, lower, yerr=[r.lower_se for r in rows], fmt="o", label="lower", color="tab:blue")
    ax.errorbar(x + 0.1, upper, yerr=[r.upper_se for r in rows], fmt="s", label="upper", color="tab:orange")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("nats")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


def figure_sweep(path, rows: Sequence[MethodRow], title: str = "robustness to prior shift") -> Path:
    path = _ensure_dir(Path(path))
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = sorted({r.method for r in rows})
    for method in methods:
        pts = sorted([r for r in rows if r.method == method], key=lambda r: r.shift)
        shifts = [r.shift for r in pts]
        ax.fill_between(
            shifts, [r.lower for r in pts], [r.upper for r in pts], alpha=0.25
        )
        ax.plot(shifts, [r.lower for r in pts], marker="o", label=method)
    ax.set_xlabel("prior mean shift")
    ax.set_ylabel("total EIG bounds (nats)")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


def figure_ablation(path, rows: Sequence[AblationRow], title: str = "refinement budget ablation") -> Path:
    path = _ensure_dir(Path(path))
    fig, ax = plt.subplots(figsize=(6, 4))
    budgets = [r.budget for r in rows]
    means = [r.step_lower for r in rows]
    ses = [r.step_lower_se for r in rows]
    ax.errorbar(budgets, means, yerr=ses, marker="o", color="tab:green")
    ax.set_xlabel("refinement gradient steps")
    ax.set_ylabel("conservative lower bound (nats)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
    return path


# --- histories ----------------------------------------------------------------


def write_history_csv(path, model: Model, history: History) -> Path:
    path = _ensure_dir(Path(path))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *model.design_labels, "outcome"])
        for t in range(len(history)):
            writer.writerow(
                [t + 1]
                + [repr(float(v)) for v in history.designs[t]]
                + [repr(float(history.outcomes[t]))]
            )
    return path


def read_history_csv(path, model: Model) -> History:
    history = History()
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        width = len(model.design_labels)
        if header != ["step", *model.design_labels, "outcome"]:
            raise ValueError(f"history file {path} does not match model {model.name}")
        for row in reader:
            history.append(np.array([float(v) for v in row[1 : 1 + width]]), float(row[-1]))
    return history


def write_timings_csv(path, run: RunResult) -> Path:
    path = _ensure_dir(Path(path))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tau", "design_seconds", "inference_seconds", "refine_seconds", "total_seconds"])
        for t in run.timings:
            writer.writerow([
                t.tau, repr(t.design_seconds), repr(t.inference_seconds),
                repr(t.refine_seconds), repr(t.total_seconds),
            ])
    return path
