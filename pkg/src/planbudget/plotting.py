"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .scheduling import DECAY_KINDS, ScheduleKind, ScheduleParams, allocate, decay_prior, normalize_weights  # noqa: E402

plt.rcParams.update(
    {
        "font.size": 9,
        "axes.labelsize": 9,
        "legend.fontsize": 8,
        "xtick.labelsize": 8,
        "ytick.labelsize": 8,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "svg.hashsalt": "planbudget",
    }
)

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata=_PNG_META if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_decay_allocations(path, total: int = 100, m: int = 5, p: float = 2.0, gamma: float = 0.9, epsilon: float = 0.01) -> Path:
    """Integer budgets per sub-question for every schedule, equal complexity."""
    weights = normalize_weights([1.0] * m)
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    xs = list(range(1, m + 1))
    for kind in (ScheduleKind.UNIFORM,) + DECAY_KINDS:
        params = ScheduleParams(kind, p=p, gamma=gamma, epsilon=epsilon)
        budgets = allocate(total, weights, decay_prior(params, m), params.min_budget).budgets
        ax.plot(xs, budgets, marker="o", label=kind.value)
    ax.set_xlabel("sub-question")
    ax.set_ylabel("allocated budget")
    ax.set_xticks(xs)
    ax.set_title(f"B={total}, p={p:g}, gamma={gamma:g}")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_reports(reports: Sequence, path) -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(7.5, 3.0))
    labels = [r.method or "?" for r in reports]
    for r, label in zip(reports, labels):
        left.errorbar(r.tokens_mean, r.score_mean, xerr=r.tokens_std, yerr=r.score_std, fmt="o", capsize=2, label=label)
    left.set_xlabel("avg. billed tokens")
    left.set_ylabel("score (%)")
    if len(reports) <= 10:
        left.legend(frameon=False)
    right.bar(range(len(reports)), [r.e3 for r in reports], color="0.4")
    right.set_xticks(range(len(reports)))
    right.set_xticklabels(labels, rotation=30, ha="right")
    right.set_ylabel("E3 = A^2 / T")
    return _save(fig, path)


def plot_runs(executions: Sequence, path) -> Path:
    """Per-query billed tokens, one marker per run; failed runs drawn hollow."""
    fig, ax = plt.subplots(figsize=(5.0, 3.0))
    ids = sorted({e.record.id for e in executions})
    pos = {q: k for k, q in enumerate(ids)}
    ok = [e for e in executions if not e.failed]
    bad = [e for e in executions if e.failed]
    ax.scatter([pos[e.record.id] for e in ok], [e.completion_tokens for e in ok], s=12, c="0.2")
    if bad:
        ax.scatter([pos[e.record.id] for e in bad], [e.completion_tokens for e in bad], s=14, facecolors="none", edgecolors="C3")
    ax.set_xlabel("query")
    ax.set_ylabel("billed tokens")
    if len(ids) <= 20:
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=45, ha="right")
    return _save(fig, path)
