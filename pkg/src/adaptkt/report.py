"""Result tables, sensitivity series, and figure rendering.

Two row shapes cover the experiment kinds.  In-domain comparisons are
(model, s_dim, dataset, auc, f1) rows, one per variant and dataset, where
s_dim is the slip/guess head width (the tracer hidden size, or 0 when the
variant has no such heads).  Transfer comparisons are
(model, adapt_dim, task, metric) rows, one per metric file, where task
names the source->target pair and adapt_dim is the adaptation width.

Sweeps are plot-ready (x, y) series: one row per swept value.  Figures are
rendered headlessly to PNG next to the CSVs they visualize.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .adapt import HISTORY_COLUMNS, AdaptEpoch
from .errors import UsageError

RESULT_COLUMNS = ("model", "s_dim", "dataset", "auc", "f1")
TRANSFER_COLUMNS = ("model", "adapt_dim", "task", "metric")


@dataclass(frozen=True)
class ResultRow:
    """One in-domain result: a model variant scored on one dataset."""

    model: str
    s_dim: int
    dataset: str
    auc: float
    f1: float


@dataclass(frozen=True)
class TransferRow:
    """One transfer result: a variant scored on one source->target task."""

    model: str
    adapt_dim: int
    task: str
    metric: float


@dataclass(frozen=True)
class SweepPoint:
    x: float
    auc: float


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def _write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_results_csv(path: str | Path, rows: Sequence[ResultRow]) -> None:
    _write_csv(path, RESULT_COLUMNS,
               ((r.model, r.s_dim, r.dataset, r.auc, r.f1) for r in rows))


def write_transfer_csv(path: str | Path, rows: Sequence[TransferRow]) -> None:
    _write_csv(path, TRANSFER_COLUMNS,
               ((r.model, r.adapt_dim, r.task, r.metric) for r in rows))


def write_sweep_csv(path: str | Path, param: str, points: Sequence[SweepPoint]) -> None:
    """Sensitivity series: one row per swept value of `param`."""
    _write_csv(path, (param, "auc"), ((p.x, p.auc) for p in points))


def write_json(path: str | Path, fingerprint: str, rows: Sequence) -> None:
    """The same rows as the CSVs, tagged with the producing config."""
    doc = {"fingerprint": fingerprint, "rows": [asdict(r) for r in rows]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_rows(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def plot_sweep(path: str | Path, param: str, points: Sequence[SweepPoint]) -> None:
    """AUC against the swept parameter, one marked line."""
    if not points:
        raise UsageError("plot_sweep: no points to draw")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [p.x for p in points]
    ys = [p.auc for p in points]
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(param)
    ax.set_ylabel("AUC")
    ax.set_title(f"sensitivity to {param}")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(path: str | Path, history: Sequence[AdaptEpoch]) -> None:
    """Training trace: loss per scored pair, and the discrepancy when the
    run tracked one, on a second axis."""
    if not history:
        raise UsageError("plot_history: no epochs to draw")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [h.epoch for h in history]
    ax.plot(epochs, [h.kt_loss for h in history], marker="o", label="kt loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("kt loss per pair")
    ax.grid(True, alpha=0.3)
    mmd = [(h.epoch, h.mmd2) for h in history if not math.isnan(h.mmd2)]
    if mmd:
        twin = ax.twinx()
        twin.plot([e for e, _ in mmd], [v for _, v in mmd],
                  color="tab:red", marker="s", label="mmd^2")
        twin.set_ylabel("mmd^2")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_comparison(path: str | Path, rows: Sequence[ResultRow]) -> None:
    """Bar chart of AUC per model variant, grouped by dataset."""
    if not rows:
        raise UsageError("plot_comparison: no rows to draw")
    datasets = sorted({r.dataset for r in rows})
    models = sorted({r.model for r in rows})
    fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(datasets) * len(models) / 2, 3.5))
    width = 0.8 / len(models)
    for j, model in enumerate(models):
        xs, ys = [], []
        for i, ds in enumerate(datasets):
            match = [r.auc for r in rows if r.model == model and r.dataset == ds]
            if match:
                xs.append(i + j * width)
                ys.append(match[0])
        ax.bar(xs, ys, width=width, label=model)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(datasets))])
    ax.set_xticklabels(datasets)
    ax.set_ylabel("AUC")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_history_csv(path: str | Path) -> list[AdaptEpoch]:
    """Inverse of adapt.write_history, for plotting saved runs."""
    out = []
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != HISTORY_COLUMNS:
            raise UsageError(f"{path}: not a training-history file")
        for row in reader:
            out.append(AdaptEpoch(
                epoch=int(row["epoch"]),
                kt_loss=float(row["kt_loss"]),
                mmd2=float(row["mmd2"]) if row["mmd2"] else math.nan,
                selected_count=int(row["selected_count"]) if row["selected_count"] else None,
                lr=float(row["lr"]),
                seconds=float(row["seconds"]),
            ))
    return out
