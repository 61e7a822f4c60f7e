"""Transfer trainers: selected-source training, MMD alignment, fine-tuning.

The adaptation objective is J_KT + gamma * MMD^2, minimized alternately.
Each epoch runs mini-batched Adam on the tracing loss over the selected
source data, then a short full-batch descent on the discrepancy between
the pooled adaptation-layer states of the two domains.  Setting gamma
to zero degenerates to plain source training, and both entry points
share one engine so that equivalence is exact.

Target responses are consumed only by the forward recurrence (the
interaction encoding needs them); no loss term ever reads them.  The
kernel mean discrepancy uses either a linear kernel or an RBF kernel
whose bandwidth, when not given explicitly, is the median pairwise
distance of the pooled sample, recomputed at each step and treated as a
constant by the gradient.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ktmodel as kt
from . import numerics as nm
from .autoenc import SelectionMask
from .corpus import DomainDataset, InteractionSequence
from .errors import DataError, UsageError

log = logging.getLogger(__name__)

SELECTION_DELETE = "delete"
SELECTION_MASK = "mask"
_SELECTION_MODES = (SELECTION_DELETE, SELECTION_MASK)

HISTORY_COLUMNS = ("epoch", "kt_loss", "mmd2", "selected_count", "lr", "seconds")


# ---------------------------------------------------------------------------
# kernels and the discrepancy estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KernelSpec:
    """Kernel for the mean-discrepancy estimator.

    kind is "linear" or "rbf".  For the RBF kernel
    k(a, b) = exp(-||a - b||^2 / (2 sigma^2)); bandwidth is sigma, and
    None means the median heuristic evaluated on the pooled sample.
    """

    kind: str = "rbf"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise UsageError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "linear" and self.bandwidth is not None:
            raise UsageError("the linear kernel takes no bandwidth")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise UsageError(f"bandwidth must be positive, got {self.bandwidth}")


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise distance over the rows of pooled; 1.0 if all coincide."""
    sq = np.sum(pooled * pooled, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pooled @ pooled.T)
    upper = d2[np.triu_indices(pooled.shape[0], k=1)]
    dist = np.sqrt(np.maximum(upper, 0.0))
    dist = dist[dist > 0]
    if dist.size == 0:
        return 1.0
    return float(np.median(dist))


def _gram(kernel: KernelSpec, a: nm.Tensor, b: nm.Tensor, bandwidth: float | None) -> nm.Tensor:
    if kernel.kind == "linear":
        return nm.linear(a, b)  # a @ b.T
    sq_a = nm.reduce_sum(nm.mul(a, a), axis=1)
    sq_b = nm.reduce_sum(nm.mul(b, b), axis=1)
    n, m = a.shape[0], b.shape[0]
    # ||a_i - b_j||^2 assembled with rank-one products, since only the
    # affine primitive broadcasts
    d2 = nm.add(
        nm.add(
            nm.matmul(nm.reshape(sq_a, (n, 1)), nm.constant(np.ones((1, m)))),
            nm.matmul(nm.constant(np.ones((n, 1))), nm.reshape(sq_b, (1, m))),
        ),
        nm.scale_add(nm.linear(a, b), -2.0, 0.0),
    )
    return nm.exp(nm.scale_add(d2, -1.0 / (2.0 * bandwidth * bandwidth), 0.0))


def mmd2(x: nm.Tensor, y: nm.Tensor, kernel: KernelSpec = KernelSpec()) -> nm.Tensor:
    """Biased V-statistic estimate of the squared mean discrepancy.

    mean k(x,x') + mean k(y,y') - 2 mean k(x,y) over (n, d) and (m, d)
    sample matrices.  The estimator is symmetric, so the arguments are
    put into a canonical order before evaluation; floating point then
    cannot break mmd2(x, y) == mmd2(y, x).
    """
    for t in (x, y):
        if t.data.ndim != 2 or t.shape[0] < 1:
            raise DataError(f"mmd2: need non-empty (n, d) samples, got {t.shape}")
    if x.shape[1] != y.shape[1]:
        raise DataError(f"mmd2: dimension mismatch {x.shape} vs {y.shape}")
    a, b = x, y
    if (y.shape[0], y.data.tobytes()) < (x.shape[0], x.data.tobytes()):
        a, b = y, x
    bandwidth = kernel.bandwidth
    if kernel.kind == "rbf" and bandwidth is None:
        bandwidth = median_bandwidth(np.concatenate([a.data, b.data], axis=0))
    k_aa = nm.reduce_mean(_gram(kernel, a, a, bandwidth))
    k_bb = nm.reduce_mean(_gram(kernel, b, b, bandwidth))
    k_ab = nm.reduce_mean(_gram(kernel, a, b, bandwidth))
    return nm.add(nm.add(k_aa, k_bb), nm.scale_add(k_ab, -2.0, 0.0))


# ---------------------------------------------------------------------------
# selection application
# ---------------------------------------------------------------------------

def _check_mask(source: DomainDataset, mask: SelectionMask) -> None:
    if len(mask.u) != len(source.bank):
        raise UsageError(
            f"selection mask covers {len(mask.u)} questions, bank has {len(source.bank)}"
        )


def apply_selection(source: DomainDataset, mask: SelectionMask) -> DomainDataset:
    """Drop unselected-question interactions from every sequence.

    Remaining steps keep their order; sequences left with fewer than two
    steps are dropped since they cannot be scored.  The bank itself is
    kept whole so question indices stay stable.
    """
    _check_mask(source, mask)
    keep = {qid for qid, flag in zip(source.bank.qids, mask.u) if flag}
    kept: list[InteractionSequence] = []
    dropped = 0
    for seq in source.sequences:
        steps = tuple(step for step in seq.steps if step[0] in keep)
        if len(steps) >= 2:
            kept.append(InteractionSequence(seq.student, steps))
        else:
            dropped += 1
    if not kept:
        raise DataError(
            f"selection kept {mask.selected_count} of {len(source.bank)} questions "
            "and left no sequence with two or more steps"
        )
    if dropped:
        log.warning("selection dropped %d of %d sequences", dropped, len(source.sequences))
    return DomainDataset(source.bank, tuple(kept), source.role)


# ---------------------------------------------------------------------------
# configuration and history
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptConfig:
    """Knobs shared by the transfer trainers.

    gamma weights the discrepancy term; lam is the selection threshold
    carried along for fingerprints.  mmd_cap bounds how many pooled
    states per domain enter one discrepancy step, and mmd_steps is the
    number of full-batch descent iterations each alignment phase runs.
    A single raw-gradient step cannot counteract the drift of the
    normalized tracing steps, so the alignment phase descends for a
    small fixed budget instead.
    """

    gamma: float = 0.5
    lam: float = 0.5
    batch_size: int = 64
    mmd_cap: int = 1024
    mmd_steps: int = 10
    epochs: int = 10
    lr: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise UsageError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError(f"lambda must be in [0, 1], got {self.lam}")
        if self.batch_size < 1 or self.mmd_cap < 1:
            raise UsageError("batch_size and mmd_cap must be at least 1")
        if self.mmd_steps < 1:
            raise UsageError(f"mmd_steps must be at least 1, got {self.mmd_steps}")
        if self.epochs < 0:
            raise UsageError(f"epochs must be non-negative, got {self.epochs}")
        if not self.lr > 0:
            raise UsageError(f"learning rate must be positive, got {self.lr}")


@dataclass(frozen=True)
class AdaptEpoch:
    """One history row.

    kt_loss is the mean cross-entropy per scored pair for the epoch;
    mmd2 is the discrepancy at the start of the epoch's alignment phase
    (NaN when that phase was skipped); selected_count is None for
    phases without instance selection.
    """

    epoch: int
    kt_loss: float
    mmd2: float
    selected_count: int | None
    lr: float
    seconds: float


def write_history(history: Sequence[AdaptEpoch], path) -> None:
    """Emit history rows as CSV; NaN and None become empty cells."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                row.epoch,
                f"{row.kt_loss:.10g}",
                "" if math.isnan(row.mmd2) else f"{row.mmd2:.10g}",
                "" if row.selected_count is None else row.selected_count,
                f"{row.lr:.10g}",
                f"{row.seconds:.6g}",
            ])


# ---------------------------------------------------------------------------
# the shared training engine
# ---------------------------------------------------------------------------

def pool_states(model: kt.Model, dataset: DomainDataset) -> nm.Tensor:
    """Adaptation-layer states of every real timestep, as one (N, d_a) tensor."""
    in_index = model.in_index_for(dataset.bank)
    # output columns are never scored here; a throwaway index keeps the
    # batch builder happy for banks outside the output layer
    dummy_out = dict.fromkeys(in_index, 0)
    (batch,) = kt.make_batches(dataset.sequences, in_index, dummy_out,
                               batch_size=len(dataset.sequences))
    q_matrix = model.question_matrix(dataset.bank)
    states = kt.forward_batch(model.kt, q_matrix, batch)
    chunks = []
    for t in range(batch.steps):
        rows = np.flatnonzero(batch.valid[:, t])
        if rows.size == 0:
            continue
        if rows.size == batch.size:
            chunks.append(states.adapted[t])
        else:
            chunks.append(nm.gather_rows(states.adapted[t], rows))
    return nm.concat(chunks, axis=0)


def _subsample(states: nm.Tensor, cap: int, rng: np.random.Generator) -> nm.Tensor:
    n = states.shape[0]
    if n <= cap:
        return states
    rows = np.sort(rng.choice(n, size=cap, replace=False))
    return nm.gather_rows(states, rows)


def _scored_pair_count(batch: kt.Batch, score_mask: np.ndarray | None) -> float:
    scored = batch.valid[:, 1:]
    if score_mask is not None:
        scored = scored * score_mask[:, 1:]
    return float(scored.sum())


def _run_epochs(
    model: kt.Model,
    data: DomainDataset,
    cfg: AdaptConfig,
    params: list[nm.Tensor],
    *,
    gamma: float,
    target: DomainDataset | None,
    kernel: KernelSpec | None,
    selected_count: int | None,
    selected_flags: np.ndarray | None,
) -> list[AdaptEpoch]:
    """Alternating minimization; gamma == 0 runs the tracing step only.

    Batch shuffling draws from one stream seeded by (seed, 0) so runs
    that differ only in gamma share their step-1 trajectory; each
    epoch's discrepancy subsample uses its own (seed, 1, epoch) stream.
    """
    optimizer = nm.Adam(params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    history: list[AdaptEpoch] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        batches = kt.dataset_batches(model, data, cfg.batch_size, rng=shuffle_rng)
        total_loss = 0.0
        total_pairs = 0.0
        for batch in batches:
            score_mask = None
            if selected_flags is not None:
                score_mask = selected_flags[batch.in_idx]
            q_matrix = model.question_matrix(data.bank)
            loss = kt.batch_kt_loss(model.kt, q_matrix, batch, score_mask=score_mask)
            grads = nm.gradients(loss, params)
            optimizer.step(grads)
            total_loss += loss.item()
            total_pairs += _scored_pair_count(batch, score_mask)
        mmd_value = math.nan
        if gamma > 0.0:
            step_rng = np.random.default_rng([cfg.seed, 1, epoch])
            for inner in range(cfg.mmd_steps):
                src_states = _subsample(pool_states(model, data), cfg.mmd_cap, step_rng)
                tgt_states = _subsample(pool_states(model, target), cfg.mmd_cap, step_rng)
                discrepancy = mmd2(src_states, tgt_states, kernel)
                objective = nm.scale_add(discrepancy, gamma, 0.0)
                nm.sgd_step(params, nm.gradients(objective, params), lr=cfg.lr)
                if inner == 0:
                    mmd_value = discrepancy.item()
        history.append(AdaptEpoch(
            epoch=epoch,
            kt_loss=total_loss / max(total_pairs, 1.0),
            mmd2=mmd_value,
            selected_count=selected_count,
            lr=cfg.lr,
            seconds=time.perf_counter() - started,
        ))
    return history


def _selected_source(
    model: kt.Model,
    source: DomainDataset,
    mask: SelectionMask,
    selection_mode: str,
) -> tuple[DomainDataset, np.ndarray | None]:
    if selection_mode not in _SELECTION_MODES:
        raise UsageError(f"selection mode must be one of {_SELECTION_MODES}")
    _check_mask(source, mask)
    if mask.selected_count == 0:
        raise DataError(
            f"selection kept 0 of {len(source.bank)} questions; nothing to train on"
        )
    if selection_mode == SELECTION_DELETE:
        return apply_selection(source, mask), None
    return source, np.asarray(mask.u, dtype=float)


# ---------------------------------------------------------------------------
# the three transfer steps
# ---------------------------------------------------------------------------

def train_source(
    model: kt.Model,
    source: DomainDataset,
    mask: SelectionMask,
    cfg: AdaptConfig,
    selection_mode: str = SELECTION_DELETE,
) -> list[AdaptEpoch]:
    """Train the tracer on the selected source instances; no alignment."""
    data, flags = _selected_source(model, source, mask, selection_mode)
    return _run_epochs(
        model, data, cfg, model.trainable_params(),
        gamma=0.0, target=None, kernel=None,
        selected_count=mask.selected_count, selected_flags=flags,
    )


def adapt(
    model: kt.Model,
    source: DomainDataset,
    mask: SelectionMask,
    target_unlabeled: DomainDataset,
    kernel: KernelSpec,
    cfg: AdaptConfig,
    selection_mode: str = SELECTION_DELETE,
) -> list[AdaptEpoch]:
    """Alternate tracing-loss steps with discrepancy-alignment steps.

    With cfg.gamma == 0 the alignment step is skipped and the run is
    identical to train_source under the same seed.
    """
    data, flags = _selected_source(model, source, mask, selection_mode)
    return _run_epochs(
        model, data, cfg, model.trainable_params(),
        gamma=cfg.gamma, target=target_unlabeled, kernel=kernel,
        selected_count=mask.selected_count, selected_flags=flags,
    )


def finetune(
    model: kt.Model,
    target_labeled: DomainDataset,
    cfg: AdaptConfig,
    unfreeze: bool = False,
) -> list[AdaptEpoch]:
    """Replace the output layer for the target bank and retrain it.

    Everything below the output layer is frozen unless unfreeze is set.
    cfg.epochs == 0 performs the replacement only.
    """
    if not target_labeled.sequences:
        raise DataError("finetune: the labeled target set is empty")
    kt.reinit_output(model.kt, len(target_labeled.bank), seed=cfg.seed)
    model.out_qids = target_labeled.bank.qids
    if unfreeze:
        params = model.trainable_params()
    else:
        params = [model.kt.out_w, model.kt.out_b]
    return _run_epochs(
        model, target_labeled, cfg, params,
        gamma=0.0, target=None, kernel=None,
        selected_count=None, selected_flags=None,
    )


def remap_output(target_bank, n_source_out: int) -> dict[str, int]:
    """Output-column remap for direct transfer without fine-tuning.

    Target question number i is scored against source output column
    i mod n_source_out, which keeps a source-trained output layer usable
    on a differently sized target bank.
    """
    if n_source_out < 1:
        raise UsageError("remap_output: the source output layer is empty")
    return {q.qid: i % n_source_out for i, q in enumerate(target_bank)}


def domain_mmd2(
    model: kt.Model,
    first: DomainDataset,
    second: DomainDataset,
    kernel: KernelSpec,
    cap: int = 1024,
    seed: int = 0,
) -> float:
    """Forward-only discrepancy between two datasets' pooled states."""
    rng = np.random.default_rng([seed, 2])
    a = _subsample(pool_states(model, first), cap, rng)
    b = _subsample(pool_states(model, second), cap, rng)
    return mmd2(a, b, kernel).item()
