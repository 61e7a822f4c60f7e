"""The knowledge tracer: response-split LSTM with slip/guess mixing.

Per step the network sees an interaction (q_t, r_t).  Conceptually the
input is the concatenation [q ; 0] for a correct response and [0 ; q]
for an incorrect one; each input weight therefore splits into a positive
block (applied when r=1) and a negative block (applied when r=0), and
the implementation multiplies the active block only, which is the same
arithmetic without the zero half.

On top of the recurrent state h_t sit three small heads: slip s_t and
guess g_t (sigmoid layers over the question vector) mix into a knowledge
state kappa_t = (1-s)*h + g*(1-h); an adaptation layer alpha_t =
tanh(affine(kappa_t)) feeds the per-question output layer y_t =
sigmoid(affine(alpha_t)).  Slip/guess and the adaptation layer are both
optional, which is how the plain-DKT ablation falls out.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .corpus import DomainDataset, InteractionSequence, QuestionBank
from .errors import DataError, ShapeError, UsageError

GATES = ("i", "f", "o", "c")

D_HIDDEN_DEFAULT = 100
D_ADAPT_DEFAULT = 256


@dataclass
class KTParams:
    """All learned tensors of the tracer.

    w_pos/w_neg are the split input weights per gate (d_h, d_q); w_rec the
    recurrent weights (d_h, d_h); bias the gate biases (d_h,).  Slip, guess
    and adaptation tensors are None when the variant omits them.  id_embed
    is the question-id table used instead of text encodings by the id-mode
    variants.
    """

    w_pos: dict[str, nm.Tensor]
    w_neg: dict[str, nm.Tensor]
    w_rec: dict[str, nm.Tensor]
    bias: dict[str, nm.Tensor]
    out_w: nm.Tensor  # (n_out, d_a or d_h)
    out_b: nm.Tensor  # (n_out,)
    slip_w: nm.Tensor | None = None
    slip_b: nm.Tensor | None = None
    guess_w: nm.Tensor | None = None
    guess_b: nm.Tensor | None = None
    adapt_w: nm.Tensor | None = None
    adapt_b: nm.Tensor | None = None
    id_embed: nm.Tensor | None = None

    @property
    def d_q(self) -> int:
        return self.w_pos["i"].shape[1]

    @property
    def d_h(self) -> int:
        return self.w_rec["i"].shape[1]

    @property
    def d_a(self) -> int | None:
        return None if self.adapt_w is None else self.adapt_w.shape[0]

    @property
    def n_out(self) -> int:
        return self.out_w.shape[0]

    @property
    def has_slip_guess(self) -> bool:
        return self.slip_w is not None

    @property
    def has_adapt(self) -> bool:
        return self.adapt_w is not None

    def params(self) -> list[nm.Tensor]:
        out: list[nm.Tensor] = []
        for gate in GATES:
            out += [self.w_pos[gate], self.w_neg[gate], self.w_rec[gate], self.bias[gate]]
        for t in (self.slip_w, self.slip_b, self.guess_w, self.guess_b,
                  self.adapt_w, self.adapt_b):
            if t is not None:
                out.append(t)
        out += [self.out_w, self.out_b]
        if self.id_embed is not None:
            out.append(self.id_embed)
        return out

    def non_output_params(self) -> list[nm.Tensor]:
        keep = {id(self.out_w), id(self.out_b)}
        return [p for p in self.params() if id(p) not in keep]


def init_kt(
    d_q: int,
    n_out: int,
    d_h: int = D_HIDDEN_DEFAULT,
    d_a: int | None = D_ADAPT_DEFAULT,
    seed: int = 0,
    slip_guess: bool = True,
    id_questions: int | None = None,
) -> KTParams:
    """Fresh tracer parameters.

    d_a=None drops the adaptation layer; slip_guess=False drops the heads;
    id_questions, when given, allocates an id-embedding table with that
    many rows (the union question count across domains).
    """
    rng = np.random.default_rng(seed)
    w_pos, w_neg, w_rec, bias = {}, {}, {}, {}
    for gate in GATES:
        w_pos[gate] = nm.glorot_uniform(d_q, d_h, rng=rng, name=f"w_pos.{gate}")
        w_neg[gate] = nm.glorot_uniform(d_q, d_h, rng=rng, name=f"w_neg.{gate}")
        w_rec[gate] = nm.glorot_uniform(d_h, d_h, rng=rng, name=f"w_h.{gate}")
        bias[gate] = nm.zeros(d_h, name=f"b.{gate}")
    kw: dict = {}
    if slip_guess:
        kw.update(
            slip_w=nm.glorot_uniform(d_q, d_h, rng=rng, name="slip.w"),
            slip_b=nm.zeros(d_h, name="slip.b"),
            guess_w=nm.glorot_uniform(d_q, d_h, rng=rng, name="guess.w"),
            guess_b=nm.zeros(d_h, name="guess.b"),
        )
    pre_out = d_h
    if d_a is not None:
        kw.update(
            adapt_w=nm.glorot_uniform(d_h, d_a, rng=rng, name="adapt.w"),
            adapt_b=nm.zeros(d_a, name="adapt.b"),
        )
        pre_out = d_a
    if id_questions is not None:
        kw["id_embed"] = nm.glorot_uniform(
            d_q, id_questions, rng=rng, shape=(id_questions, d_q), name="id_embed"
        )
    return KTParams(
        w_pos=w_pos, w_neg=w_neg, w_rec=w_rec, bias=bias,
        out_w=nm.glorot_uniform(pre_out, n_out, rng=rng, name="out.w"),
        out_b=nm.zeros(n_out, name="out.b"),
        **kw,
    )


def reinit_output(params: KTParams, n_out: int, seed: int) -> KTParams:
    """Replace the output layer for a bank of n_out questions; keep the rest."""
    rng = np.random.default_rng(seed)
    pre_out = params.d_a if params.has_adapt else params.d_h
    params.out_w = nm.glorot_uniform(pre_out, n_out, rng=rng, name="out.w")
    params.out_b = nm.zeros(n_out, name="out.b")
    return params


# ---------------------------------------------------------------------------
# single-interaction operations (vector path)
# ---------------------------------------------------------------------------

def embed_interaction(q: nm.Tensor, r: int) -> nm.Tensor:
    """[q ; 0] for a correct response, [0 ; q] for an incorrect one."""
    if r not in (0, 1):
        raise DataError(f"response must be 0 or 1, got {r!r}")
    zero = nm.constant(np.zeros(q.shape[0]))
    return nm.concat([q, zero] if r == 1 else [zero, q], axis=0)


def slip_guess(params: KTParams, q: nm.Tensor) -> tuple[nm.Tensor, nm.Tensor]:
    if not params.has_slip_guess:
        raise UsageError("this variant has no slip/guess heads")
    s = nm.sigmoid(nm.linear(q, params.slip_w, params.slip_b))
    g = nm.sigmoid(nm.linear(q, params.guess_w, params.guess_b))
    return s, g


def lstm_step(
    params: KTParams, q: nm.Tensor, h: nm.Tensor, c: nm.Tensor, r: int
) -> tuple[nm.Tensor, nm.Tensor]:
    """One recurrence step; the response picks which input block fires."""
    if r not in (0, 1):
        raise DataError(f"response must be 0 or 1, got {r!r}")
    w_in = params.w_pos if r == 1 else params.w_neg
    acts = {}
    for gate in GATES:
        z = nm.add(nm.linear(q, w_in[gate]), nm.linear(h, params.w_rec[gate], params.bias[gate]))
        acts[gate] = nm.tanh(z) if gate == "c" else nm.sigmoid(z)
    c_next = nm.add(nm.mul(acts["f"], c), nm.mul(acts["i"], acts["c"]))
    h_next = nm.mul(acts["o"], nm.tanh(c_next))
    return h_next, c_next


def knowledge_state(h: nm.Tensor, s: nm.Tensor, g: nm.Tensor) -> nm.Tensor:
    """kappa = (1-s)*h + g*(1-h), element-wise."""
    return nm.add(nm.mul(nm.one_minus(s), h), nm.mul(g, nm.one_minus(h)))


def predict(params: KTParams, kappa: nm.Tensor) -> tuple[nm.Tensor, nm.Tensor]:
    """Returns (alpha, y); alpha is kappa itself when there is no adaptation layer."""
    alpha = kappa
    if params.has_adapt:
        alpha = nm.tanh(nm.linear(kappa, params.adapt_w, params.adapt_b))
    y = nm.sigmoid(nm.linear(alpha, params.out_w, params.out_b))
    return alpha, y


@dataclass(frozen=True)
class StepTrace:
    """Numpy snapshot of every per-step quantity, for inspection and oracles."""

    hidden: np.ndarray
    cell: np.ndarray
    slip: np.ndarray | None
    guess: np.ndarray | None
    knowledge: np.ndarray
    adapted: np.ndarray
    probs: np.ndarray


def forward_sequence(
    params: KTParams, q_rows: np.ndarray, responses: Sequence[int]
) -> list[StepTrace]:
    """Trace one student: q_rows is (T, d_q), responses length T; h_0 = c_0 = 0."""
    if q_rows.ndim != 2 or q_rows.shape[0] != len(responses):
        raise ShapeError(
            f"forward_sequence: q_rows {q_rows.shape} vs {len(responses)} responses"
        )
    h = nm.constant(np.zeros(params.d_h))
    c = nm.constant(np.zeros(params.d_h))
    traces = []
    for t, r in enumerate(responses):
        q = nm.constant(q_rows[t])
        h, c = lstm_step(params, q, h, c, int(r))
        if params.has_slip_guess:
            s, g = slip_guess(params, q)
            kappa = knowledge_state(h, s, g)
            s_np, g_np = s.data.copy(), g.data.copy()
        else:
            kappa = h
            s_np = g_np = None
        alpha, y = predict(params, kappa)
        traces.append(StepTrace(
            hidden=h.data.copy(), cell=c.data.copy(), slip=s_np, guess=g_np,
            knowledge=kappa.data.copy(), adapted=alpha.data.copy(), probs=y.data.copy(),
        ))
    return traces


def kt_loss(traces: Sequence[StepTrace], out_cols: Sequence[int],
            responses: Sequence[int]) -> float:
    """Next-step cross-entropy over one traced sequence.

    Step t's probability row is indexed at the column of question t+1 and
    scored against response t+1.
    """
    if len(traces) < 2:
        raise DataError("kt_loss: need at least 2 steps")
    if not (len(traces) == len(out_cols) == len(responses)):
        raise ShapeError("kt_loss: traces, columns and responses must align")
    total = 0.0
    for t in range(len(traces) - 1):
        p = float(np.clip(traces[t].probs[out_cols[t + 1]], 1e-12, 1 - 1e-12))
        r = int(responses[t + 1])
        total += -(r * np.log(p) + (1 - r) * np.log1p(-p))
    return total


# ---------------------------------------------------------------------------
# batched path
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Right-padded index form of a group of sequences.

    in_idx selects rows of the input question matrix; out_idx selects
    output columns (the two differ only for the no-transfer ablation's
    column remap).  valid is 1.0 on real steps, and every row's valid
    steps form a prefix.
    """

    in_idx: np.ndarray  # (B, T) intp
    out_idx: np.ndarray  # (B, T) intp
    responses: np.ndarray  # (B, T) float64 in {0,1}
    valid: np.ndarray  # (B, T) float64 in {0,1}

    def __post_init__(self):
        if self.valid.shape != self.responses.shape or self.valid.shape != self.in_idx.shape:
            raise ShapeError("batch arrays must share one (B, T) shape")
        # padding must be a suffix per row, the forward pass relies on it
        counts = self.valid.sum(axis=1).astype(int)
        prefix = (np.arange(self.valid.shape[1])[None, :] < counts[:, None]).astype(float)
        if not np.array_equal(self.valid, prefix):
            raise ShapeError("batch valid mask must be a per-row prefix")

    @property
    def size(self) -> int:
        return self.in_idx.shape[0]

    @property
    def steps(self) -> int:
        return self.in_idx.shape[1]


def make_batches(
    sequences: Sequence[InteractionSequence],
    in_index: dict[str, int],
    out_index: dict[str, int],
    batch_size: int,
    rng: np.random.Generator | None = None,
) -> list[Batch]:
    """Pack sequences into right-padded batches, optionally shuffled."""
    if not sequences:
        raise DataError("make_batches: no sequences")
    order = np.arange(len(sequences))
    if rng is not None:
        order = rng.permutation(len(sequences))
    batches = []
    for lo in range(0, len(order), batch_size):
        group = [sequences[i] for i in order[lo : lo + batch_size]]
        t_max = max(len(s) for s in group)
        b = len(group)
        in_idx = np.zeros((b, t_max), dtype=np.intp)
        out_idx = np.zeros((b, t_max), dtype=np.intp)
        responses = np.zeros((b, t_max))
        valid = np.zeros((b, t_max))
        for i, seq in enumerate(group):
            for t, (qid, r) in enumerate(seq.steps):
                try:
                    in_idx[i, t] = in_index[qid]
                    out_idx[i, t] = out_index[qid]
                except KeyError:
                    raise DataError(f"unknown qid {qid!r} for this model") from None
                responses[i, t] = r
                valid[i, t] = 1.0
        batches.append(Batch(in_idx, out_idx, responses, valid))
    return batches


@dataclass
class BatchStates:
    """Per-step tensors from one batched forward pass."""

    hidden: list[nm.Tensor]  # each (B, d_h)
    knowledge: list[nm.Tensor]
    adapted: list[nm.Tensor]  # adaptation-layer outputs (B, d_a), or knowledge
    probs: list[nm.Tensor]  # each (B, n_out)


def forward_batch(params: KTParams, q_matrix: nm.Tensor, batch: Batch) -> BatchStates:
    """Run the recurrence over a whole batch.

    The response split is realized by masking: the positive blocks see
    q_t zeroed wherever r=0 or the step is padding, the negative blocks
    the complement.  Identical arithmetic to the per-sequence path.
    """
    bsz = batch.size
    h = nm.constant(np.zeros((bsz, params.d_h)))
    c = nm.constant(np.zeros((bsz, params.d_h)))
    states = BatchStates([], [], [], [])
    for t in range(batch.steps):
        x = nm.gather_rows(q_matrix, batch.in_idx[:, t])  # (B, d_q)
        on = batch.valid[:, t]
        pos = (batch.responses[:, t] * on)[:, None]
        neg = ((1.0 - batch.responses[:, t]) * on)[:, None]
        d_q = params.d_q
        x_pos = nm.mul(x, nm.constant(np.broadcast_to(pos, (bsz, d_q)).copy()))
        x_neg = nm.mul(x, nm.constant(np.broadcast_to(neg, (bsz, d_q)).copy()))
        acts = {}
        for gate in GATES:
            z = nm.add(
                nm.add(nm.linear(x_pos, params.w_pos[gate]), nm.linear(x_neg, params.w_neg[gate])),
                nm.linear(h, params.w_rec[gate], params.bias[gate]),
            )
            acts[gate] = nm.tanh(z) if gate == "c" else nm.sigmoid(z)
        c = nm.add(nm.mul(acts["f"], c), nm.mul(acts["i"], acts["c"]))
        h = nm.mul(acts["o"], nm.tanh(c))
        if params.has_slip_guess:
            s = nm.sigmoid(nm.linear(x, params.slip_w, params.slip_b))
            g = nm.sigmoid(nm.linear(x, params.guess_w, params.guess_b))
            kappa = knowledge_state(h, s, g)
        else:
            kappa = h
        alpha, y = predict(params, kappa)
        states.hidden.append(h)
        states.knowledge.append(kappa)
        states.adapted.append(alpha)
        states.probs.append(y)
    return states


def batch_kt_loss(
    params: KTParams, q_matrix: nm.Tensor, batch: Batch,
    states: BatchStates | None = None,
    score_mask: np.ndarray | None = None,
) -> nm.Tensor:
    """Summed next-step cross-entropy over every valid scored pair.

    score_mask, when given, is a (B, T) {0,1} array that additionally
    gates which steps may be scored as prediction targets; steps stay in
    the recurrence either way.
    """
    if batch.steps < 2:
        raise DataError("batch_kt_loss: need at least 2 steps")
    if score_mask is not None and score_mask.shape != batch.valid.shape:
        raise ShapeError("batch_kt_loss: score_mask must match the batch shape")
    if states is None:
        states = forward_batch(params, q_matrix, batch)
    n_out = params.n_out
    bsz = batch.size
    total: nm.Tensor | None = None
    for t in range(batch.steps - 1):
        scored = batch.valid[:, t + 1]
        if score_mask is not None:
            scored = scored * score_mask[:, t + 1]
        if not scored.any():
            continue
        onehot = np.zeros((bsz, n_out))
        onehot[np.arange(bsz), batch.out_idx[:, t + 1]] = scored
        p = nm.reduce_sum(nm.mul(states.probs[t], nm.constant(onehot)), axis=1)  # (B,)
        # for padded rows the gathered p is 0; substitute a harmless 0.5
        # before BCE and zero the result with the mask
        p = nm.add(p, nm.constant(0.5 * (1.0 - scored)))
        bce = nm.binary_cross_entropy(p, nm.constant(batch.responses[:, t + 1]))
        masked = nm.mul(bce, nm.constant(scored))
        part = nm.reduce_sum(masked)
        total = part if total is None else nm.add(total, part)
    if total is None:
        raise DataError("batch_kt_loss: no scored steps")
    return total


def scored_pairs(
    params: KTParams, q_matrix: nm.Tensor, batch: Batch
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-only (predicted probability, label) pool for evaluation."""
    states = forward_batch(params, q_matrix, batch)
    preds, labels = [], []
    for t in range(batch.steps - 1):
        scored = batch.valid[:, t + 1].astype(bool)
        if not scored.any():
            continue
        rows = np.arange(batch.size)[scored]
        cols = batch.out_idx[rows, t + 1]
        preds.append(states.probs[t].data[rows, cols])
        labels.append(batch.responses[rows, t + 1])
    if not preds:
        return np.empty(0), np.empty(0)
    return np.concatenate(preds), np.concatenate(labels)


# ---------------------------------------------------------------------------
# model bundle: question representations + tracer
# ---------------------------------------------------------------------------

@dataclass
class Model:
    """A tracer plus whatever produces its question vectors.

    Text mode carries the autoencoder and encodes any bank on demand; id
    mode looks rows up in kt.id_embed, whose row order is in_qids (the
    union of the banks the model was created over).  out_qids fixes the
    meaning of output columns.
    """

    kt: KTParams
    ae: "object | None"  # AutoencoderParams when text_mode, else None
    text_mode: bool
    in_qids: tuple[str, ...] = ()
    out_qids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.text_mode and self.ae is None:
            raise UsageError("text mode needs autoencoder parameters")
        if not self.text_mode and self.kt.id_embed is None:
            raise UsageError("id mode needs an id-embedding table")

    def question_matrix(self, bank: QuestionBank) -> nm.Tensor:
        """Differentiable (len(bank), d_q) matrix of question vectors."""
        if self.text_mode:
            from .autoenc import encode_bank

            return encode_bank(self.ae, bank)
        lookup = {qid: i for i, qid in enumerate(self.in_qids)}
        try:
            rows = np.array([lookup[q.qid] for q in bank], dtype=np.intp)
        except KeyError as e:
            raise DataError(f"qid {e.args[0]!r} has no id-embedding row") from None
        return nm.gather_rows(self.kt.id_embed, rows)

    def trainable_params(self) -> list[nm.Tensor]:
        out = list(self.kt.params())
        if self.text_mode:
            out += self.ae.all_params()
        return out

    def out_index(self) -> dict[str, int]:
        return {qid: i for i, qid in enumerate(self.out_qids)}

    def in_index_for(self, bank: QuestionBank) -> dict[str, int]:
        """Map qids to rows of question_matrix(bank): always bank order."""
        return {q.qid: i for i, q in enumerate(bank)}


def dataset_batches(
    model: Model,
    dataset: DomainDataset,
    batch_size: int,
    rng: np.random.Generator | None = None,
    out_index: dict[str, int] | None = None,
) -> list[Batch]:
    in_index = model.in_index_for(dataset.bank)
    if out_index is None:
        out_index = model.out_index()
    return make_batches(dataset.sequences, in_index, out_index, batch_size, rng)
