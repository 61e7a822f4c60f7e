"""Question-text autoencoder and reconstruction-driven instance selection.

A bidirectional LSTM reads a question's token embeddings; the two final
directions' step states are concatenated and max-pooled coordinate-wise
into one vector per question.  An LSTM decoder, seeded with that vector,
re-emits the token embeddings one step at a time, feeding each step's
prediction back in as the next input.  Questions whose reconstruction
error stays below the threshold lambda are selected as transferable.

Reconstruction lives in embedding space: targets are the embedding table
min-max normalized to [0,1] per coordinate (refreshed every epoch), which
is the range the sigmoid output layer can hit.  The embedding table itself
stays frozen during this pretraining phase, since letting the targets
chase the weights admits a collapse to a constant table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nm
from .corpus import BOS, QuestionBank, Vocab
from .errors import DataError, ShapeError, UsageError

D_EMBED_DEFAULT = 100
ENC_HIDDEN_DEFAULT = 50
LAMBDA_DEFAULT = 0.5

_GATES = ("i", "f", "o", "c")  # packed row-block order of every LSTM here


@dataclass
class LSTMWeights:
    """One LSTM's packed weights: rows are the i, f, o, c gate blocks."""

    w_x: nm.Tensor  # (4h, d_in)
    w_h: nm.Tensor  # (4h, h)
    b: nm.Tensor  # (4h,)

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator, tag: str) -> "LSTMWeights":
        return cls(
            w_x=nm.glorot_uniform(d_in, 4 * hidden, rng=rng, name=f"{tag}.w_x"),
            w_h=nm.glorot_uniform(hidden, 4 * hidden, rng=rng, name=f"{tag}.w_h"),
            b=nm.zeros(4 * hidden, name=f"{tag}.b"),
        )

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]

    def params(self) -> list[nm.Tensor]:
        return [self.w_x, self.w_h, self.b]


def lstm_cell(
    w: LSTMWeights, x: nm.Tensor, h: nm.Tensor, c: nm.Tensor
) -> tuple[nm.Tensor, nm.Tensor]:
    """One step over a batch: x (B, d_in), h and c (B, hidden)."""
    n = w.hidden
    z = nm.add(nm.linear(x, w.w_x, w.b), nm.linear(h, w.w_h))
    gi = nm.sigmoid(nm.slice_axis(z, 1, 0, n))
    gf = nm.sigmoid(nm.slice_axis(z, 1, n, 2 * n))
    go = nm.sigmoid(nm.slice_axis(z, 1, 2 * n, 3 * n))
    gc = nm.tanh(nm.slice_axis(z, 1, 3 * n, 4 * n))
    c_next = nm.add(nm.mul(gf, c), nm.mul(gi, gc))
    h_next = nm.mul(go, nm.tanh(c_next))
    return h_next, c_next


@dataclass
class AutoencoderParams:
    embedding: nm.Tensor  # (vocab, d_embed)
    enc_fwd: LSTMWeights  # input d_embed, hidden enc_hidden
    enc_bwd: LSTMWeights
    dec: LSTMWeights  # input d_embed, hidden d_q = 2 * enc_hidden
    proj_w: nm.Tensor  # (d_embed, d_q)
    proj_b: nm.Tensor  # (d_embed,)

    @property
    def d_embed(self) -> int:
        return self.embedding.shape[1]

    @property
    def d_q(self) -> int:
        return 2 * self.enc_fwd.hidden

    def reconstruction_params(self) -> list[nm.Tensor]:
        """Everything pretraining updates; excludes the frozen embedding."""
        return (
            self.enc_fwd.params()
            + self.enc_bwd.params()
            + self.dec.params()
            + [self.proj_w, self.proj_b]
        )

    def all_params(self) -> list[nm.Tensor]:
        return [self.embedding] + self.reconstruction_params()


def init_autoencoder(
    vocab_size: int,
    d_embed: int = D_EMBED_DEFAULT,
    enc_hidden: int = ENC_HIDDEN_DEFAULT,
    seed: int = 0,
    pretrained: tuple[int, dict[str, np.ndarray]] | None = None,
    vocab: Vocab | None = None,
) -> AutoencoderParams:
    """Fresh parameters; optionally seed embedding rows from a vector file.

    `pretrained` is the (dim, token -> vector) pair from
    corpus.read_embedding_file; rows for tokens absent there keep their
    random init.
    """
    rng = np.random.default_rng(seed)
    embedding = nm.glorot_uniform(
        d_embed, vocab_size, rng=rng, shape=(vocab_size, d_embed), name="embedding"
    )
    if pretrained is not None:
        if vocab is None:
            raise UsageError("init_autoencoder: pretrained vectors need the vocab")
        dim, vectors = pretrained
        if dim != d_embed:
            raise DataError(f"embedding file dim {dim} != configured {d_embed}")
        for token, vec in vectors.items():
            idx = vocab.token_to_id.get(token)
            if idx is not None:
                embedding.data[idx] = vec
    d_q = 2 * enc_hidden
    return AutoencoderParams(
        embedding=embedding,
        enc_fwd=LSTMWeights.init(d_embed, enc_hidden, rng, "enc_fwd"),
        enc_bwd=LSTMWeights.init(d_embed, enc_hidden, rng, "enc_bwd"),
        dec=LSTMWeights.init(d_embed, d_q, rng, "dec"),
        proj_w=nm.glorot_uniform(d_q, d_embed, rng=rng, name="proj_w"),
        proj_b=nm.zeros(d_embed, name="proj_b"),
    )


def normalized_embedding(params: AutoencoderParams) -> np.ndarray:
    """Coordinate-wise min-max map of the embedding table into [0, 1]."""
    table = params.embedding.data
    lo = table.min(axis=0)
    span = np.maximum(table.max(axis=0) - lo, 1e-8)
    return (table - lo) / span


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def encode_batch(params: AutoencoderParams, token_rows: Sequence[Sequence[int]]) -> nm.Tensor:
    """Encode same-length token rows into question vectors, shape (B, d_q).

    Per step the forward and backward hidden states are concatenated; the
    question vector is the coordinate-wise max over steps.
    """
    if len(token_rows) == 0:
        raise ShapeError("encode_batch: empty batch")
    length = len(token_rows[0])
    if length < 1 or any(len(r) != length for r in token_rows):
        raise ShapeError("encode_batch: rows must share one length >= 1")
    batch = len(token_rows)
    ids = np.asarray(token_rows, dtype=np.intp)  # (B, L)
    xs = [nm.gather_rows(params.embedding, ids[:, t]) for t in range(length)]

    n = params.enc_fwd.hidden
    h = nm.constant(np.zeros((batch, n)))
    c = nm.constant(np.zeros((batch, n)))
    fwd_states: list[nm.Tensor] = []
    for t in range(length):
        h, c = lstm_cell(params.enc_fwd, xs[t], h, c)
        fwd_states.append(h)

    h = nm.constant(np.zeros((batch, n)))
    c = nm.constant(np.zeros((batch, n)))
    bwd_states: list[nm.Tensor] = [None] * length  # type: ignore[list-item]
    for t in reversed(range(length)):
        h, c = lstm_cell(params.enc_bwd, xs[t], h, c)
        bwd_states[t] = h

    per_step = [nm.concat([fwd_states[t], bwd_states[t]], axis=1) for t in range(length)]
    return nm.reduce_max(nm.stack(per_step), axis=0)  # (B, d_q)


def encode(params: AutoencoderParams, tokens: Sequence[int]) -> nm.Tensor:
    """Encode one question, shape (d_q,)."""
    out = encode_batch(params, [tuple(tokens)])
    return nm.reshape(out, (params.d_q,))


def encode_bank(params: AutoencoderParams, bank: QuestionBank) -> nm.Tensor:
    """Encode a whole bank, shape (Q, d_q), rows in bank order.

    Questions are grouped by length so each group runs as one batch, then
    rows are permuted back to bank order (differentiably).
    """
    if len(bank) == 0:
        raise ShapeError("encode_bank: empty bank")
    by_len: dict[int, list[int]] = {}
    for i, q in enumerate(bank):
        by_len.setdefault(len(q.tokens), []).append(i)
    parts: list[nm.Tensor] = []
    order: list[int] = []
    for length in sorted(by_len):
        idxs = by_len[length]
        parts.append(encode_batch(params, [bank[i].tokens for i in idxs]))
        order.extend(idxs)
    stacked = parts[0] if len(parts) == 1 else nm.concat(parts, axis=0)
    inv = np.empty(len(bank), dtype=np.intp)
    inv[np.asarray(order)] = np.arange(len(bank))
    return nm.gather_rows(stacked, inv)


# ---------------------------------------------------------------------------
# decoder and reconstruction
# ---------------------------------------------------------------------------

def decode(
    params: AutoencoderParams,
    q: nm.Tensor,
    length: int,
    norm_emb: np.ndarray,
    teacher_tokens: np.ndarray | None = None,
) -> nm.Tensor:
    """Reconstruct `length` embedded tokens from question vectors q (B, d_q).

    The decoder starts from hidden state q, takes the (normalized) BOS
    embedding as its first input, and by default feeds each step's own
    prediction forward.  Passing teacher_tokens (B, length) switches to
    feeding the true embedded tokens instead.  Returns (length, B, d_embed).
    """
    if length < 1:
        raise ShapeError(f"decode: length must be >= 1, got {length}")
    if q.data.ndim != 2:
        raise ShapeError(f"decode: q must be (B, d_q), got {q.shape}")
    batch = q.shape[0]
    h, c = q, nm.constant(np.zeros((batch, q.shape[1])))
    x = nm.constant(np.repeat(norm_emb[BOS][None, :], batch, axis=0))
    outs: list[nm.Tensor] = []
    for t in range(length):
        h, c = lstm_cell(params.dec, x, h, c)
        w_hat = nm.sigmoid(nm.linear(h, params.proj_w, params.proj_b))
        outs.append(w_hat)
        if t + 1 < length:
            if teacher_tokens is None:
                x = w_hat
            else:
                x = nm.constant(norm_emb[teacher_tokens[:, t]])
    return nm.stack(outs)


def reconstruction_error(x_hat, x) -> float:
    """Mean over steps of the squared L2 gap between prediction and target.

    Accepts (L, d) arrays or tensors; the scalar convenience form of the
    loss the trainer differentiates.
    """
    a = x_hat.data if isinstance(x_hat, nm.Tensor) else np.asarray(x_hat, dtype=np.float64)
    b = x.data if isinstance(x, nm.Tensor) else np.asarray(x, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"reconstruction_error: shapes {a.shape} and {b.shape} differ")
    if a.ndim != 2:
        raise ShapeError(f"reconstruction_error: expected (L, d), got {a.shape}")
    return float(np.sum((a - b) ** 2) / a.shape[0])


def _batch_targets(norm_emb: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """(B, L) token ids -> (L, B, d) normalized embedding targets."""
    return norm_emb[ids].transpose(1, 0, 2)


def batch_reconstruction_loss(
    params: AutoencoderParams,
    token_rows: Sequence[Sequence[int]],
    weights: np.ndarray,
    norm_emb: np.ndarray,
) -> nm.Tensor:
    """Weighted sum of per-question reconstruction errors, one length group.

    weights[i] multiplies question i's error; the selective objective
    passes u_i / n_S for source rows and 1 / n_T for target rows.
    """
    ids = np.asarray(token_rows, dtype=np.intp)
    length = ids.shape[1]
    q = encode_batch(params, token_rows)
    x_hat = decode(params, q, length, norm_emb)
    target = nm.constant(_batch_targets(norm_emb, ids))
    sq = nm.squared_diff(x_hat, target)  # (L, B, d)
    w = np.broadcast_to(
        (np.asarray(weights, dtype=np.float64) / length)[None, :, None], sq.shape
    )
    return nm.reduce_sum(nm.mul(sq, nm.constant(w.copy())))


def reconstruction_errors(
    params: AutoencoderParams, bank: QuestionBank, norm_emb: np.ndarray | None = None
) -> np.ndarray:
    """Per-question reconstruction error over a bank (forward only)."""
    if norm_emb is None:
        norm_emb = normalized_embedding(params)
    errors = np.empty(len(bank))
    by_len: dict[int, list[int]] = {}
    for i, q in enumerate(bank):
        by_len.setdefault(len(q.tokens), []).append(i)
    for length, idxs in by_len.items():
        ids = np.asarray([bank[i].tokens for i in idxs], dtype=np.intp)
        q = encode_batch(params, ids)
        x_hat = decode(params, q, length, norm_emb).data  # (L, B, d)
        target = _batch_targets(norm_emb, ids)
        errors[idxs] = ((x_hat - target) ** 2).sum(axis=(0, 2)) / length
    return errors


# ---------------------------------------------------------------------------
# instance selection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelectionMask:
    """Which source-bank questions count as transferable."""

    u: np.ndarray  # uint8 over source bank, bank order
    lam: float

    def __post_init__(self):
        if not set(np.unique(self.u)) <= {0, 1}:
            raise DataError("selection mask entries must be 0 or 1")

    @property
    def selected_count(self) -> int:
        return int(self.u.sum())

    def regularizer(self) -> float:
        """The objective's mask term: -(lam / n_S) * sum(u)."""
        return -self.lam / len(self.u) * float(self.u.sum())

    def to_bitstring(self) -> str:
        return "".join("1" if v else "0" for v in self.u)

    @classmethod
    def from_bitstring(cls, bits: str, lam: float) -> "SelectionMask":
        if set(bits) - {"0", "1"}:
            raise DataError("selection bit string must contain only 0/1")
        return cls(np.array([int(ch) for ch in bits], dtype=np.uint8), lam)

    @classmethod
    def all_ones(cls, n: int, lam: float) -> "SelectionMask":
        return cls(np.ones(n, dtype=np.uint8), lam)


def select_instances(errors: np.ndarray, lam: float) -> SelectionMask:
    """Keep question i iff its reconstruction error is strictly below lam."""
    if not (0.0 <= lam <= 1.0):
        raise UsageError(f"select_instances: lambda must be in [0, 1], got {lam}")
    errors = np.asarray(errors, dtype=np.float64)
    return SelectionMask((errors < lam).astype(np.uint8), lam)


# ---------------------------------------------------------------------------
# selective pretraining
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainEpoch:
    epoch: int
    source_error: float  # mean over all source questions, selected or not
    target_error: float
    selected: int
    regularizer: float  # the mask term of the objective
    objective: float  # masked source mean + target mean + regularizer
    warning: str | None = None


def _length_batches(
    entries: list[tuple[int, ...]], batch_size: int, rng: np.random.Generator
) -> list[list[int]]:
    """Shuffle entry indices into batches of same-length token rows."""
    by_len: dict[int, list[int]] = {}
    for i, tokens in enumerate(entries):
        by_len.setdefault(len(tokens), []).append(i)
    batches = []
    for idxs in by_len.values():
        idxs = [idxs[j] for j in rng.permutation(len(idxs))]
        for lo in range(0, len(idxs), batch_size):
            batches.append(idxs[lo : lo + batch_size])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def pretrain_selective(
    params: AutoencoderParams,
    source_bank: QuestionBank,
    target_bank: QuestionBank,
    lam: float = LAMBDA_DEFAULT,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
) -> tuple[AutoencoderParams, SelectionMask, list[PretrainEpoch]]:
    """Alternate reconstruction training with error-threshold selection.

    Each epoch first runs Adam minibatch steps on the mask-weighted joint
    reconstruction objective (mask fixed, starting from all-ones), then
    with weights fixed recomputes every source error and rebuilds the mask.
    """
    if len(source_bank) == 0 or len(target_bank) == 0:
        raise DataError("pretrain_selective: both banks must be non-empty")
    if not (0.0 <= lam <= 1.0):
        raise UsageError(f"pretrain_selective: lambda must be in [0, 1], got {lam}")
    n_s, n_t = len(source_bank), len(target_bank)
    mask = SelectionMask.all_ones(n_s, lam)
    trainable = params.reconstruction_params()
    opt = nm.Adam(trainable, lr=lr)
    rng = np.random.default_rng([seed, 0xAE])
    history: list[PretrainEpoch] = []

    for epoch in range(1, epochs + 1):
        norm_emb = normalized_embedding(params)
        # (a) gradient phase at fixed mask; unselected source questions
        # carry weight zero, identical to leaving them out of the batches
        entries: list[tuple[int, ...]] = []
        weights: list[float] = []
        for i, q in enumerate(source_bank):
            if mask.u[i]:
                entries.append(q.tokens)
                weights.append(1.0 / n_s)
        for q in target_bank:
            entries.append(q.tokens)
            weights.append(1.0 / n_t)
        w_arr = np.asarray(weights)
        for batch in _length_batches(entries, batch_size, rng):
            loss = batch_reconstruction_loss(
                params, [entries[i] for i in batch], w_arr[batch], norm_emb
            )
            opt.step(nm.gradients(loss, trainable))

        # (b) selection phase at fixed parameters
        norm_emb = normalized_embedding(params)
        src_err = reconstruction_errors(params, source_bank, norm_emb)
        tgt_err = reconstruction_errors(params, target_bank, norm_emb)
        mask = select_instances(src_err, lam)
        objective = (
            float((src_err * mask.u).sum() / n_s)
            + float(tgt_err.mean())
            + mask.regularizer()
        )
        history.append(PretrainEpoch(
            epoch=epoch,
            source_error=float(src_err.mean()),
            target_error=float(tgt_err.mean()),
            selected=mask.selected_count,
            regularizer=mask.regularizer(),
            objective=objective,
            warning="empty selection" if mask.selected_count == 0 else None,
        ))
    return params, mask, history
