"""Binary persistence for models, autoencoders, and selection masks.

A checkpoint file is a fixed header, a JSON metadata document, and a run
of named float64 parameter blobs:

    bytes 0..3    magic "AKTC"
    bytes 4..5    format version, uint16 little-endian
    bytes 6..9    metadata length in bytes, uint32 little-endian
    then          metadata, UTF-8 JSON
    then          one raw payload per entry of metadata["blobs"], in order

Every blob is little-endian 64-bit floats in row-major order; its name and
shape live in the metadata, so the payload section is parseable without
guessing.  Metadata also records the variant flags, the dimensions, the qid
orderings that give input rows and output columns their meaning (with
digests for quick comparison), the token table when the model encodes text,
and the instance-selection mask when one was produced.

Loading refuses files whose magic or version does not match; a truncated or
oversized payload section is a data error, not a best-effort parse.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import ktmodel as kt
from . import numerics as nm
from .autoenc import AutoencoderParams, LSTMWeights, SelectionMask
from .corpus import Vocab
from .errors import DataError, UsageError

MAGIC = b"AKTC"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHI")


def order_digest(items: Iterable[str]) -> str:
    """SHA-256 over newline-joined items; order-sensitive by construction."""
    h = hashlib.sha256()
    for item in items:
        h.update(item.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass
class Checkpoint:
    """Parsed checkpoint: metadata dict plus name -> float64 array.

    ``blobs`` preserves file order.  The constructor functions below build
    these from live objects; ``model_from_checkpoint`` and friends go the
    other way.
    """

    metadata: dict
    blobs: dict[str, np.ndarray]
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        meta = dict(self.metadata)
        meta["blobs"] = [[name, list(arr.shape)] for name, arr in self.blobs.items()]
        doc = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [_HEADER.pack(MAGIC, self.version, len(doc)), doc]
        for arr in self.blobs.values():
            parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _HEADER.size:
            raise DataError("checkpoint too short to hold a header")
        magic, version, meta_len = _HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise DataError(f"not a checkpoint: magic {magic!r} != {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise DataError(
                f"checkpoint format version {version} is not supported "
                f"(this build reads version {FORMAT_VERSION})"
            )
        offset = _HEADER.size
        if len(raw) < offset + meta_len:
            raise DataError("checkpoint truncated inside the metadata block")
        try:
            meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataError(f"checkpoint metadata is not valid JSON: {e}") from None
        offset += meta_len
        blobs: dict[str, np.ndarray] = {}
        for name, shape in meta.pop("blobs", []):
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = 8 * count
            if len(raw) < offset + nbytes:
                raise DataError(f"checkpoint truncated inside blob {name!r}")
            flat = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
            blobs[name] = flat.astype(np.float64).reshape(tuple(shape))
            offset += nbytes
        if offset != len(raw):
            raise DataError(f"checkpoint has {len(raw) - offset} unexpected trailing bytes")
        return cls(meta, blobs, version)


def save(path: str, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(ckpt.to_bytes())


def load(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None
    return Checkpoint.from_bytes(raw)


# ---------------------------------------------------------------------------
# blob naming
# ---------------------------------------------------------------------------

def _ae_blobs(ae: AutoencoderParams) -> dict[str, np.ndarray]:
    out = {"ae.embedding": ae.embedding.data}
    for tag, cell in (("enc_fwd", ae.enc_fwd), ("enc_bwd", ae.enc_bwd), ("dec", ae.dec)):
        out[f"ae.{tag}.w_x"] = cell.w_x.data
        out[f"ae.{tag}.w_h"] = cell.w_h.data
        out[f"ae.{tag}.b"] = cell.b.data
    out["ae.proj.w"] = ae.proj_w.data
    out["ae.proj.b"] = ae.proj_b.data
    return out


def _kt_blobs(params: kt.KTParams) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for gate in kt.GATES:
        out[f"kt.w_pos.{gate}"] = params.w_pos[gate].data
        out[f"kt.w_neg.{gate}"] = params.w_neg[gate].data
        out[f"kt.w_h.{gate}"] = params.w_rec[gate].data
        out[f"kt.b.{gate}"] = params.bias[gate].data
    if params.slip_w is not None:
        out["kt.slip.w"] = params.slip_w.data
        out["kt.slip.b"] = params.slip_b.data
        out["kt.guess.w"] = params.guess_w.data
        out["kt.guess.b"] = params.guess_b.data
    if params.adapt_w is not None:
        out["kt.adapt.w"] = params.adapt_w.data
        out["kt.adapt.b"] = params.adapt_b.data
    out["kt.out.w"] = params.out_w.data
    out["kt.out.b"] = params.out_b.data
    if params.id_embed is not None:
        out["kt.id_embed"] = params.id_embed.data
    return out


def _param(blobs: dict[str, np.ndarray], name: str) -> nm.Tensor:
    if name not in blobs:
        raise DataError(f"checkpoint is missing blob {name!r}")
    return nm.parameter(blobs[name].copy(), name=name.split(".", 1)[1])


def _ae_from_blobs(blobs: dict[str, np.ndarray]) -> AutoencoderParams:
    def cell(tag: str) -> LSTMWeights:
        return LSTMWeights(
            w_x=_param(blobs, f"ae.{tag}.w_x"),
            w_h=_param(blobs, f"ae.{tag}.w_h"),
            b=_param(blobs, f"ae.{tag}.b"),
        )

    return AutoencoderParams(
        embedding=_param(blobs, "ae.embedding"),
        enc_fwd=cell("enc_fwd"),
        enc_bwd=cell("enc_bwd"),
        dec=cell("dec"),
        proj_w=_param(blobs, "ae.proj.w"),
        proj_b=_param(blobs, "ae.proj.b"),
    )


def _kt_from_blobs(blobs: dict[str, np.ndarray]) -> kt.KTParams:
    kw: dict = {}
    if "kt.slip.w" in blobs:
        kw.update(
            slip_w=_param(blobs, "kt.slip.w"),
            slip_b=_param(blobs, "kt.slip.b"),
            guess_w=_param(blobs, "kt.guess.w"),
            guess_b=_param(blobs, "kt.guess.b"),
        )
    if "kt.adapt.w" in blobs:
        kw.update(adapt_w=_param(blobs, "kt.adapt.w"), adapt_b=_param(blobs, "kt.adapt.b"))
    if "kt.id_embed" in blobs:
        kw.update(id_embed=_param(blobs, "kt.id_embed"))
    return kt.KTParams(
        w_pos={g: _param(blobs, f"kt.w_pos.{g}") for g in kt.GATES},
        w_neg={g: _param(blobs, f"kt.w_neg.{g}") for g in kt.GATES},
        w_rec={g: _param(blobs, f"kt.w_h.{g}") for g in kt.GATES},
        bias={g: _param(blobs, f"kt.b.{g}") for g in kt.GATES},
        out_w=_param(blobs, "kt.out.w"),
        out_b=_param(blobs, "kt.out.b"),
        **kw,
    )


# ---------------------------------------------------------------------------
# metadata assembly
# ---------------------------------------------------------------------------

def _selection_meta(mask: SelectionMask | None, qids: tuple[str, ...]) -> dict | None:
    if mask is None:
        return None
    if qids and len(qids) != len(mask.u):
        raise UsageError(
            f"selection mask covers {len(mask.u)} questions but the bank "
            f"ordering lists {len(qids)}"
        )
    return {"bits": mask.to_bitstring(), "lam": mask.lam, "qids": list(qids)}


def _vocab_meta(vocab: Vocab | None) -> tuple[list[str] | None, str | None]:
    if vocab is None:
        return None, None
    tokens = list(vocab.id_to_token)
    return tokens, order_digest(tokens)


def checkpoint_from_model(
    model: kt.Model,
    vocab: Vocab | None = None,
    mask: SelectionMask | None = None,
    mask_qids: tuple[str, ...] = (),
) -> Checkpoint:
    """Snapshot a full model; text mode requires the vocab that indexes
    the embedding rows."""
    if model.text_mode and vocab is None:
        raise UsageError("a text-mode checkpoint needs the vocab")
    tokens, vocab_hash = _vocab_meta(vocab)
    meta = {
        "kind": "model",
        "mode": "text" if model.text_mode else "id",
        "dims": {
            "d_q": model.kt.d_q,
            "d_h": model.kt.d_h,
            "d_a": model.kt.d_a,
            "n_out": model.kt.n_out,
        },
        "flags": {
            "slip_guess": model.kt.has_slip_guess,
            "adapt_layer": model.kt.has_adapt,
        },
        "in_qids": list(model.in_qids),
        "out_qids": list(model.out_qids),
        "in_digest": order_digest(model.in_qids),
        "out_digest": order_digest(model.out_qids),
        "vocab": tokens,
        "vocab_hash": vocab_hash,
        "selection": _selection_meta(mask, mask_qids),
    }
    blobs = dict(_kt_blobs(model.kt))
    if model.text_mode:
        blobs.update(_ae_blobs(model.ae))
    return Checkpoint(meta, blobs)


def checkpoint_from_autoencoder(
    ae: AutoencoderParams,
    vocab: Vocab,
    mask: SelectionMask | None = None,
    mask_qids: tuple[str, ...] = (),
) -> Checkpoint:
    """Snapshot the pretraining stage: encoder/decoder weights, the token
    table, and the selection decision when one has been made."""
    tokens, vocab_hash = _vocab_meta(vocab)
    meta = {
        "kind": "autoencoder",
        "mode": "text",
        "dims": {"d_q": ae.d_q, "d_embed": ae.d_embed},
        "vocab": tokens,
        "vocab_hash": vocab_hash,
        "selection": _selection_meta(mask, mask_qids),
    }
    return Checkpoint(meta, _ae_blobs(ae))


def model_from_checkpoint(ckpt: Checkpoint) -> kt.Model:
    if ckpt.metadata.get("kind") != "model":
        raise DataError("checkpoint does not hold a full model")
    text_mode = ckpt.metadata.get("mode") == "text"
    ae = _ae_from_blobs(ckpt.blobs) if text_mode else None
    return kt.Model(
        kt=_kt_from_blobs(ckpt.blobs),
        ae=ae,
        text_mode=text_mode,
        in_qids=tuple(ckpt.metadata.get("in_qids", ())),
        out_qids=tuple(ckpt.metadata.get("out_qids", ())),
    )


def autoencoder_from_checkpoint(ckpt: Checkpoint) -> AutoencoderParams:
    if not any(name.startswith("ae.") for name in ckpt.blobs):
        raise DataError("checkpoint holds no autoencoder weights")
    return _ae_from_blobs(ckpt.blobs)


def vocab_from_checkpoint(ckpt: Checkpoint) -> Vocab | None:
    tokens = ckpt.metadata.get("vocab")
    if tokens is None:
        return None
    id_to_token = tuple(tokens)
    return Vocab({t: i for i, t in enumerate(id_to_token)}, id_to_token)


def mask_from_checkpoint(ckpt: Checkpoint) -> tuple[SelectionMask, tuple[str, ...]] | None:
    sel = ckpt.metadata.get("selection")
    if sel is None:
        return None
    mask = SelectionMask.from_bitstring(sel["bits"], sel["lam"])
    return mask, tuple(sel.get("qids", ()))
