"""Run configuration: TOML sections per module, validated on load.

A config file mirrors the package layout, one table per module:

    [run]      variant, seed, out_dir
    [paths]    dataset and checkpoint locations
    [corpus]   synthetic-generator knobs and text caps
    [autoenc]  pretraining dims, lambda (scalar or sweep array), schedule
    [ktmodel]  tracer dims
    [adapt]    gamma (scalar or sweep array), kernel, schedule
    [eval]     threshold, fold count

Unknown tables or keys are rejected outright rather than ignored, so a
typo cannot silently fall back to a default.  `lam` and `gamma` accept
either one number or an array; the array form requests a sensitivity sweep
and is only consumed by the report stage, so `single()` guards the places
where exactly one value must be in force.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Mapping

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .errors import UsageError

VARIANTS = ("akt", "akt-tx", "akt-tr", "akt-tx-tr", "dkt")

ADAPT_WIDTHS = (64, 128, 256, 512)

LAMBDA_SWEEP = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class VariantFlags:
    """What a named ablation keeps: text encoder, slip/guess heads,
    adaptation layer, and the transfer stages (adapt + finetune)."""

    text: bool
    slip_guess: bool
    adapt_layer: bool
    transfer: bool


VARIANT_FLAGS: dict[str, VariantFlags] = {
    "akt": VariantFlags(text=True, slip_guess=True, adapt_layer=True, transfer=True),
    "akt-tx": VariantFlags(text=False, slip_guess=True, adapt_layer=True, transfer=True),
    "akt-tr": VariantFlags(text=True, slip_guess=True, adapt_layer=True, transfer=False),
    "akt-tx-tr": VariantFlags(text=False, slip_guess=True, adapt_layer=True, transfer=False),
    "dkt": VariantFlags(text=False, slip_guess=False, adapt_layer=False, transfer=False),
}


def _sweep(name: str, value, lo: float, hi: float) -> tuple[float, ...]:
    """Normalize a scalar-or-array config value to a tuple of floats."""
    items = value if isinstance(value, (list, tuple)) else [value]
    if not items:
        raise UsageError(f"{name}: sweep array must not be empty")
    out = []
    for v in items:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise UsageError(f"{name}: expected a number, got {v!r}")
        if not (lo <= float(v) <= hi):
            raise UsageError(f"{name}: {v} outside [{lo}, {hi}]")
        out.append(float(v))
    return tuple(out)


def single(name: str, values: tuple[float, ...]) -> float:
    """The one value of a non-sweep setting; sweeping here is a usage error."""
    if len(values) != 1:
        raise UsageError(
            f"{name} holds a sweep of {len(values)} values; this stage needs exactly one"
        )
    return values[0]


def _require_int(section: str, key: str, value, lo: int, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise UsageError(f"[{section}] {key}: expected an integer, got {value!r}")
    if value < lo or (hi is not None and value > hi):
        bound = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
        raise UsageError(f"[{section}] {key}: must be {bound}, got {value}")
    return value


def _require_float(section: str, key: str, value, lo: float, hi: float | None = None,
                   lo_open: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise UsageError(f"[{section}] {key}: expected a number, got {value!r}")
    v = float(value)
    if (v <= lo if lo_open else v < lo) or (hi is not None and v > hi):
        raise UsageError(f"[{section}] {key}: {value} out of range")
    return v


@dataclass(frozen=True)
class RunSection:
    variant: str = "akt"
    seed: int = 0
    out_dir: str = "runs"


@dataclass(frozen=True)
class PathsSection:
    source_questions: str = ""
    source_interactions: str = ""
    target_questions: str = ""
    target_interactions: str = ""
    embeddings: str = ""
    checkpoint: str = ""


@dataclass(frozen=True)
class CorpusSection:
    concepts: int = 5
    questions: int = 50
    students: int = 200
    seq_len: int = 50
    guess: float = 0.25
    slip: float = 0.0
    shift: float = 0.0
    target_students: int = 0  # 0 = same as students
    max_text_len: int = 100
    labeled_fraction: float = 0.2


@dataclass(frozen=True)
class AutoencSection:
    d_embed: int = 100
    enc_hidden: int = 50
    lam: tuple[float, ...] = (0.5,)
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64


@dataclass(frozen=True)
class KTModelSection:
    d_h: int = 100
    d_a: int = 256


@dataclass(frozen=True)
class AdaptSection:
    gamma: tuple[float, ...] = (0.5,)
    kernel: str = "rbf"
    bandwidth: float = 0.0  # 0 = median heuristic
    mmd_cap: int = 1024
    mmd_steps: int = 10
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 64
    finetune_epochs: int = 10
    unfreeze: bool = False


@dataclass(frozen=True)
class EvalSection:
    threshold: float = 0.5
    folds: int = 5


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsSection = field(default_factory=PathsSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    autoenc: AutoencSection = field(default_factory=AutoencSection)
    ktmodel: KTModelSection = field(default_factory=KTModelSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @property
    def flags(self) -> VariantFlags:
        return VARIANT_FLAGS[self.run.variant]

    @property
    def d_q(self) -> int:
        """Question-vector width: twice the encoder hidden size in both
        modes, so ablations differ only in where the vectors come from."""
        return 2 * self.autoenc.enc_hidden

    def to_dict(self) -> dict:
        def section(obj) -> dict:
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
            return out

        return {f.name: section(getattr(self, f.name)) for f in fields(self)}

    def fingerprint(self) -> str:
        doc = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()


_SECTION_TYPES = {
    "run": RunSection,
    "paths": PathsSection,
    "corpus": CorpusSection,
    "autoenc": AutoencSection,
    "ktmodel": KTModelSection,
    "adapt": AdaptSection,
    "eval": EvalSection,
}


def _build_section(name: str, cls, raw: Mapping) -> object:
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise UsageError(f"[{name}]: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in ("lam", "gamma"):
            kwargs[key] = _sweep(f"[{name}] {key}", value, 0.0, 1.0)
        elif isinstance(known[key].default, bool):
            if not isinstance(value, bool):
                raise UsageError(f"[{name}] {key}: expected true/false, got {value!r}")
            kwargs[key] = value
        elif isinstance(known[key].default, int):
            kwargs[key] = _require_int(name, key, value, 0)
        elif isinstance(known[key].default, float):
            kwargs[key] = _require_float(name, key, value, 0.0)
        elif isinstance(known[key].default, str):
            if not isinstance(value, str):
                raise UsageError(f"[{name}] {key}: expected a string, got {value!r}")
            kwargs[key] = value
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.run.variant not in VARIANTS:
        raise UsageError(
            f"[run] variant: {cfg.run.variant!r} is not one of {list(VARIANTS)}"
        )
    c = cfg.corpus
    _require_int("corpus", "concepts", c.concepts, 1)
    _require_int("corpus", "questions", c.questions, 1)
    _require_int("corpus", "students", c.students, 1)
    _require_int("corpus", "seq_len", c.seq_len, 2)
    _require_float("corpus", "guess", c.guess, 0.0, 1.0)
    _require_float("corpus", "slip", c.slip, 0.0, 1.0)
    if c.guess + c.slip > 1.0:
        raise UsageError("[corpus]: guess + slip must not exceed 1")
    _require_float("corpus", "labeled_fraction", c.labeled_fraction, 0.0, 1.0, lo_open=True)
    a = cfg.autoenc
    _require_int("autoenc", "d_embed", a.d_embed, 1)
    _require_int("autoenc", "enc_hidden", a.enc_hidden, 1)
    _require_int("autoenc", "epochs", a.epochs, 0)
    _require_int("autoenc", "batch_size", a.batch_size, 1)
    _require_float("autoenc", "lr", a.lr, 0.0, lo_open=True)
    k = cfg.ktmodel
    _require_int("ktmodel", "d_h", k.d_h, 1)
    if k.d_a not in ADAPT_WIDTHS:
        raise UsageError(
            f"[ktmodel] d_a: {k.d_a} is not one of the supported widths {list(ADAPT_WIDTHS)}"
        )
    d = cfg.adapt
    if d.kernel not in ("rbf", "linear"):
        raise UsageError(f"[adapt] kernel: {d.kernel!r} is not 'rbf' or 'linear'")
    _require_float("adapt", "bandwidth", d.bandwidth, 0.0)
    _require_int("adapt", "mmd_cap", d.mmd_cap, 2)
    _require_int("adapt", "mmd_steps", d.mmd_steps, 1)
    _require_int("adapt", "epochs", d.epochs, 0)
    _require_int("adapt", "finetune_epochs", d.finetune_epochs, 0)
    _require_int("adapt", "batch_size", d.batch_size, 1)
    _require_float("adapt", "lr", d.lr, 0.0, lo_open=True)
    e = cfg.eval
    _require_float("eval", "threshold", e.threshold, 0.0, 1.0)
    _require_int("eval", "folds", e.folds, 2)
    return cfg


def from_dict(doc: Mapping) -> RunConfig:
    unknown = set(doc) - set(_SECTION_TYPES)
    if unknown:
        raise UsageError(f"unknown config table(s) {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        raw = doc.get(name, {})
        if not isinstance(raw, Mapping):
            raise UsageError(f"[{name}] must be a table")
        sections[name] = _build_section(name, cls, raw)
    return _validate(RunConfig(**sections))


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"{path}: invalid TOML: {e}") from None
    return from_dict(doc)
