"""Datasets: JSONL ingestion, vocabulary, synthetic domain pairs, fold splits.

File formats owned here:
  question bank   one JSON object per line: {"qid": str, "concept": str, "text": str}
  interactions    one JSON object per line: {"student": str, "steps": [[qid, r], ...]}
  embeddings      optional; header "<count> <dim>", then "<token> <floats...>" rows
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, UsageError

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

DEFAULT_MAX_TEXT_LEN = 100
DEFAULT_MAX_SEQ_LEN = 200


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Vocab:
    """Token table with fixed reserved ids 0..3 (pad, unk, bos, eos)."""

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def from_token_streams(cls, streams: Iterable[Iterable[str]], min_count: int = 1) -> "Vocab":
        """Count tokens across streams; keep those seen >= min_count times.

        Kept tokens get ids in first-occurrence order after the reserved
        block, which makes the table reproducible from the same inputs.
        """
        counts: dict[str, int] = {}
        order: list[str] = []
        for stream in streams:
            for tok in stream:
                if tok not in counts:
                    counts[tok] = 0
                    order.append(tok)
                counts[tok] += 1
        keep = [t for t in order if counts[t] >= min_count and t not in RESERVED_TOKENS]
        id_to_token = RESERVED_TOKENS + tuple(keep)
        return cls({t: i for i, t in enumerate(id_to_token)}, id_to_token)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]


@dataclass(frozen=True)
class QuestionText:
    qid: str
    concept_id: str
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class QuestionBank:
    questions: tuple[QuestionText, ...]
    qid_to_index: dict[str, int] = field(compare=False)

    @classmethod
    def from_questions(cls, questions: Sequence[QuestionText]) -> "QuestionBank":
        index = {}
        for i, q in enumerate(questions):
            if q.qid in index:
                raise DataError(f"duplicate qid {q.qid!r}")
            index[q.qid] = i
        return cls(tuple(questions), index)

    def __len__(self) -> int:
        return len(self.questions)

    def __iter__(self) -> Iterator[QuestionText]:
        return iter(self.questions)

    def __getitem__(self, i: int) -> QuestionText:
        return self.questions[i]

    def index(self, qid: str) -> int:
        try:
            return self.qid_to_index[qid]
        except KeyError:
            raise DataError(f"unknown qid {qid!r}") from None

    @property
    def qids(self) -> tuple[str, ...]:
        return tuple(q.qid for q in self.questions)


@dataclass(frozen=True)
class InteractionSequence:
    student: str
    steps: tuple[tuple[str, int], ...]  # (qid, response)

    def __len__(self) -> int:
        return len(self.steps)


ROLE_SOURCE = "source"
ROLE_TARGET_LABELED = "target-labeled"
ROLE_TARGET_UNLABELED = "target-unlabeled"
_ROLES = (ROLE_SOURCE, ROLE_TARGET_LABELED, ROLE_TARGET_UNLABELED)


@dataclass(frozen=True)
class DomainDataset:
    """One domain's question bank plus its student interaction sequences.

    Unlabeled target sequences still carry responses internally; the
    adaptation-phase trainers feed them to the recurrence only and never
    to any loss, and evaluation is where they finally count.
    """

    bank: QuestionBank
    sequences: tuple[InteractionSequence, ...]
    role: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise UsageError(f"unknown dataset role {self.role!r}")

    def students(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.sequences:
            seen.setdefault(s.student, None)
        return list(seen)

    def with_role(self, role: str) -> "DomainDataset":
        return replace(self, role=role)


# ---------------------------------------------------------------------------
# JSONL ingestion
# ---------------------------------------------------------------------------

def _read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    with p.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{p}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{p}:{lineno}: expected an object")
            yield lineno, obj


def iter_question_file(path: str | Path) -> Iterator[tuple[str, str, list[str]]]:
    """Yield (qid, concept, tokens) per line, validating the schema."""
    seen: set[str] = set()
    for lineno, obj in _read_jsonl(path):
        missing = {"qid", "concept", "text"} - obj.keys()
        if missing:
            raise DataError(f"{path}:{lineno}: missing field(s) {sorted(missing)}")
        qid, concept, text = str(obj["qid"]), str(obj["concept"]), str(obj["text"])
        if qid in seen:
            raise DataError(f"{path}:{lineno}: duplicate qid {qid!r}")
        seen.add(qid)
        tokens = tokenize(text)
        if not tokens:
            raise DataError(f"{path}:{lineno}: empty question text for qid {qid!r}")
        yield qid, concept, tokens


def build_vocab(paths: Sequence[str | Path], min_count: int = 1) -> Vocab:
    """Union vocabulary over question files from any number of domains.

    One shared token space is required because a single text encoder serves
    both source and target banks.
    """
    if not paths:
        raise UsageError("build_vocab: need at least one question file")
    streams = (tokens for path in paths for _, _, tokens in iter_question_file(path))
    return Vocab.from_token_streams(streams, min_count=min_count)


def load_question_bank(
    path: str | Path,
    vocab: Vocab,
    max_len: int = DEFAULT_MAX_TEXT_LEN,
) -> QuestionBank:
    questions = [
        QuestionText(qid, concept, tuple(vocab.encode(tokens[:max_len])))
        for qid, concept, tokens in iter_question_file(path)
    ]
    return QuestionBank.from_questions(questions)


def load_interactions(
    path: str | Path,
    bank: QuestionBank,
    max_len: int = DEFAULT_MAX_SEQ_LEN,
) -> list[InteractionSequence]:
    """Load interaction sequences, chunking long ones and dropping stubs.

    A sequence longer than max_len becomes consecutive chunks of at most
    max_len steps under the same student id.  Anything shorter than 2 steps
    (including a trailing chunk of 1) is dropped; drops are counted in one
    warning rather than raised, since a stub carries no next-step label.
    """
    out: list[InteractionSequence] = []
    dropped = 0
    for lineno, obj in _read_jsonl(path):
        missing = {"student", "steps"} - obj.keys()
        if missing:
            raise DataError(f"{path}:{lineno}: missing field(s) {sorted(missing)}")
        student = str(obj["student"])
        raw = obj["steps"]
        if not isinstance(raw, list):
            raise DataError(f"{path}:{lineno}: steps must be a list")
        steps: list[tuple[str, int]] = []
        for item in raw:
            if not (isinstance(item, list) and len(item) == 2):
                raise DataError(f"{path}:{lineno}: each step must be [qid, r]")
            qid, r = str(item[0]), item[1]
            if qid not in bank.qid_to_index:
                raise DataError(f"{path}:{lineno}: unknown qid {qid!r}")
            if r not in (0, 1):
                raise DataError(f"{path}:{lineno}: response must be 0 or 1, got {r!r}")
            steps.append((qid, int(r)))
        for lo in range(0, len(steps), max_len):
            chunk = steps[lo : lo + max_len]
            if len(chunk) < 2:
                dropped += 1
            else:
                out.append(InteractionSequence(student, tuple(chunk)))
    if dropped:
        log.warning("%s: dropped %d sequence(s)/chunk(s) shorter than 2 steps", path, dropped)
    return out


def write_question_bank(path: str | Path, bank: QuestionBank, vocab: Vocab) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for q in bank:
            text = " ".join(vocab.decode(q.tokens))
            fh.write(json.dumps(
                {"qid": q.qid, "concept": q.concept_id, "text": text},
                sort_keys=True,
            ) + "\n")


def write_interactions(path: str | Path, sequences: Iterable[InteractionSequence]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(json.dumps(
                {"student": seq.student, "steps": [[q, r] for q, r in seq.steps]},
                sort_keys=True,
            ) + "\n")


def read_embedding_file(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a word-vector file: "<count> <dim>" header, then token rows."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    with p.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataError(f"{p}:1: header must be '<count> <dim>'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise DataError(f"{p}:1: header must be '<count> <dim>'") from None
        vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{p}:{lineno}: expected {dim} floats after the token")
            try:
                vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise DataError(f"{p}:{lineno}: non-numeric vector entry") from None
    if len(vectors) != count:
        log.warning("%s: header claims %d vectors, file has %d", p, count, len(vectors))
    return dim, vectors


# ---------------------------------------------------------------------------
# synthetic domain pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the simulated two-domain student population.

    Responses follow a guess/slip item-response curve,
    P(r=1) = c + (1 - c - slip) * sigmoid(theta - beta), with per-(student,
    concept) ability theta and per-question difficulty beta.  The target
    domain gets a fresh question bank whose difficulties are offset by
    +/- shift per concept, so the two domains share a label law but not a
    question distribution.
    """

    concepts: int = 5
    questions: int = 50
    students: int = 200
    seq_len: int = 50
    guess: float = 0.25
    slip: float = 0.0
    shift: float = 0.0
    seed: int = 0
    target_students: int | None = None  # defaults to `students`

    def __post_init__(self):
        if min(self.concepts, self.questions, self.students, self.seq_len) < 1:
            raise UsageError("synthetic spec: all counts must be >= 1")
        if not (0.0 <= self.guess <= 1.0):
            raise UsageError(f"synthetic spec: guess must be in [0, 1], got {self.guess}")
        if not (0.0 <= self.slip <= 1.0):
            raise UsageError(f"synthetic spec: slip must be in [0, 1], got {self.slip}")
        if self.guess + self.slip > 1.0:
            raise UsageError("synthetic spec: guess + slip must not exceed 1")
        if self.shift < 0.0:
            raise UsageError(f"synthetic spec: shift must be >= 0, got {self.shift}")


@dataclass(frozen=True)
class SyntheticLatents:
    """Ground truth behind one generated domain, kept for analysis/tests."""

    theta: np.ndarray  # (students, concepts) abilities
    beta: np.ndarray  # (questions,) difficulties, shift included
    beta_unshifted: np.ndarray  # (questions,) difficulties before the shift
    concept_of: np.ndarray  # (questions,) concept index per question
    question_seq: np.ndarray  # (students, seq_len) question indices
    student_ids: tuple[str, ...]


def irt_probability(theta, beta, guess: float, slip: float):
    """P(correct) under the guess/slip response curve; broadcasts.

    The sigmoid is computed through tanh, which stays finite for any
    ability/difficulty gap.
    """
    z = np.asarray(theta, dtype=np.float64) - np.asarray(beta, dtype=np.float64)
    return guess + (1.0 - guess - slip) * 0.5 * (1.0 + np.tanh(0.5 * z))


_FILLER = (
    "solve", "find", "compute", "simplify", "the", "value", "of", "this",
    "expression", "given", "equation", "using", "steps", "answer", "result",
)
_LEVELS = 5
_LEVEL_EDGES = (-1.2, -0.4, 0.4, 1.2)  # buckets over a standard-normal difficulty


def _difficulty_bucket(beta: float) -> int:
    return int(np.searchsorted(_LEVEL_EDGES, beta))


def _question_text(concept: int, beta: float, rng: np.random.Generator) -> str:
    filler = rng.choice(len(_FILLER), size=rng.integers(3, 7), replace=True)
    words = [f"topic{concept}", f"level{_difficulty_bucket(beta)}"]
    words += [_FILLER[i] for i in filler]
    return " ".join(words)


def _build_domain(
    prefix: str,
    spec: SyntheticSpec,
    n_students: int,
    beta_unshifted: np.ndarray,
    concept_shift: np.ndarray,
    rng: np.random.Generator,
) -> tuple[list[dict], list[InteractionSequence], SyntheticLatents]:
    q_count = spec.questions
    concept_of = np.arange(q_count) % spec.concepts
    beta = beta_unshifted + concept_shift[concept_of]
    raw_questions = [
        {
            "qid": f"{prefix}q{i}",
            "concept": f"c{concept_of[i]}",
            "text": _question_text(concept_of[i], beta[i], rng),
        }
        for i in range(q_count)
    ]
    theta = rng.standard_normal((n_students, spec.concepts))
    replace_draws = spec.seq_len > q_count
    question_seq = np.stack([
        rng.choice(q_count, size=spec.seq_len, replace=replace_draws)
        for _ in range(n_students)
    ])
    student_ids = tuple(f"{prefix}s{m}" for m in range(n_students))
    sequences = []
    for m in range(n_students):
        qs = question_seq[m]
        p = irt_probability(theta[m, concept_of[qs]], beta[qs], spec.guess, spec.slip)
        r = (rng.random(spec.seq_len) < p).astype(int)
        sequences.append(InteractionSequence(
            student_ids[m],
            tuple((raw_questions[q]["qid"], int(r[t])) for t, q in enumerate(qs)),
        ))
    latents = SyntheticLatents(
        theta=theta,
        beta=beta,
        beta_unshifted=beta_unshifted,
        concept_of=concept_of,
        question_seq=question_seq,
        student_ids=student_ids,
    )
    return raw_questions, sequences, latents


def generate_synthetic_detailed(
    spec: SyntheticSpec,
) -> tuple[DomainDataset, DomainDataset, Vocab, SyntheticLatents, SyntheticLatents]:
    """Generate both domains and return the latent ground truth too."""
    rng_src = np.random.default_rng([spec.seed, 0])
    rng_tgt = np.random.default_rng([spec.seed, 1])

    src_beta = rng_src.standard_normal(spec.questions)
    no_shift = np.zeros(spec.concepts)
    src_raw, src_seqs, src_lat = _build_domain(
        "s", spec, spec.students, src_beta, no_shift, rng_src
    )

    tgt_beta = rng_tgt.standard_normal(spec.questions)
    signs = rng_tgt.choice([-1.0, 1.0], size=spec.concepts)
    tgt_raw, tgt_seqs, tgt_lat = _build_domain(
        "t", spec, spec.target_students or spec.students,
        tgt_beta, signs * spec.shift, rng_tgt,
    )

    vocab = Vocab.from_token_streams(
        [tokenize(q["text"]) for q in src_raw + tgt_raw]
    )

    def to_bank(raw: list[dict]) -> QuestionBank:
        return QuestionBank.from_questions([
            QuestionText(q["qid"], q["concept"], tuple(vocab.encode(tokenize(q["text"]))))
            for q in raw
        ])

    source = DomainDataset(to_bank(src_raw), tuple(src_seqs), ROLE_SOURCE)
    target = DomainDataset(to_bank(tgt_raw), tuple(tgt_seqs), ROLE_TARGET_UNLABELED)
    return source, target, vocab, src_lat, tgt_lat


def generate_synthetic(spec: SyntheticSpec) -> tuple[DomainDataset, DomainDataset]:
    source, target, _, _, _ = generate_synthetic_detailed(spec)
    return source, target


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_labeled(
    dataset: DomainDataset, fraction: float, seed: int
) -> tuple[DomainDataset, DomainDataset]:
    """Split a target domain by student into (labeled, unlabeled) parts.

    The labeled part models the scarce I_Tl a new domain actually has; it
    gets ceil(fraction * students) students so a tiny fraction still yields
    at least one.
    """
    if not (0.0 < fraction < 1.0):
        raise UsageError(f"split_labeled: fraction must be in (0, 1), got {fraction}")
    students = dataset.students()
    if len(students) < 2:
        raise DataError("split_labeled: need at least 2 students")
    order = np.random.default_rng(seed).permutation(len(students))
    n_lab = max(1, int(np.ceil(fraction * len(students))))
    labeled_ids = {students[i] for i in order[:n_lab]}
    lab = tuple(s for s in dataset.sequences if s.student in labeled_ids)
    unlab = tuple(s for s in dataset.sequences if s.student not in labeled_ids)
    return (
        DomainDataset(dataset.bank, lab, ROLE_TARGET_LABELED),
        DomainDataset(dataset.bank, unlab, ROLE_TARGET_UNLABELED),
    )


def kfold_split(
    dataset: DomainDataset, k: int, seed: int
) -> list[tuple[DomainDataset, DomainDataset]]:
    """Student-level k-fold partition: no student straddles train and test."""
    if k < 2:
        raise UsageError(f"kfold_split: k must be >= 2, got {k}")
    students = dataset.students()
    if len(students) < k:
        raise DataError(f"kfold_split: {len(students)} students < k={k}")
    order = np.random.default_rng(seed).permutation(len(students))
    folds: list[set[str]] = [set() for _ in range(k)]
    for pos, idx in enumerate(order):
        folds[pos % k].add(students[idx])
    pairs = []
    for held_out in folds:
        train = tuple(s for s in dataset.sequences if s.student not in held_out)
        test = tuple(s for s in dataset.sequences if s.student in held_out)
        pairs.append((
            replace(dataset, sequences=train),
            replace(dataset, sequences=test),
        ))
    return pairs
