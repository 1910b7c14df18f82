"""Interaction CSV ingestion, vocabularies, windowing, splits and batching.

Input schema (UTF-8)::

    student_id,question_id,concept_id,response[,timestamp]

``response`` is the literal ``0`` or ``1``.  With a timestamp column rows are
stably sorted per student by it; otherwise file order is kept.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import make_rng

HEADER = ["student_id", "question_id", "concept_id", "response"]
SPLIT_HEADER = ["student_id", "window", "question_id", "concept_id", "response"]


class DataFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class InteractionSequence:
    student_id: str
    questions: np.ndarray
    concepts: np.ndarray
    responses: np.ndarray
    window: int = 0

    def __post_init__(self):
        self.questions = np.asarray(self.questions, dtype=np.int64)
        self.concepts = np.asarray(self.concepts, dtype=np.int64)
        self.responses = np.asarray(self.responses, dtype=np.int64)
        if not (len(self.questions) == len(self.concepts) == len(self.responses)):
            raise ValueError("question, concept and response arrays differ in length")

    def __len__(self):
        return len(self.responses)


@dataclass
class Vocabulary:
    """Raw id -> dense id maps, assigned in order of first appearance."""

    questions: dict = field(default_factory=dict)
    concepts: dict = field(default_factory=dict)

    def question(self, raw: str) -> int:
        return self.questions.setdefault(raw, len(self.questions))

    def concept(self, raw: str) -> int:
        return self.concepts.setdefault(raw, len(self.concepts))

    @property
    def n_questions(self) -> int:
        return len(self.questions)

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "raw_id", "dense_id"])
            for kind, table in (("question", self.questions), ("concept", self.concepts)):
                for raw, dense in table.items():
                    w.writerow([kind, raw, dense])

    @classmethod
    def read(cls, path) -> "Vocabulary":
        vocab = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            rows = csv.reader(fh)
            if next(rows, None) != ["kind", "raw_id", "dense_id"]:
                raise DataFormatError(f"{path}: bad vocabulary header", 1)
            for lineno, row in enumerate(rows, start=2):
                kind, raw, dense = row
                table = {"question": vocab.questions, "concept": vocab.concepts}.get(kind)
                if table is None:
                    raise DataFormatError(f"unknown vocabulary kind {kind!r}", lineno)
                table[raw] = int(dense)
        for table in (vocab.questions, vocab.concepts):
            if sorted(table.values()) != list(range(len(table))):
                raise DataFormatError(f"{path}: dense ids are not a permutation of 0..n-1")
        return vocab


def load_interactions(path, vocab: Vocabulary | None = None) -> tuple[list[InteractionSequence], Vocabulary]:
    """Group rows by student (first-appearance order) and map ids densely."""
    vocab = vocab if vocab is not None else Vocabulary()
    question_concept: dict[int, int] = {}
    rows_by_student: dict[str, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != HEADER or len(header) not in (4, 5) or \
                (len(header) == 5 and header[4] != "timestamp"):
            raise DataFormatError(f"header must be {','.join(HEADER)}[,timestamp], got {header}", 1)
        has_ts = len(header) == 5
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header)} fields, got {len(row)}", lineno)
            student, q_raw, c_raw, resp = row[:4]
            if resp not in ("0", "1"):
                raise DataFormatError(f"response must be 0 or 1, got {resp!r}", lineno)
            if not student or not q_raw or not c_raw:
                raise DataFormatError("empty id field", lineno)
            ts = 0.0
            if has_ts:
                try:
                    ts = float(row[4])
                except ValueError:
                    raise DataFormatError(f"timestamp is not numeric: {row[4]!r}", lineno) from None
            q = vocab.question(q_raw)
            c = vocab.concept(c_raw)
            if question_concept.setdefault(q, c) != c:
                raise DataFormatError(f"question {q_raw!r} appears with more than one concept", lineno)
            rows_by_student.setdefault(student, []).append((ts, q, c, int(resp)))
    sequences = []
    for student, rows in rows_by_student.items():
        if has_ts:
            rows = sorted(rows, key=lambda r: r[0])  # stable
        arr = np.array([r[1:] for r in rows], dtype=np.int64).reshape(-1, 3)
        sequences.append(InteractionSequence(student, arr[:, 0], arr[:, 1], arr[:, 2]))
    return sequences, vocab


def write_interactions(sequences, path) -> None:
    """Write sequences in the input schema, ids as their dense integers."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for s in sequences:
            for q, c, r in zip(s.questions, s.concepts, s.responses):
                w.writerow([s.student_id, int(q), int(c), int(r)])


def window(sequences, max_len: int = 200) -> list[InteractionSequence]:
    """Cut each sequence into consecutive non-overlapping windows of at most ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out = []
    for s in sequences:
        for w, start in enumerate(range(0, max(len(s), 1), max_len)):
            sl = slice(start, start + max_len)
            if len(s) == 0:
                break
            out.append(InteractionSequence(s.student_id, s.questions[sl], s.concepts[sl], s.responses[sl], w))
    return out


def split(sequences, seed: int, fractions=(0.7, 0.1, 0.2)):
    """Split by student into train/val/test after a seeded shuffle of students.

    Validation and test sizes are floor(fraction * n_students); train takes the rest.
    """
    students = list(dict.fromkeys(s.student_id for s in sequences))
    order = make_rng(seed).permutation(len(students))
    n = len(students)
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    shuffled = [students[i] for i in order]
    groups = [set(shuffled[:n_train]), set(shuffled[n_train:n_train + n_val]), set(shuffled[n_train + n_val:])]
    return tuple([s for s in sequences if s.student_id in g] for g in groups)


@dataclass
class Batch:
    questions: np.ndarray
    concepts: np.ndarray
    responses: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.mask.shape


def make_batch(sequences, length: int | None = None) -> Batch:
    """Right-pad to ``length`` (default: longest sequence); padding ids are 0 and masked out."""
    length = length or max(len(s) for s in sequences)
    shape = (len(sequences), length)
    q, c, r = (np.zeros(shape, dtype=np.int64) for _ in range(3))
    mask = np.zeros(shape, dtype=bool)
    for i, s in enumerate(sequences):
        n = min(len(s), length)
        q[i, :n], c[i, :n], r[i, :n] = s.questions[:n], s.concepts[:n], s.responses[:n]
        mask[i, :n] = True
    return Batch(q, c, r, mask)


def iterate_batches(sequences, batch_size: int, rng: np.random.Generator | None = None):
    order = rng.permutation(len(sequences)) if rng is not None else np.arange(len(sequences))
    for start in range(0, len(order), batch_size):
        yield make_batch([sequences[i] for i in order[start:start + batch_size]])


# ---------------------------------------------------------------------------
# prepared splits on disk


def write_split(sequences, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPLIT_HEADER)
        for s in sequences:
            for q, c, r in zip(s.questions, s.concepts, s.responses):
                w.writerow([s.student_id, s.window, int(q), int(c), int(r)])


def read_split(path) -> list[InteractionSequence]:
    groups: dict[tuple, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SPLIT_HEADER:
            raise DataFormatError(f"{path}: bad split header", 1)
        for lineno, row in enumerate(reader, start=2):
            try:
                key = (row[0], int(row[1]))
                groups.setdefault(key, []).append((int(row[2]), int(row[3]), int(row[4])))
            except (ValueError, IndexError):
                raise DataFormatError(f"{path}: malformed row", lineno) from None
    out = []
    for (student, w), rows in groups.items():
        arr = np.array(rows, dtype=np.int64)
        out.append(InteractionSequence(student, arr[:, 0], arr[:, 1], arr[:, 2], w))
    return out


def load_prepared(directory) -> dict:
    """Read a directory written by ``prepare``: splits, vocabulary and meta."""
    directory = Path(directory)
    meta = {}
    for line in (directory / "meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            meta[k] = v
    out = {"meta": meta, "vocab": Vocabulary.read(directory / "vocab.csv")}
    for name in ("train", "val", "test"):
        out[name] = read_split(directory / f"{name}.csv")
    return out
