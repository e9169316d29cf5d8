"""Response-record and Q-matrix ingestion, sparse-student filtering, and splits.

Raw student/exercise/concept keys are arbitrary strings; loaders remap them
to dense 0-based indices in first-appearance order and keep the two-way
mapping for reporting. All functions are pure: they return new objects and
never mutate their inputs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class ResponseFormatError(ValueError):
    """A response or Q-matrix file line that cannot be parsed."""


@dataclass(frozen=True, eq=False)
class ResponseSet:
    """Deduplicated (student, exercise, score) triplets over dense indices.

    At most one record per (student, exercise) pair; scores are 0/1.
    `student_keys[i]` is the raw key of dense student index i (likewise for
    exercises), so splits and filters can be reported in input terms.
    """

    students: np.ndarray
    exercises: np.ndarray
    scores: np.ndarray
    n_students: int
    n_exercises: int
    student_keys: tuple[str, ...]
    exercise_keys: tuple[str, ...]

    def __post_init__(self):
        if len(self.students) != len(self.exercises) or len(self.students) != len(self.scores):
            raise ValueError("record columns have mismatched lengths")
        if len(self.students) and (
            self.students.min() < 0
            or self.students.max() >= self.n_students
            or self.exercises.min() < 0
            or self.exercises.max() >= self.n_exercises
        ):
            raise ValueError("record index out of range")

    def __len__(self) -> int:
        return len(self.students)

    def student_counts(self) -> np.ndarray:
        """Records per student, length n_students."""
        return np.bincount(self.students, minlength=self.n_students)

    def replace_records(self, keep: np.ndarray) -> "ResponseSet":
        """Same universe and key maps, records restricted to positions `keep`."""
        return ResponseSet(
            self.students[keep],
            self.exercises[keep],
            self.scores[keep],
            self.n_students,
            self.n_exercises,
            self.student_keys,
            self.exercise_keys,
        )


@dataclass(frozen=True, eq=False)
class QMatrix:
    """Binary exercise-concept incidence as a deduplicated pair list."""

    exercises: np.ndarray
    concepts: np.ndarray
    n_exercises: int
    n_concepts: int
    concept_keys: tuple[str, ...]
    _mask: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mask = np.zeros((self.n_exercises, self.n_concepts))
        mask[self.exercises, self.concepts] = 1.0
        object.__setattr__(self, "_mask", mask)

    def __len__(self) -> int:
        return len(self.exercises)

    def dense_mask(self) -> np.ndarray:
        """(n_exercises, n_concepts) 0/1 float matrix."""
        return self._mask

    def concept_counts(self) -> np.ndarray:
        return np.bincount(self.exercises, minlength=self.n_exercises)

    def concepts_of(self, exercise: int) -> np.ndarray:
        return np.sort(self.concepts[self.exercises == exercise])


@dataclass(frozen=True)
class DatasetStats:
    n_students: int
    n_exercises: int
    n_concepts: int
    n_interactions: int
    interactions_per_student: float
    density: float

    def to_dict(self) -> dict:
        return asdict(self)


def _parse_score(raw: str, line_no: int) -> int:
    try:
        value = float(raw)
    except ValueError:
        raise ResponseFormatError(f"line {line_no}: score {raw!r} is not a number") from None
    if value not in (0.0, 1.0):
        raise ResponseFormatError(f"line {line_no}: score must be 0 or 1, got {raw!r}")
    return int(value)


def _is_header(row: list[str], expected: tuple[str, ...]) -> bool:
    return tuple(c.strip().lower() for c in row) == expected


def load_responses(path) -> ResponseSet:
    """Read `student,exercise,score` CSV (header optional) into a ResponseSet.

    Duplicate (student, exercise) pairs keep the first occurrence. Malformed
    lines raise ResponseFormatError with the 1-based line number.
    """
    student_index: dict[str, int] = {}
    exercise_index: dict[str, int] = {}
    seen_pairs: set[tuple[int, int]] = set()
    students, exercises, scores = [], [], []

    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line_no == 1 and _is_header(row, ("student", "exercise", "score")):
                continue
            if len(row) != 3:
                raise ResponseFormatError(
                    f"line {line_no}: expected 3 columns student,exercise,score, got {len(row)}"
                )
            s_key, e_key = row[0].strip(), row[1].strip()
            score = _parse_score(row[2].strip(), line_no)
            s = student_index.setdefault(s_key, len(student_index))
            e = exercise_index.setdefault(e_key, len(exercise_index))
            if (s, e) in seen_pairs:
                continue
            seen_pairs.add((s, e))
            students.append(s)
            exercises.append(e)
            scores.append(score)

    if not students:
        raise ResponseFormatError(f"{path}: no response records found")
    return ResponseSet(
        np.array(students, dtype=np.intp),
        np.array(exercises, dtype=np.intp),
        np.array(scores, dtype=np.int64),
        len(student_index),
        len(exercise_index),
        tuple(student_index),
        tuple(exercise_index),
    )


def load_qmatrix(path, rs: ResponseSet) -> QMatrix:
    """Read `exercise,concept` CSV against the exercise universe of `rs`.

    Rows naming exercises that never appear in `rs` are ignored (they are
    outside the node universe). Every exercise of `rs` must end up with at
    least one concept.
    """
    exercise_index = {key: i for i, key in enumerate(rs.exercise_keys)}
    concept_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    ex, co = [], []

    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if line_no == 1 and _is_header(row, ("exercise", "concept")):
                continue
            if len(row) != 2:
                raise ResponseFormatError(
                    f"line {line_no}: expected 2 columns exercise,concept, got {len(row)}"
                )
            e_key, c_key = row[0].strip(), row[1].strip()
            if e_key not in exercise_index:
                continue
            e = exercise_index[e_key]
            c = concept_index.setdefault(c_key, len(concept_index))
            if (e, c) in seen:
                continue
            seen.add((e, c))
            ex.append(e)
            co.append(c)

    if not ex:
        raise ResponseFormatError(f"{path}: no usable exercise-concept rows")
    covered = np.zeros(rs.n_exercises, dtype=bool)
    covered[np.array(ex)] = True
    if not covered.all():
        missing = [rs.exercise_keys[i] for i in np.flatnonzero(~covered)[:5]]
        raise ValueError(
            f"{int((~covered).sum())} exercises have no concept in the Q-matrix "
            f"(first missing: {missing})"
        )
    order = np.lexsort((co, ex))
    return QMatrix(
        np.array(ex, dtype=np.intp)[order],
        np.array(co, dtype=np.intp)[order],
        rs.n_exercises,
        len(concept_index),
        tuple(concept_index),
    )


def filter_min_interactions(rs: ResponseSet, min_count: int) -> ResponseSet:
    """Drop students with record count <= min_count (strictly-above rule).

    Surviving students and exercises are re-densified to contiguous indices,
    preserving their relative order; exercises left with zero records vanish.
    """
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    counts = rs.student_counts()
    kept_students = np.flatnonzero(counts > min_count)
    if len(kept_students) == 0:
        raise ValueError(f"no students with more than {min_count} interactions")

    keep = counts[rs.students] > min_count
    students = rs.students[keep]
    exercises = rs.exercises[keep]
    scores = rs.scores[keep]

    kept_exercises = np.flatnonzero(np.bincount(exercises, minlength=rs.n_exercises) > 0)
    s_remap = np.full(rs.n_students, -1, dtype=np.intp)
    s_remap[kept_students] = np.arange(len(kept_students))
    e_remap = np.full(rs.n_exercises, -1, dtype=np.intp)
    e_remap[kept_exercises] = np.arange(len(kept_exercises))

    return ResponseSet(
        s_remap[students],
        e_remap[exercises],
        scores,
        len(kept_students),
        len(kept_exercises),
        tuple(rs.student_keys[i] for i in kept_students),
        tuple(rs.exercise_keys[i] for i in kept_exercises),
    )


def split_train_test(
    rs: ResponseSet, train_ratio: float, seed: int
) -> tuple[ResponseSet, ResponseSet]:
    """Per-student split: floor(c * (1 - train_ratio)) records go to test.

    Test records are chosen uniformly without replacement from each student's
    records via one seeded generator (students visited in ascending index
    order), so the partition is reproducible. Every student keeps at least
    one train record; students with fewer than 2 records fall back to
    all-train and are counted in a warning.
    """
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie in (0, 1)")
    if len(rs) == 0:
        raise ValueError("cannot split an empty response set")

    rng = np.random.default_rng(seed)
    order = np.lexsort((rs.exercises, rs.students))
    boundaries = np.flatnonzero(np.diff(rs.students[order])) + 1
    groups = np.split(order, boundaries)

    test_mask = np.zeros(len(rs), dtype=bool)
    fallbacks = 0
    for group in groups:
        c = len(group)
        n_test = math.floor(c * (1.0 - train_ratio))
        if c < 2:
            fallbacks += 1  # their test share c*(1-ratio) > 0 always floors to 0
            continue
        n_test = min(n_test, c - 1)
        if n_test == 0:
            continue
        chosen = rng.choice(group, size=n_test, replace=False)
        test_mask[chosen] = True

    if fallbacks:
        log.warning("%d students had <2 records; kept all their records in train", fallbacks)
    return rs.replace_records(~test_mask), rs.replace_records(test_mask)


def dataset_stats(rs: ResponseSet, q: QMatrix) -> DatasetStats:
    """Counts, interactions per student, and interaction density."""
    if len(rs) == 0 or rs.n_students == 0:
        raise ValueError("stats need at least one record")
    n = len(rs)
    return DatasetStats(
        n_students=rs.n_students,
        n_exercises=rs.n_exercises,
        n_concepts=q.n_concepts,
        n_interactions=n,
        interactions_per_student=n / rs.n_students,
        density=n / (rs.n_students * rs.n_exercises),
    )
