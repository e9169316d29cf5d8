"""Evaluation: overall ACC/RMSE, bottom-half-by-interaction metrics, grouped
reports, and per-student case studies.

Per-student metrics are computed on test records; what makes a student
"long-tailed" is how little the model saw of them, so the ranking key is the
TRAIN interaction count (ties broken by student id). acc50/rmse50 are
unweighted means of per-student values over the first floor(M'/2) ranked
students, where M' counts students with at least one test record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import ResponseSet, load_responses
from .relgraph import directed_split
from .scdmodel import Checkpoint, diagnose, gcn_forward, load_checkpoint, predict


def accuracy(preds, labels, threshold: float = 0.5) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.mean((preds >= threshold).astype(np.int64) == labels))


def rmse(preds, labels) -> float:
    preds, labels = _check_pair(preds, labels)
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("preds and labels must be equal-length and nonempty")
    return preds, labels


@dataclass(frozen=True)
class StudentRow:
    student: int
    n_train: int
    acc: float
    rmse: float


@dataclass(frozen=True)
class GroupRow:
    label: str
    n_students: int
    n_interactions: int
    acc: float  # nan when the bucket is empty
    rmse: float


def student_table(
    students: np.ndarray, preds: np.ndarray, labels: np.ndarray, train_counts: np.ndarray
) -> list[StudentRow]:
    """Per-student ACC/RMSE over test records, ascending by student id.

    `train_counts[i]` is student i's number of train interactions; students
    with no test records simply do not appear.
    """
    students = np.asarray(students, dtype=np.intp)
    preds, labels = _check_pair(preds, labels)
    if len(students) != len(preds):
        raise ValueError("students column length mismatch")
    rows = []
    for s in np.unique(students):
        sel = students == s
        rows.append(
            StudentRow(
                student=int(s),
                n_train=int(train_counts[s]),
                acc=accuracy(preds[sel], labels[sel]),
                rmse=rmse(preds[sel], labels[sel]),
            )
        )
    return rows


def tail_metrics(rows: list[StudentRow]) -> tuple[float, float]:
    """Mean per-student ACC and RMSE over the least-observed half.

    Mean of per-student RMSE values, not RMSE over pooled records.
    """
    if len(rows) < 2:
        raise ValueError("need at least 2 students with test records")
    ids = np.array([r.student for r in rows])
    counts = np.array([r.n_train for r in rows])
    order = np.lexsort((ids, counts))
    half = order[: len(rows) // 2]
    return (
        float(np.mean([rows[i].acc for i in half])),
        float(np.mean([rows[i].rmse for i in half])),
    )


def group_report(
    rows: list[StudentRow], bucket_width: int = 5, n_buckets: int = 9
) -> list[GroupRow]:
    """Bucket students by train interaction count: [0,w),[w,2w),...,[(n-1)w,inf)."""
    if not rows or bucket_width < 1 or n_buckets < 1:
        raise ValueError("need a nonempty table and positive bucket geometry")
    out = []
    counts = np.array([r.n_train for r in rows])
    idx = np.minimum(counts // bucket_width, n_buckets - 1)
    for b in range(n_buckets):
        lo = b * bucket_width
        label = f"{lo}+" if b == n_buckets - 1 else f"{lo}-{lo + bucket_width}"
        members = [r for r, i in zip(rows, idx) if i == b]
        if members:
            out.append(
                GroupRow(
                    label,
                    len(members),
                    int(sum(r.n_train for r in members)),
                    float(np.mean([r.acc for r in members])),
                    float(np.mean([r.rmse for r in members])),
                )
            )
        else:
            out.append(GroupRow(label, 0, 0, float("nan"), float("nan")))
    return out


@dataclass(eq=False)
class EvalReport:
    acc: float
    rmse: float
    acc50: float
    rmse50: float
    per_group: list[GroupRow]
    per_student: list[StudentRow] = field(default_factory=list)

    def to_json(self) -> str:
        def _clean(x):
            return None if isinstance(x, float) and not np.isfinite(x) else x

        return json.dumps(
            {
                "acc": self.acc,
                "rmse": self.rmse,
                "acc50": self.acc50,
                "rmse50": self.rmse50,
                "per_group": [
                    {
                        "bucket": g.label,
                        "n_students": g.n_students,
                        "n_interactions": g.n_interactions,
                        "acc": _clean(g.acc),
                        "rmse": _clean(g.rmse),
                    }
                    for g in self.per_group
                ],
            },
            indent=1,
        )

    def per_student_csv(self) -> str:
        lines = ["student,train_interactions,acc,rmse"]
        lines += [f"{r.student},{r.n_train},{r.acc!r},{r.rmse!r}" for r in self.per_student]
        return "\n".join(lines)

    def per_group_csv(self) -> str:
        lines = ["bucket,n_students,n_interactions,acc,rmse"]
        for g in self.per_group:
            a = "" if not np.isfinite(g.acc) else repr(g.acc)
            r = "" if not np.isfinite(g.rmse) else repr(g.rmse)
            lines.append(f"{g.label},{g.n_students},{g.n_interactions},{a},{r}")
        return "\n".join(lines)


def evaluate(params, split, q, test_set: ResponseSet, train_counts: np.ndarray) -> EvalReport:
    """Forward on the original graph and score every test record."""
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    nodes = params.wrap()
    states = gcn_forward(params, split, nodes=nodes)
    diag = diagnose(states, nodes)
    preds = predict(diag, nodes, q, test_set.students, test_set.exercises).value
    labels = test_set.scores
    rows = student_table(test_set.students, preds, labels, train_counts)
    acc50, rmse50 = tail_metrics(rows)
    return EvalReport(
        acc=accuracy(preds, labels),
        rmse=rmse(preds, labels),
        acc50=acc50,
        rmse50=rmse50,
        per_group=group_report(rows),
        per_student=rows,
    )


def align_responses(
    rs: ResponseSet, student_keys: tuple[str, ...], exercise_keys: tuple[str, ...]
) -> ResponseSet:
    """Re-index a loaded ResponseSet onto an existing key universe."""
    s_index = {k: i for i, k in enumerate(student_keys)}
    e_index = {k: i for i, k in enumerate(exercise_keys)}
    unknown_s = [k for k in rs.student_keys if k not in s_index]
    unknown_e = [k for k in rs.exercise_keys if k not in e_index]
    if unknown_s or unknown_e:
        raise ValueError(
            f"keys outside the checkpoint universe (students {unknown_s[:5]}, "
            f"exercises {unknown_e[:5]})"
        )
    s_map = np.array([s_index[k] for k in rs.student_keys], dtype=np.intp)
    e_map = np.array([e_index[k] for k in rs.exercise_keys], dtype=np.intp)
    return ResponseSet(
        s_map[rs.students],
        e_map[rs.exercises],
        rs.scores,
        len(student_keys),
        len(exercise_keys),
        tuple(student_keys),
        tuple(exercise_keys),
    )


def evaluate_checkpoint(checkpoint_path, test_path) -> EvalReport:
    """Rebuild the train graph stored in the checkpoint and score a test CSV.

    Train interaction counts are recovered as exercise->student indegrees
    (train records are deduplicated, so edges equal records).
    """
    ckpt = load_checkpoint(checkpoint_path)
    split = directed_split(ckpt.graph())
    q = ckpt.qmatrix()
    test_set = align_responses(
        load_responses(test_path), ckpt.student_keys, ckpt.exercise_keys
    )
    train_counts = split.e2s.indegrees()
    return evaluate(ckpt.params, split, q, test_set, train_counts)


@dataclass(eq=False)
class CaseStudy:
    """Mastery and difficulty slices over the concepts the requested exercises touch."""

    student_ids: list[int]
    exercise_ids: list[int]
    student_labels: list[str]
    exercise_labels: list[str]
    concept_ids: list[int]
    concept_labels: list[str]
    mastery: np.ndarray  # (len(student_ids), len(concept_ids))
    difficulty: np.ndarray  # (len(exercise_ids), len(concept_ids))
    exercise_concepts: dict[int, tuple[int, ...]]
    scores: dict[tuple[int, int], int]

    def consistent(self, student: int, exercise: int) -> bool | None:
        """Does the observed score agree with mastery dominating difficulty on
        every concept of the exercise? None when the score is unknown."""
        if (student, exercise) not in self.scores:
            return None
        si = self.student_ids.index(student)
        ei = self.exercise_ids.index(exercise)
        cols = [self.concept_ids.index(c) for c in self.exercise_concepts[exercise]]
        dominates = bool(np.all(self.mastery[si, cols] > self.difficulty[ei, cols]))
        return dominates == (self.scores[(student, exercise)] == 1)

    def concept_csv(self) -> str:
        header = (
            ["concept"]
            + [f"mastery:{s}" for s in self.student_labels]
            + [f"difficulty:{e}" for e in self.exercise_labels]
        )
        lines = [",".join(header)]
        for j, label in enumerate(self.concept_labels):
            cells = [label]
            cells += [repr(float(v)) for v in self.mastery[:, j]]
            cells += [repr(float(v)) for v in self.difficulty[:, j]]
            lines.append(",".join(cells))
        return "\n".join(lines)

    def outcome_csv(self) -> str:
        lines = ["student,exercise,score,consistent"]
        for (s, e), score in sorted(self.scores.items()):
            flag = self.consistent(s, e)
            lines.append(
                f"{self.student_labels[self.student_ids.index(s)]},"
                f"{self.exercise_labels[self.exercise_ids.index(e)]},{score},{flag}"
            )
        return "\n".join(lines)


def case_study(
    ckpt: Checkpoint,
    student_keys: list[str],
    exercise_keys: list[str],
    test_set: ResponseSet | None = None,
) -> CaseStudy:
    """Slice diagnosed mastery/difficulty for the requested ids.

    Raw string ids resolve through the checkpoint's key maps; unknown ids
    raise. Ground-truth scores come from `test_set` when given.
    """
    s_index = {k: i for i, k in enumerate(ckpt.student_keys)}
    e_index = {k: i for i, k in enumerate(ckpt.exercise_keys)}
    try:
        students = [s_index[k] for k in student_keys]
    except KeyError as err:
        raise ValueError(f"unknown student id {err.args[0]!r}") from None
    try:
        exercises = [e_index[k] for k in exercise_keys]
    except KeyError as err:
        raise ValueError(f"unknown exercise id {err.args[0]!r}") from None

    q = ckpt.qmatrix()
    per_exercise = {e: tuple(int(c) for c in q.concepts_of(e)) for e in exercises}
    concept_ids = sorted({c for cs in per_exercise.values() for c in cs})

    split = directed_split(ckpt.graph())
    nodes = ckpt.params.wrap()
    states = gcn_forward(ckpt.params, split, nodes=nodes)
    diag = diagnose(states, nodes)
    h_s = diag.h_student.value
    h_e = diag.h_exercise.value

    scores: dict[tuple[int, int], int] = {}
    if test_set is not None:
        wanted_s, wanted_e = set(students), set(exercises)
        for s, e, t in zip(test_set.students, test_set.exercises, test_set.scores):
            if int(s) in wanted_s and int(e) in wanted_e:
                scores[(int(s), int(e))] = int(t)

    cols = np.array(concept_ids, dtype=np.intp)
    return CaseStudy(
        student_ids=students,
        exercise_ids=exercises,
        student_labels=list(student_keys),
        exercise_labels=list(exercise_keys),
        concept_ids=concept_ids,
        concept_labels=[ckpt.concept_keys[c] for c in concept_ids],
        mastery=h_s[np.ix_(students, cols)] if concept_ids else np.zeros((len(students), 0)),
        difficulty=h_e[np.ix_(exercises, cols)] if concept_ids else np.zeros((len(exercises), 0)),
        exercise_concepts=per_exercise,
        scores=scores,
    )
