"""Training objectives: supervised cross-entropy, contrastive alignment
between view pairs, and their weighted multi-task combination.

The contrastive term treats the two representations of one node under the
two views as the positive pair and, by default, puts ONLY the other nodes'
representations in the denominator (the positive pair is excluded); with
that convention the per-node term can go negative. Set
`include_positive=True` for the more common variant that keeps the positive
in the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffNode
from .scdmodel import NodeStates


def main_loss(y: DiffNode, labels: np.ndarray) -> DiffNode:
    """Summed cross entropy between predicted accuracies and 0/1 scores.

    Predictions are clamped into [1e-12, 1 - 1e-12] before the logs.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if y.value.shape != labels.shape:
        raise ValueError(f"shape mismatch: predictions {y.value.shape}, labels {labels.shape}")
    y_c = dc.clip(y, 1e-12, 1.0 - 1e-12)
    hit = dc.mul(dc.constant(labels), dc.log(y_c))
    miss = dc.mul(dc.constant(1.0 - labels), dc.log(dc.sub(dc.constant(1.0), y_c)))
    return dc.scale(dc.total_sum(dc.add(hit, miss)), -1.0)


def infonce(
    z1: DiffNode,
    z2: DiffNode,
    tau: float,
    subset: np.ndarray | None = None,
    include_positive: bool = False,
) -> DiffNode:
    """Mean contrastive loss between matching rows of two representations.

    Per node i: -log( exp(cos(z1_i, z2_i)/tau) / sum_j exp(cos(z1_i, z2_j)/tau) ),
    where j ranges over the other nodes only unless `include_positive`.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if subset is not None:
        subset = np.asarray(subset, dtype=np.intp)
        z1 = dc.gather_rows(z1, subset)
        z2 = dc.gather_rows(z2, subset)
    n = z1.value.shape[0]
    if z1.value.shape != z2.value.shape:
        raise ValueError("view representations must have matching shapes")
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 nodes to form negatives")

    u1 = dc.normalize_rows(z1)
    u2 = dc.normalize_rows(z2)
    pos = dc.scale(dc.rowsum(dc.mul(u1, u2)), 1.0 / tau)
    sims = dc.scale(dc.matmul(u1, dc.transpose(u2)), 1.0 / tau)
    exp_all = dc.exp(sims)
    if not include_positive:
        exp_all = dc.mul(exp_all, dc.constant(1.0 - np.eye(n)))
    denom = dc.rowsum(exp_all)
    return dc.mean(dc.sub(dc.log(denom), pos))


def ssl_loss(
    states1: NodeStates,
    states2: NodeStates,
    tau: float,
    student_subset: np.ndarray | None = None,
    exercise_subset: np.ndarray | None = None,
    include_positive: bool = False,
) -> tuple[DiffNode, DiffNode]:
    """Contrastive loss of the final-layer student rows and exercise rows."""
    loss_s = infonce(
        states1.final_students, states2.final_students, tau, student_subset, include_positive
    )
    loss_e = infonce(
        states1.final_exercises, states2.final_exercises, tau, exercise_subset, include_positive
    )
    return loss_s, loss_e


@dataclass(frozen=True)
class LossBreakdown:
    """One step's (or epoch's) loss components; total is their weighted sum."""

    main: float
    ssl_student: float
    ssl_exercise: float
    reg: float
    total: float
    lambda1: float
    lambda2: float
    tau: float

    CSV_HEADER = "epoch,main,ssl_s,ssl_e,reg,total"

    def __post_init__(self):
        for name in ("main", "ssl_student", "ssl_exercise", "reg", "total"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def csv_row(self, epoch: int) -> str:
        return (
            f"{epoch},{self.main!r},{self.ssl_student!r},{self.ssl_exercise!r},"
            f"{self.reg!r},{self.total!r}"
        )


def total_loss(
    main: DiffNode,
    ssl_student: DiffNode | None,
    ssl_exercise: DiffNode | None,
    param_nodes: dict[str, DiffNode],
    lambda1: float,
    lambda2: float,
    tau: float,
) -> tuple[DiffNode, LossBreakdown]:
    """main + lambda1 * (ssl_s + ssl_e) + lambda2 * ||all params||^2.

    Returns the differentiable total and a float breakdown. Pass None for
    both contrastive parts to train supervised-only.
    """
    if (ssl_student is None) != (ssl_exercise is None):
        raise ValueError("either both or neither contrastive component must be given")
    reg: DiffNode | None = None
    for node in param_nodes.values():
        sq = dc.l2_norm_sq(node)
        reg = sq if reg is None else dc.add(reg, sq)
    if reg is None:
        reg = dc.constant(0.0)

    total = main
    if ssl_student is not None:
        total = dc.add(total, dc.scale(dc.add(ssl_student, ssl_exercise), lambda1))
    total = dc.add(total, dc.scale(reg, lambda2))

    breakdown = LossBreakdown(
        main=main.item(),
        ssl_student=ssl_student.item() if ssl_student is not None else 0.0,
        ssl_exercise=ssl_exercise.item() if ssl_exercise is not None else 0.0,
        reg=reg.item(),
        total=total.item(),
        lambda1=lambda1,
        lambda2=lambda2,
        tau=tau,
    )
    if not np.isfinite(breakdown.total):
        raise FloatingPointError(f"non-finite loss: {breakdown}")
    return total, breakdown
