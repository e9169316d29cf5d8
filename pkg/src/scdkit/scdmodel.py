"""The diagnosis network.

Embedding tables for students, exercises, and concepts feed an L-layer
attention GCN with residual connections. Per layer and per direction, an
edge's attention logit is a linear map of the concatenated [head, neighbor]
embeddings, softmax-normalized within the head's neighbor segment; a node
with no surviving neighbors just passes its residual through. The final
states map through sigmoid linear heads to per-concept mastery (students)
and difficulty (exercises); predicted accuracy of a (student, exercise)
pair averages sigmoid(predictor(mastery - difficulty)) over the exercise's
concepts.

Forward passes accept an optional View whose masks thin the interaction
directions only; concept edges always participate at full density.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .corpus import QMatrix
from .relgraph import Adjacency, DirectedSplit, RelationGraph
from .viewgen import View

ATTN_DIRECTIONS = ("e2s", "s2e", "c2e", "e2c")


@dataclass(eq=False)
class ModelParams:
    """All trainable arrays plus the structural sizes they were built for."""

    student_emb: np.ndarray
    exercise_emb: np.ndarray
    concept_emb: np.ndarray
    attn: list[dict[str, np.ndarray]]  # per layer, per direction: (2d, 1)
    w_student_diag: np.ndarray
    b_student_diag: np.ndarray
    w_exercise_diag: np.ndarray
    b_exercise_diag: np.ndarray
    w_predict: np.ndarray
    b_predict: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.attn)

    @property
    def dim(self) -> int:
        return self.student_emb.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        """Flat name -> live array view of every trainable parameter."""
        out = {
            "student_emb": self.student_emb,
            "exercise_emb": self.exercise_emb,
            "concept_emb": self.concept_emb,
        }
        for layer, weights in enumerate(self.attn):
            for direction in ATTN_DIRECTIONS:
                out[f"attn{layer}_{direction}"] = weights[direction]
        out.update(
            w_student_diag=self.w_student_diag,
            b_student_diag=self.b_student_diag,
            w_exercise_diag=self.w_exercise_diag,
            b_exercise_diag=self.b_exercise_diag,
            w_predict=self.w_predict,
            b_predict=self.b_predict,
        )
        return out

    def wrap(self) -> dict[str, dc.DiffNode]:
        """Fresh trainable leaves for one optimization step."""
        return {name: dc.param(arr) for name, arr in self.as_dict().items()}


@dataclass(eq=False)
class NodeStates:
    """Per-layer embeddings (index 0 is the embedding layer output).

    `attention` keeps detached per-edge softmax weights for auditing,
    keyed by direction, one array per layer.
    """

    students: list[dc.DiffNode]
    exercises: list[dc.DiffNode]
    concepts: list[dc.DiffNode]
    attention: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @property
    def final_students(self) -> dc.DiffNode:
        return self.students[-1]

    @property
    def final_exercises(self) -> dc.DiffNode:
        return self.exercises[-1]


@dataclass(eq=False)
class Diagnosis:
    """Sigmoid mastery (M x K) and difficulty (N x K) matrices."""

    h_student: dc.DiffNode
    h_exercise: dc.DiffNode


def init_params(
    n_students: int,
    n_exercises: int,
    n_concepts: int,
    dim: int | None = None,
    n_layers: int = 2,
    seed: int = 0,
) -> ModelParams:
    """Seeded fan-in uniform init; embedding dim defaults to the concept count."""
    if min(n_students, n_exercises, n_concepts) < 1 or n_layers < 1:
        raise ValueError("all counts and the layer count must be >= 1")
    d = n_concepts if dim is None else dim
    rng = np.random.default_rng(seed)
    attn = [
        {direction: dc.init_array(rng, (2 * d, 1), 2 * d) for direction in ATTN_DIRECTIONS}
        for _ in range(n_layers)
    ]
    return ModelParams(
        student_emb=dc.init_array(rng, (n_students, d), d),
        exercise_emb=dc.init_array(rng, (n_exercises, d), d),
        concept_emb=dc.init_array(rng, (n_concepts, d), d),
        attn=attn,
        w_student_diag=dc.init_array(rng, (d, n_concepts), d),
        b_student_diag=np.zeros(n_concepts),
        w_exercise_diag=dc.init_array(rng, (d, n_concepts), d),
        b_exercise_diag=np.zeros(n_concepts),
        w_predict=dc.init_array(rng, (n_concepts, n_concepts), n_concepts),
        b_predict=np.zeros(n_concepts),
    )


def _aggregate(
    head_state: dc.DiffNode,
    tail_state: dc.DiffNode,
    adj: Adjacency,
    weight: dc.DiffNode,
    mask: np.ndarray | None,
) -> tuple[dc.DiffNode | None, np.ndarray]:
    """Attention-weighted neighbor sum into each head node.

    Returns (aggregate, detached attention weights); aggregate is None when
    no edges survive the mask.
    """
    heads, tails = adj.heads, adj.tails
    if mask is not None:
        heads, tails = heads[mask], tails[mask]
    if len(heads) == 0:
        return None, np.zeros(0)
    n_heads = adj.n_heads
    h = dc.gather_rows(head_state, heads)
    t = dc.gather_rows(tail_state, tails)
    logits = dc.reshape(dc.matmul(dc.concat([h, t], axis=1), weight), (len(heads),))
    alpha = dc.softmax_segments(logits, heads, n_heads)
    messages = dc.mul(dc.reshape(alpha, (len(heads), 1)), t)
    return dc.segment_sum(messages, heads, n_heads), alpha.value


def gcn_forward(
    params: ModelParams,
    split: DirectedSplit,
    view: View | None = None,
    nodes: dict[str, dc.DiffNode] | None = None,
) -> NodeStates:
    """Run the L-layer aggregation, optionally under a sparse view.

    Pass `nodes` (from ModelParams.wrap()) to share leaves across several
    forwards of one training step; omit it for standalone inference.
    """
    if nodes is None:
        nodes = params.wrap()
    s = nodes["student_emb"]
    e = nodes["exercise_emb"]
    c = nodes["concept_emb"]
    states = NodeStates(
        students=[s],
        exercises=[e],
        concepts=[c],
        attention={direction: [] for direction in ATTN_DIRECTIONS},
    )

    for layer in range(params.n_layers):
        w = {d: nodes[f"attn{layer}_{d}"] for d in ATTN_DIRECTIONS}
        mask_e2s = view.kept_e2s if view is not None else None
        mask_s2e = view.kept_s2e if view is not None else None

        agg_s, a_e2s = _aggregate(s, e, split.e2s, w["e2s"], mask_e2s)
        agg_e_stu, a_s2e = _aggregate(e, s, split.s2e, w["s2e"], mask_s2e)
        agg_e_con, a_c2e = _aggregate(e, c, split.c2e, w["c2e"], None)
        agg_c, a_e2c = _aggregate(c, e, split.e2c, w["e2c"], None)

        s_next = dc.add(agg_s, s) if agg_s is not None else s
        e_next = e
        if agg_e_stu is not None:
            e_next = dc.add(agg_e_stu, e_next)
        if agg_e_con is not None:
            e_next = dc.add(agg_e_con, e_next)
        c_next = dc.add(agg_c, c) if agg_c is not None else c

        for direction, a in zip(ATTN_DIRECTIONS, (a_e2s, a_s2e, a_c2e, a_e2c)):
            states.attention[direction].append(a)
        s, e, c = s_next, e_next, c_next
        states.students.append(s)
        states.exercises.append(e)
        states.concepts.append(c)

    return states


def diagnose(states: NodeStates, nodes: dict[str, dc.DiffNode]) -> Diagnosis:
    """Map final node states to (0,1) mastery and difficulty matrices."""
    h_s = dc.sigmoid(
        dc.add(dc.matmul(states.final_students, nodes["w_student_diag"]), nodes["b_student_diag"])
    )
    h_e = dc.sigmoid(
        dc.add(
            dc.matmul(states.final_exercises, nodes["w_exercise_diag"]), nodes["b_exercise_diag"]
        )
    )
    return Diagnosis(h_s, h_e)


def predict(
    diag: Diagnosis,
    nodes: dict[str, dc.DiffNode],
    q: QMatrix,
    students: np.ndarray,
    exercises: np.ndarray,
) -> dc.DiffNode:
    """Predicted accuracy in (0,1) for each (student, exercise) pair.

    sigmoid(predictor(mastery - difficulty)) averaged over the exercise's
    concepts; exercises without concepts are rejected.
    """
    students = np.asarray(students, dtype=np.intp)
    exercises = np.asarray(exercises, dtype=np.intp)
    counts = q.concept_counts()[exercises]
    if (counts == 0).any():
        bad = int(exercises[counts == 0][0])
        raise ValueError(f"exercise {bad} has no concepts in the Q-matrix")

    h_s = dc.gather_rows(diag.h_student, students)
    h_e = dc.gather_rows(diag.h_exercise, exercises)
    v = dc.sigmoid(dc.add(dc.matmul(dc.sub(h_s, h_e), nodes["w_predict"]), nodes["b_predict"]))
    picked = dc.mul(v, dc.constant(q.dense_mask()[exercises]))
    return dc.mul(dc.rowsum(picked), dc.constant(1.0 / counts))


def forward_diagnosis(
    params: ModelParams, split: DirectedSplit
) -> tuple[np.ndarray, np.ndarray]:
    """Inference-only mastery and difficulty matrices on the original graph."""
    nodes = params.wrap()
    states = gcn_forward(params, split, nodes=nodes)
    diag = diagnose(states, nodes)
    return diag.h_student.value, diag.h_exercise.value


@dataclass(eq=False)
class Checkpoint:
    """A trained model plus everything needed to rebuild its graph and resume."""

    params: ModelParams
    config: dict
    se_edges: np.ndarray
    ec_edges: np.ndarray
    n_students: int
    n_exercises: int
    n_concepts: int
    student_keys: tuple[str, ...]
    exercise_keys: tuple[str, ...]
    concept_keys: tuple[str, ...]
    epoch: int = 0
    step: int = 0
    adam_m: dict[str, np.ndarray] | None = None
    adam_v: dict[str, np.ndarray] | None = None

    def graph(self) -> RelationGraph:
        return RelationGraph(
            self.se_edges, self.ec_edges, self.n_students, self.n_exercises, self.n_concepts
        )

    def qmatrix(self) -> QMatrix:
        return QMatrix(
            self.ec_edges[:, 0].astype(np.intp),
            self.ec_edges[:, 1].astype(np.intp),
            self.n_exercises,
            self.n_concepts,
            self.concept_keys,
        )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Single-file npz: parameter arrays with shape headers, config, graph,
    key maps, and optimizer state."""
    meta = {
        "config": ckpt.config,
        "counts": [ckpt.n_students, ckpt.n_exercises, ckpt.n_concepts],
        "n_layers": ckpt.params.n_layers,
        "dim": ckpt.params.dim,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "has_adam": ckpt.adam_m is not None,
        "student_keys": list(ckpt.student_keys),
        "exercise_keys": list(ckpt.exercise_keys),
        "concept_keys": list(ckpt.concept_keys),
    }
    arrays = {f"p__{k}": v for k, v in ckpt.params.as_dict().items()}
    if ckpt.adam_m is not None:
        arrays.update({f"m__{k}": v for k, v in ckpt.adam_m.items()})
        arrays.update({f"v__{k}": v for k, v in (ckpt.adam_v or {}).items()})
    np.savez(
        path,
        meta=np.array(json.dumps(meta)),
        se_edges=ckpt.se_edges,
        ec_edges=ckpt.ec_edges,
        **arrays,
    )


def _params_from_arrays(arrays: dict[str, np.ndarray], n_layers: int) -> ModelParams:
    attn = [
        {direction: arrays[f"attn{layer}_{direction}"] for direction in ATTN_DIRECTIONS}
        for layer in range(n_layers)
    ]
    return ModelParams(
        student_emb=arrays["student_emb"],
        exercise_emb=arrays["exercise_emb"],
        concept_emb=arrays["concept_emb"],
        attn=attn,
        w_student_diag=arrays["w_student_diag"],
        b_student_diag=arrays["b_student_diag"],
        w_exercise_diag=arrays["w_exercise_diag"],
        b_exercise_diag=arrays["b_exercise_diag"],
        w_predict=arrays["w_predict"],
        b_predict=arrays["b_predict"],
    )


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        params = _params_from_arrays(
            {k[3:]: data[k] for k in data.files if k.startswith("p__")}, meta["n_layers"]
        )
        adam_m = adam_v = None
        if meta["has_adam"]:
            adam_m = {k[3:]: data[k] for k in data.files if k.startswith("m__")}
            adam_v = {k[3:]: data[k] for k in data.files if k.startswith("v__")}
        return Checkpoint(
            params=params,
            config=meta["config"],
            se_edges=data["se_edges"],
            ec_edges=data["ec_edges"],
            n_students=meta["counts"][0],
            n_exercises=meta["counts"][1],
            n_concepts=meta["counts"][2],
            student_keys=tuple(meta["student_keys"]),
            exercise_keys=tuple(meta["exercise_keys"]),
            concept_keys=tuple(meta["concept_keys"]),
            epoch=meta["epoch"],
            step=meta["step"],
            adam_m=adam_m,
            adam_v=adam_v,
        )
