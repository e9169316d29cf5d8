"""Multi-task training loop.

Each epoch draws one fresh view pair of the interaction subgraph (importance
-based, uniform-matched for the random ablation, or none for supervised-only)
and walks shuffled mini-batches. Per batch the supervised loss runs on the
ORIGINAL graph, the contrastive loss on both views, and one Adam step
follows. Every random stream is derived from (master_seed, epoch, stream),
so runs are bit-reproducible and resumable in single-thread double precision.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import (
    ResponseSet,
    dataset_stats,
    filter_min_interactions,
    load_qmatrix,
    load_responses,
    split_train_test,
)
from .corpus import QMatrix
from .objectives import LossBreakdown, main_loss, ssl_loss, total_loss
from .relgraph import DirectedSplit, build_relation_graph, directed_split
from .scdmodel import (
    Checkpoint,
    ModelParams,
    diagnose,
    gcn_forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .viewgen import DropoutParams, generate_random_view, generate_view_pair, matched_uniform_p

log = logging.getLogger(__name__)

MODES = ("scd", "scd-random", "supervised-only")

# stream tags for seed derivation
_STREAM_SPLIT = 0
_STREAM_VIEWS = 1
_STREAM_SHUFFLE = 2


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient goes non-finite; carries the rescue path."""

    def __init__(self, message: str, checkpoint_path: Path | None = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: DropoutParams = field(default_factory=DropoutParams)
    tau: float = 0.5
    lambda1: float = 0.1
    lambda2: float = 1e-4
    n_layers: int = 2
    dim: int | None = None
    master_seed: int = 0
    mode: str = "scd"
    min_interactions: int = 5
    train_ratio: float = 0.8
    include_positive: bool = False
    ssl_full_population: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(out.pop("dropout"))
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        dropout = DropoutParams(
            k=raw.pop("k", 1.0), theta=raw.pop("theta", 0.01), p_min=raw.pop("p_min", 0.3)
        )
        known = {f for f in cls.__dataclass_fields__ if f != "dropout"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(dropout=dropout, **raw)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> None:
    """One bias-corrected Adam update, in place. state.step must already be
    advanced to the 1-based index of this step."""
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g is None or not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p -= config.learning_rate * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + config.adam_eps)


def _rng(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng((int(master_seed), *map(int, tags)))


def _epoch_views(split: DirectedSplit, config: TrainConfig, epoch: int):
    if config.mode == "supervised-only":
        return None, None
    rng = _rng(config.master_seed, epoch, _STREAM_VIEWS)
    if config.mode == "scd":
        return generate_view_pair(split, config.dropout, rng)
    p_uniform = matched_uniform_p(split, config.dropout)
    return (
        generate_random_view(split, p_uniform, rng),
        generate_random_view(split, p_uniform, rng),
    )


def _ssl_subsets(
    batch_students: np.ndarray, batch_exercises: np.ndarray, config: TrainConfig, m: int, n: int
) -> tuple[np.ndarray | None, np.ndarray | None]:
    if config.ssl_full_population:
        return None, None
    s_sub = np.unique(batch_students)
    e_sub = np.unique(batch_exercises)
    # a degenerate mini-batch (one distinct node) cannot form negatives;
    # widen to the full population rather than aborting mid-run
    if len(s_sub) < 2:
        s_sub = np.arange(m) if m >= 2 else s_sub
    if len(e_sub) < 2:
        e_sub = np.arange(n) if n >= 2 else e_sub
    return s_sub, e_sub


def train_epoch(
    params: ModelParams,
    split: DirectedSplit,
    q: QMatrix,
    train_set: ResponseSet,
    config: TrainConfig,
    epoch: int,
    opt: AdamState,
) -> LossBreakdown:
    """One pass over shuffled mini-batches; returns the batch-averaged breakdown."""
    if len(train_set) == 0:
        raise ValueError("train set is empty")
    view1, view2 = _epoch_views(split, config, epoch)
    order = _rng(config.master_seed, epoch, _STREAM_SHUFFLE).permutation(len(train_set))

    sums = np.zeros(4)  # main, ssl_s, ssl_e, reg
    n_batches = 0
    flat = params.as_dict()
    for start in range(0, len(order), config.batch_size):
        batch = order[start : start + config.batch_size]
        b_students = train_set.students[batch]
        b_exercises = train_set.exercises[batch]

        nodes = params.wrap()
        states = gcn_forward(params, split, nodes=nodes)
        diag = diagnose(states, nodes)
        y = predict(diag, nodes, q, b_students, b_exercises)
        l_main = main_loss(y, train_set.scores[batch])

        l_ssl_s = l_ssl_e = None
        if view1 is not None:
            s_sub, e_sub = _ssl_subsets(
                b_students, b_exercises, config, train_set.n_students, train_set.n_exercises
            )
            states1 = gcn_forward(params, split, view=view1, nodes=nodes)
            states2 = gcn_forward(params, split, view=view2, nodes=nodes)
            l_ssl_s, l_ssl_e = ssl_loss(
                states1, states2, config.tau, s_sub, e_sub, config.include_positive
            )

        total, breakdown = total_loss(
            l_main, l_ssl_s, l_ssl_e, nodes, config.lambda1, config.lambda2, config.tau
        )
        total.backward()
        grads = {name: node.grad for name, node in nodes.items()}
        opt.step += 1
        adam_step(flat, grads, opt, config)

        sums += (breakdown.main, breakdown.ssl_student, breakdown.ssl_exercise, breakdown.reg)
        n_batches += 1

    avg = sums / n_batches
    return LossBreakdown(
        main=avg[0],
        ssl_student=avg[1],
        ssl_exercise=avg[2],
        reg=avg[3],
        total=avg[0] + config.lambda1 * (avg[1] + avg[2]) + config.lambda2 * avg[3],
        lambda1=config.lambda1,
        lambda2=config.lambda2,
        tau=config.tau,
    )


@dataclass(eq=False)
class FitResult:
    params: ModelParams
    checkpoint_path: Path
    log_path: Path
    log_rows: list[str]
    train_path: Path
    test_path: Path
    config: TrainConfig


def _write_responses_csv(path: Path, rs: ResponseSet) -> None:
    with open(path, "w") as fh:
        fh.write("student,exercise,score\n")
        for s, e, t in zip(rs.students, rs.exercises, rs.scores):
            fh.write(f"{rs.student_keys[s]},{rs.exercise_keys[e]},{t}\n")


def _make_checkpoint(
    params: ModelParams,
    config: TrainConfig,
    graph,
    rs: ResponseSet,
    q: QMatrix,
    opt: AdamState,
    epoch: int,
) -> Checkpoint:
    return Checkpoint(
        params=params,
        config=config.to_dict(),
        se_edges=graph.se_edges,
        ec_edges=graph.ec_edges,
        n_students=graph.n_students,
        n_exercises=graph.n_exercises,
        n_concepts=graph.n_concepts,
        student_keys=rs.student_keys,
        exercise_keys=rs.exercise_keys,
        concept_keys=q.concept_keys,
        epoch=epoch,
        step=opt.step,
        adam_m=opt.m,
        adam_v=opt.v,
    )


def fit(
    config: TrainConfig,
    responses_path,
    qmatrix_path,
    output_dir,
    resume_from=None,
) -> FitResult:
    """Full pipeline: ingest, filter, split, build graph, train, checkpoint.

    Writes into `output_dir`: train.csv / test.csv (the split, in raw keys),
    mappings.json, stats.json, train_log.csv, and checkpoint.npz (params,
    config, graph, and optimizer state, so training can resume bit-exactly).
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    rs = load_responses(responses_path)
    if config.min_interactions > 0:
        rs = filter_min_interactions(rs, config.min_interactions)
    q = load_qmatrix(qmatrix_path, rs)
    train_set, test_set = split_train_test(
        rs, config.train_ratio, seed=int(_rng(config.master_seed, _STREAM_SPLIT).integers(2**31))
    )
    if len(train_set) == 0:
        raise ValueError("train split is empty")
    graph = build_relation_graph(train_set, q)
    split = directed_split(graph)

    train_path = output_dir / "train.csv"
    test_path = output_dir / "test.csv"
    _write_responses_csv(train_path, train_set)
    _write_responses_csv(test_path, test_set)
    (output_dir / "mappings.json").write_text(
        json.dumps(
            {
                "students": list(rs.student_keys),
                "exercises": list(rs.exercise_keys),
                "concepts": list(q.concept_keys),
            },
            indent=1,
        )
    )
    (output_dir / "stats.json").write_text(json.dumps(dataset_stats(rs, q).to_dict(), indent=1))

    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        params = ckpt.params
        opt = AdamState(m=dict(ckpt.adam_m), v=dict(ckpt.adam_v), step=ckpt.step)
        start_epoch = ckpt.epoch
        if ckpt.epoch >= config.epochs:
            raise ValueError(f"checkpoint already at epoch {ckpt.epoch} >= epochs {config.epochs}")
    else:
        params = init_params(
            graph.n_students,
            graph.n_exercises,
            graph.n_concepts,
            dim=config.dim,
            n_layers=config.n_layers,
            seed=config.master_seed,
        )
        opt = AdamState.fresh(params.as_dict())

    ckpt_path = output_dir / "checkpoint.npz"
    log_path = output_dir / "train_log.csv"
    log_rows: list[str] = []
    last_good = _snapshot(params)

    with open(log_path, "w") as log_file:
        log_file.write(LossBreakdown.CSV_HEADER + "\n")
        for epoch in range(start_epoch + 1, config.epochs + 1):
            try:
                breakdown = train_epoch(params, split, q, train_set, config, epoch, opt)
            except FloatingPointError as err:
                rescue = output_dir / "checkpoint_diverged.npz"
                save_checkpoint(
                    rescue,
                    _make_checkpoint(last_good, config, graph, rs, q, opt, epoch - 1),
                )
                raise TrainingDiverged(
                    f"epoch {epoch}: {err}; last good state saved to {rescue}", rescue
                ) from err
            row = breakdown.csv_row(epoch)
            log_rows.append(row)
            log_file.write(row + "\n")
            log.info("epoch %d: %s", epoch, row)
            last_good = _snapshot(params)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(
                    output_dir / f"checkpoint_ep{epoch}.npz",
                    _make_checkpoint(params, config, graph, rs, q, opt, epoch),
                )

    save_checkpoint(
        ckpt_path, _make_checkpoint(params, config, graph, rs, q, opt, config.epochs)
    )
    return FitResult(params, ckpt_path, log_path, log_rows, train_path, test_path, config)


def _snapshot(params: ModelParams) -> ModelParams:
    flat = {k: v.copy() for k, v in params.as_dict().items()}
    return replace(
        params,
        student_emb=flat["student_emb"],
        exercise_emb=flat["exercise_emb"],
        concept_emb=flat["concept_emb"],
        attn=[
            {d: flat[f"attn{layer}_{d}"] for d in params.attn[layer]}
            for layer in range(params.n_layers)
        ],
        w_student_diag=flat["w_student_diag"],
        b_student_diag=flat["b_student_diag"],
        w_exercise_diag=flat["w_exercise_diag"],
        b_exercise_diag=flat["b_exercise_diag"],
        w_predict=flat["w_predict"],
        b_predict=flat["b_predict"],
    )
