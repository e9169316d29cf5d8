"""Command-line entry point.

Five subcommands: stats, train, eval, viewgen-audit, diagnose. Exit code 0
on success, 1 on runtime errors (reported to stderr), 2 on usage errors.
train and viewgen-audit read a flat JSON config; repeated --override k=v
pairs and dedicated flags win over file values, in that order.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .corpus import dataset_stats, filter_min_interactions, load_qmatrix, load_responses
from .evalkit import align_responses, case_study, evaluate_checkpoint
from .relgraph import build_relation_graph, directed_split
from .scdmodel import load_checkpoint
from .trainkit import TrainConfig, fit
from .viewgen import DropoutParams, retention_table

# config keys that name inputs rather than hyperparameters
_PATH_KEYS = ("responses", "qmatrix", "output_dir")


class UsageError(Exception):
    pass


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _override(pair: str) -> tuple[str, object]:
    key, sep, value = pair.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"override must look like key=value, got {pair!r}")
    return key, _coerce(value)


def _load_config(args) -> tuple[dict, dict]:
    """Merge config file, --override pairs, and dedicated flags; returns
    (hyperparameter dict, path dict)."""
    raw: dict = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
    for key, value in getattr(args, "override", None) or []:
        raw[key] = value
    paths = {k: raw.pop(k, None) for k in _PATH_KEYS}
    for k in _PATH_KEYS:
        flag = getattr(args, k, None)
        if flag is not None:
            paths[k] = flag
    if getattr(args, "seed", None) is not None:
        raw["master_seed"] = args.seed
    return raw, paths


def _require(paths: dict, *keys: str) -> None:
    missing = [k for k in keys if not paths.get(k)]
    if missing:
        raise UsageError(f"missing required input(s): {', '.join(missing)} (flag or config)")


def cmd_stats(args) -> int:
    rs = load_responses(args.responses)
    if args.min_interactions > 0:
        rs = filter_min_interactions(rs, args.min_interactions)
    q = load_qmatrix(args.qmatrix, rs)
    print(json.dumps(dataset_stats(rs, q).to_dict(), indent=1))
    return 0


def cmd_train(args) -> int:
    raw, paths = _load_config(args)
    _require(paths, "responses", "qmatrix", "output_dir")
    try:
        config = TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as err:  # bad key or value is the caller's fault
        raise UsageError(str(err)) from None
    result = fit(
        config,
        paths["responses"],
        paths["qmatrix"],
        paths["output_dir"],
        resume_from=args.resume,
    )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    if result.log_rows:
        print(f"final: {result.log_rows[-1]}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.test)
    print(report.to_json())
    if args.output_dir:
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "per_student.csv").write_text(report.per_student_csv() + "\n")
        (out / "per_group.csv").write_text(report.per_group_csv() + "\n")
    return 0


def cmd_viewgen_audit(args) -> int:
    raw, paths = _load_config(args)
    _require(paths, "responses", "qmatrix")
    dropout = DropoutParams(
        k=raw.get("k", 1.0), theta=raw.get("theta", 0.01), p_min=raw.get("p_min", 0.3)
    )
    rs = load_responses(paths["responses"])
    min_interactions = int(raw.get("min_interactions", 0))
    if min_interactions > 0:
        rs = filter_min_interactions(rs, min_interactions)
    q = load_qmatrix(paths["qmatrix"], rs)
    split = directed_split(build_relation_graph(rs, q))
    rng = np.random.default_rng(args.seed)
    rows = retention_table(split, dropout, args.draws, rng)
    print("degree,importance,retention_p,empirical")
    for row in rows:
        print(
            f"{int(row['degree'])},{float(row['importance'])!r},"
            f"{float(row['retention_p'])!r},{float(row['empirical'])!r}"
        )
    return 0


def cmd_diagnose(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    test_set = None
    if args.test:
        test_set = align_responses(
            load_responses(args.test), ckpt.student_keys, ckpt.exercise_keys
        )
    study = case_study(
        ckpt,
        [s for s in args.students.split(",") if s],
        [e for e in args.exercises.split(",") if e],
        test_set,
    )
    print(study.concept_csv())
    if study.scores:
        print()
        print(study.outcome_csv())
    return 0


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scdkit", description="Graph-based cognitive diagnosis toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="print dataset statistics as JSON")
    p.add_argument("--responses", required=True)
    p.add_argument("--qmatrix", required=True)
    p.add_argument("--min-interactions", type=int, default=0, dest="min_interactions")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="run the training pipeline")
    p.add_argument("--config", help="flat JSON config mirroring TrainConfig")
    p.add_argument("--override", type=_override, action="append", metavar="KEY=VALUE")
    p.add_argument("--responses")
    p.add_argument("--qmatrix")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int, help="overrides master_seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a test CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--output-dir", dest="output_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viewgen-audit", help="print the per-degree retention table")
    p.add_argument("--config")
    p.add_argument("--override", type=_override, action="append", metavar="KEY=VALUE")
    p.add_argument("--responses")
    p.add_argument("--qmatrix")
    p.add_argument("--draws", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_viewgen_audit)

    p = sub.add_parser("diagnose", help="dump mastery/difficulty slices as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--students", required=True, help="comma-separated raw student ids")
    p.add_argument("--exercises", required=True, help="comma-separated raw exercise ids")
    p.add_argument("--test", help="test CSV supplying ground-truth scores")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - boundary of the process
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
