"""Command-line entry point: ``vninet <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .data import SyntheticConfig, gen_synthetic, load_db, load_frame, load_index, save_db
from .errors import FormatError, ValidationError
from .evaluation import (DTYPES, STAGES, TARGETS, check_equivariance, dump_features,
                         extract_all, recall, rotation_stress)
from .model import ModelConfig, init_params, load_checkpoint, param_report, parse_key_values
from .training import TrainConfig, load_train_config, train_loop, write_log_header

log = logging.getLogger("vninet")

MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
GEN_KEYS = {f.name for f in dataclasses.fields(SyntheticConfig)} - {"seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS,
                   help="flat key=value file; command-line values win")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--precision", choices=sorted(DTYPES), default=argparse.SUPPRESS)
    p.add_argument("-o", "--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS,
                   help="override one config key (repeatable)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="vninet", parents=[common],
                     description="Rotation-invariant point-cloud place recognition")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", parents=[common], help="train on an index")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="training log (appended)")

    p = sub.add_parser("extract", parents=[common], help="descriptor database for an index")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--points", type=int, default=0, help="fixed point subset size (0 = all)")

    p = sub.add_parser("index", parents=[common], help="validate an index and its frames")
    p.add_argument("--index", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="recall of a query db against a reference db")
    p.add_argument("--query-db", type=Path, required=True)
    p.add_argument("--ref-db", type=Path, required=True)
    p.add_argument("--radius", type=float, default=25.0)
    p.add_argument("--report", type=Path)

    p = sub.add_parser("stress", parents=[common], help="rotation stress test")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="omit for random parameters")
    p.add_argument("--ref-db", type=Path)
    p.add_argument("--mode", choices=("so3", "z_axis"), default="so3")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--points", type=int, default=0)
    p.add_argument("--report", type=Path, help="JSON lines, one object per trial")

    p = sub.add_parser("check", parents=[common], help="layer equivariance / invariance checks")
    p.add_argument("--target", action="append", choices=sorted(TARGETS),
                   help="repeatable; default: every target")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--report", type=Path)

    p = sub.add_parser("dump", parents=[common], help="per-point features as CSV")
    p.add_argument("--frame", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, help="omit for random parameters")
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--out", type=Path, required=True)

    sub.add_parser("params", parents=[common], help="parameter count per layer")
    return parser


def _settings(args) -> dict[str, str]:
    values: dict[str, str] = {}
    cfg = getattr(args, "config", None)
    if cfg is not None:
        try:
            values.update(parse_key_values(Path(cfg).read_text()))
        except OSError as exc:
            raise ValidationError(f"cannot read config {cfg}: {exc}") from exc
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not KEY=VALUE")
        key, val = item.split("=", 1)
        values[key.strip()] = val.strip()
    unknown = set(values) - MODEL_KEYS - TRAIN_KEYS - GEN_KEYS - {"seed", "precision"}
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return values


def _pick(values, keys):
    return {k: v for k, v in values.items() if k in keys}


def _seed(args, values) -> int:
    return int(getattr(args, "seed", None) if getattr(args, "seed", None) is not None
               else values.get("seed", 0))


def _dtype(args, values):
    prec = getattr(args, "precision", None) or values.get("precision", "f64")
    if prec not in DTYPES:
        raise ValidationError(f"precision must be f32 or f64, got {prec!r}")
    return DTYPES[prec], prec


def _model(args, values, dtype):
    ckpt = getattr(args, "checkpoint", None)
    if ckpt is not None:
        return load_checkpoint(ckpt, dtype)
    return init_params(ModelConfig.from_mapping(_pick(values, MODEL_KEYS)), _seed(args, values),
                       dtype)


def _cmd_gen(args, values):
    kwargs = {}
    fields_ = {f.name: f for f in dataclasses.fields(SyntheticConfig)}
    for k, v in _pick(values, GEN_KEYS).items():
        default = fields_[k].default
        if isinstance(default, bool):
            kwargs[k] = v.lower() in ("1", "true", "yes", "on")
        else:
            kwargs[k] = type(default)(v)
    cfg = SyntheticConfig(**kwargs, seed=_seed(args, values))
    paths = gen_synthetic(args.out, cfg)
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


def _cmd_train(args, values):
    dtype, _ = _dtype(args, values)
    index = load_index(args.index)
    mcfg = ModelConfig.from_mapping(_pick(values, MODEL_KEYS))
    tcfg = load_train_config(_pick(values, TRAIN_KEYS))
    if args.log and not args.log.exists():
        write_log_header(args.log)
    result = train_loop(index, mcfg, tcfg, _seed(args, values), dtype, args.log, args.out)
    for s in result.history:
        print(f"epoch {s.epoch} lr {s.lr:.3g} loss {s.mean_loss:.6f} active {s.active_fraction:.3f}")
    return 0


def _cmd_extract(args, values):
    dtype, _ = _dtype(args, values)
    model = load_checkpoint(args.checkpoint, dtype)
    db, failures = extract_all(load_index(args.index), model, args.points)
    save_db(db, args.out)
    print(f"wrote {len(db)} descriptors to {args.out}")
    for f in failures:
        print(f"failed: id {f.id} {f.path}: {f.error}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_index(args, values):
    index = load_index(args.index)
    pos, neg = index.masks()
    bad = 0
    for rec in index.records:
        try:
            load_frame(rec.path)
        except (OSError, ValueError) as exc:
            bad += 1
            print(f"invalid: id {rec.id} {rec.path}: {exc}", file=sys.stderr)
    with_pos = int(pos.any(1).sum()) if len(index) else 0
    print(f"records {len(index)}, with positives {with_pos}, invalid frames {bad}")
    return 1 if bad else 0


def _cmd_eval(args, values):
    report = recall(load_db(args.query_db), load_db(args.ref_db), args.radius)
    print(f"AR@1 {report.ar_at_1:.4f}  AR@1% {report.ar_at_1pct:.4f}  "
          f"queries {report.n_queries} (excluded {report.n_excluded})  refs {report.n_refs}")
    if args.report:
        args.report.write_text(json.dumps(report.to_dict()) + "\n")
    return 0


def _cmd_stress(args, values):
    dtype, _ = _dtype(args, values)
    model = _model(args, values, dtype)
    refs = load_db(args.ref_db) if args.ref_db else None
    rep = rotation_stress(load_index(args.index), model, args.mode, args.trials,
                          _seed(args, values), refs, args.points, report_path=args.report)
    print(f"mode {rep.mode} trials {rep.trials} max relative deviation "
          f"{rep.max_relative_deviation:.3e}")
    if rep.ar_at_1_deltas:
        print(f"max |AR@1 delta| {max(map(abs, rep.ar_at_1_deltas)):.4f}  "
              f"rankings changed in {sum(rep.rankings_changed)} trials")
    return 0


def _cmd_check(args, values):
    _, prec = _dtype(args, values)
    targets = args.target or sorted(TARGETS)
    ok = True
    rows = []
    for name in targets:
        rep = check_equivariance(name, args.trials, prec, _seed(args, values))
        ok &= rep.passed
        rows.append(json.dumps({"target": name, "kind": rep.kind, "precision": prec,
                                "trials": rep.trials, "max_residual": rep.max_residual,
                                "tolerance": rep.tolerance, "passed": rep.passed}))
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:20s} {rep.kind:12s} "
              f"max residual {rep.max_residual:.3e} (tol {rep.tolerance:g})")
    if args.report:
        args.report.write_text("".join(r + "\n" for r in rows))
    return 0 if ok else 1


def _cmd_dump(args, values):
    dtype, _ = _dtype(args, values)
    model = _model(args, values, dtype)
    rows = dump_features(load_frame(args.frame), model, args.stage, args.out)
    print(f"wrote {rows.shape[0]}x{rows.shape[1]} {args.stage} features to {args.out}")
    return 0


def _cmd_params(args, values):
    model = init_params(ModelConfig.from_mapping(_pick(values, MODEL_KEYS)), _seed(args, values))
    print(param_report(model))
    return 0


COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "extract": _cmd_extract, "index": _cmd_index,
            "eval": _cmd_eval, "stress": _cmd_stress, "check": _cmd_check, "dump": _cmd_dump,
            "params": _cmd_params}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        values = _settings(args)
        return COMMANDS[args.command](args, values)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (FormatError, ValidationError, ValueError, KeyError, OSError,
            NotImplementedError) as exc:
        print(f"vninet: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
