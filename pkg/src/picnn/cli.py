"""Command-line driver: ``picnn <command> [options]``.

stdout carries only JSON result lines; logs and diagnostics go to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import IdxFormatError, write_idx
from .harness import (KEY_ALIASES, RunConfig, ablate_sampler, build_model, demo_label_leak, load_data,
                      run_experiment, sweep_lambda)
from .metrics import evaluate
from .model import PICNN
from .viz import SUBSETS, export_heatmap, export_p_csv, export_p_heatmap, grad_cam

log = logging.getLogger("picnn")

NEEDS_CONFIG = {"train", "eval", "export-cam"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(d: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override in place; values are parsed as JSON when possible."""
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise UsageError(f"bad --set key {key!r}")
    parts[0] = KEY_ALIASES.get(parts[0], parts[0])
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"--set {key}: {p!r} is not a nested section")
        node = node[p]
    node[parts[-1]] = _parse_value(value)
    return d


def build_config(args) -> RunConfig:
    """Defaults <- PICNN_SEED <- --config file <- --set overrides <- --seed / --out."""
    d = RunConfig().to_dict()
    env_seed = os.environ.get("PICNN_SEED")
    if env_seed is not None:
        try:
            d["seed"] = int(env_seed)
        except ValueError:
            raise UsageError(f"PICNN_SEED must be an integer, got {env_seed!r}")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})")
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: expected a JSON object")
        loaded = {KEY_ALIASES.get(k, k): v for k, v in loaded.items()}
        data = {**d["data"], **loaded.pop("data", {})}
        d.update(loaded)
        d["data"] = data
    for assignment in args.set or []:
        apply_override(d, assignment)
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "out", None) and args.command in ("train", "sweep-lambda", "ablate-sampler", "demo-leak"):
        d["output_dir"] = args.out
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# ---------------------------------------------------------------- parser

def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON RunConfig file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field (dotted paths, e.g. data.noise_std=0.1)")
    common.add_argument("--seed", type=int, help="run seed (default: config, then $PICNN_SEED)")
    common.add_argument("--out", help="output directory (or file for export commands)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="picnn", description="Class-specific filter clustering experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    sub.add_parser("train", parents=[common], help="train one run and write its artifacts")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep-lambda", parents=[common], help="one run per lambda value")
    p.add_argument("--values", type=_floats, default=[0.0, 0.5, 2.0])
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--workers", type=int, default=1)

    for name, text in (("ablate-sampler", "Bernoulli vs Gumbel assignment"),
                       ("demo-leak", "true-label indexing vs pseudo-labels")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--seeds", type=_ints)
        p.add_argument("--workers", type=int, default=1)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic motif splits as IDX files")

    p = sub.add_parser("export-p", parents=[common], help="correspondence matrix P as PGM (and CSV)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--csv", help="also write P as CSV")

    p = sub.add_parser("export-cam", parents=[common], help="Grad-CAM heatmap for one test image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="test image index")
    p.add_argument("--class", dest="class_index", type=int, help="target class (default: true label)")
    p.add_argument("--subset", choices=SUBSETS, default="all")
    p.add_argument("--scale", type=int, default=1, help="pixel upscaling factor for the PGM")
    p.add_argument("--csv", help="also write raw normalised values as CSV")

    sub.add_parser("selftest", parents=[common], help="sampler frequency suite and gradient checks")
    return parser


# ---------------------------------------------------------------- commands

def emit(obj: dict):
    print(json.dumps(obj, sort_keys=True, default=float), flush=True)


def _run_line(result) -> dict:
    line = {"run_id": result.config.name(), "mode": result.config.mode, "lambda": result.config.lam,
            "seed": result.config.seed, "status": result.status}
    if result.metrics is not None:
        line.update(result.metrics.summary())
    if result.diagnostic:
        line["diagnostic"] = result.diagnostic
    return line


def cmd_train(args, config) -> int:
    result = run_experiment(config)
    line = _run_line(result)
    if config.output_dir:
        line["artifacts"] = str(Path(config.output_dir) / config.name())
    emit(line)
    if not result.ok:
        print(f"error: run diverged: {result.diagnostic}", file=sys.stderr)
        return 1
    return 0


def _restore(config, checkpoint) -> tuple[PICNN, object]:
    state = load_checkpoint(checkpoint)
    train, test = load_data(config.data, config.num_classes)
    model = build_model(config, train.images.shape[1:])
    model.load_state_dict(state)
    return model, test


def cmd_eval(args, config) -> int:
    model, test = _restore(config, args.checkpoint)
    report = evaluate(model, test, config.bins)
    emit({"checkpoint": str(args.checkpoint), **report.summary()})
    return 0


def _sweep_output(result) -> int:
    for r in result.runs:
        emit(_run_line(r))
    emit({"checks": result.checks})
    failed = [r.config.name() for r in result.runs if not r.ok]
    broken = [k for k, v in result.checks.items() if v is False]
    if failed:
        print(f"error: failed runs: {', '.join(failed)}", file=sys.stderr)
    if broken:
        print(f"error: trend checks not met: {', '.join(broken)}", file=sys.stderr)
    return 1 if failed or broken else 0


def cmd_sweep_lambda(args, config) -> int:
    return _sweep_output(sweep_lambda(config, args.values, args.seeds, args.workers))


def cmd_ablate(args, config) -> int:
    return _sweep_output(ablate_sampler(config, args.seeds, args.workers))


def cmd_demo_leak(args, config) -> int:
    return _sweep_output(demo_label_leak(config, args.seeds, args.workers))


def cmd_gen_data(args, config) -> int:
    if not args.out:
        raise UsageError("gen-data needs --out <dir>")
    if config.data.kind != "motifs":
        raise UsageError("gen-data only generates the synthetic motif task")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    data_cfg = replace(config.data, seed=args.seed) if args.seed is not None else config.data
    for ds in load_data(data_cfg, config.num_classes):
        img, lab = out / f"{ds.split}-images.idx", out / f"{ds.split}-labels.idx"
        write_idx(ds, img, lab)
        paths[f"{ds.split}_images"], paths[f"{ds.split}_labels"] = str(img), str(lab)
    emit(paths)
    return 0


def cmd_export_p(args, config) -> int:
    if not args.out:
        raise UsageError("export-p needs --out <file.pgm>")
    state = load_checkpoint(args.checkpoint)
    if "P.logits" not in state:
        raise CheckpointError(f"{args.checkpoint}: no P.logits entry")
    P = 1.0 / (1.0 + np.exp(-state["P.logits"].astype(np.float64)))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_p_heatmap(P, args.out)
    if args.csv:
        export_p_csv(P, args.csv)
    emit({"pgm": str(args.out), "csv": args.csv, "shape": list(P.shape)})
    return 0


def cmd_export_cam(args, config) -> int:
    if not args.out:
        raise UsageError("export-cam needs --out <file.pgm>")
    model, test = _restore(config, args.checkpoint)
    if not 0 <= args.index < len(test):
        raise UsageError(f"--index {args.index} outside test split of {len(test)}")
    c = int(test.labels[args.index]) if args.class_index is None else args.class_index
    if not 0 <= c < config.num_classes:
        raise UsageError(f"--class {c} outside 0..{config.num_classes - 1}")
    hm = grad_cam(model, test.images[args.index], c, args.subset)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_heatmap(hm, args.out, args.csv, args.scale)
    emit({"pgm": str(args.out), "csv": args.csv, "class": c, "subset": args.subset, "lo": hm.lo, "hi": hm.hi})
    return 0


def cmd_selftest(args, config) -> int:
    from .selftest import run_selftest

    seed = args.seed if args.seed is not None else 0
    report = run_selftest(seed)
    emit(report)
    ok = report["bernoulli_ok"] and report["categorical_ok"] and report["gradcheck_ok"]
    if not ok:
        print("error: selftest failed", file=sys.stderr)
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "sweep-lambda": cmd_sweep_lambda, "ablate-sampler": cmd_ablate,
    "demo-leak": cmd_demo_leak, "gen-data": cmd_gen_data, "export-p": cmd_export_p,
    "export-cam": cmd_export_cam, "selftest": cmd_selftest,
}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in NEEDS_CONFIG and not args.config:
            raise UsageError(f"{args.command} needs --config <file.json>")
        config = build_config(args)
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"picnn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, IdxFormatError, KeyError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
