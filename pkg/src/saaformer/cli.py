"""Command line: ``saaformer {gen,split,train,eval,audit,map,replay}``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 constraint
violation. Failures print one line to stderr::

    saaformer: error code=<n> kind=<usage|format|constraint>: <message>

Each command that writes an artifact also writes ``<artifact>.manifest.json``
holding the fully resolved arguments; ``saaformer replay <manifest>`` re-runs it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataflow import (
    block_split,
    bucket_counts,
    extract_patches,
    generate_synthetic,
    overlap_rates,
    random_split,
    read_cube,
    read_split,
    write_cube,
    write_split,
)
from .errors import ConstraintError, FormatError
from .metrics import ConfusionMatrix, bucketed_accuracy, report
from .model import (
    SaaFormerConfig,
    TrainConfig,
    default_levels,
    load_checkpoint,
    predict,
    predict_map,
    save_checkpoint,
    train,
)

EXIT_USAGE, EXIT_FORMAT, EXIT_CONSTRAINT = 1, 2, 3

# 16 distinct colors for classes 1..16 (wrapping beyond); unlabeled pixels are black
PALETTE = np.array(
    [
        (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
        (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
        (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
        (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    ],
    dtype=np.uint8,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _manifest(args, argv: list[str], outputs: dict) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    inputs = {k: resolved[k] for k in ("data", "split", "ckpt") if resolved.get(k) is not None}
    manifest = {
        "command": args.command,
        "config": resolved,
        "seed": resolved.get("seed"),
        "inputs": inputs,
        "outputs": outputs,
        "argv": argv,
        "version": __version__,
    }
    primary = next(iter(outputs.values()))
    _dump(f"{primary}.manifest.json", manifest)


def _levels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}") from None


def _resolved_argv(args, skip=("command", "func", "verbose")) -> list[str]:
    argv = [args.command]
    for key, value in sorted(vars(args).items()):
        if key in skip or value is None:
            continue
        flag = "--" + key.replace("_", "-")
        if isinstance(value, bool):
            if value:
                argv.append(flag)
        elif isinstance(value, (tuple, list)):
            argv += [flag, ",".join(str(v) for v in value)]
        else:
            argv += [flag, str(value)]
    return argv


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> None:
    cube = generate_synthetic(args.height, args.width, args.bands, args.classes, args.tile, args.noise, args.seed)
    write_cube(args.out, cube)
    _manifest(args, _resolved_argv(args), {"cube": args.out})


def cmd_split(args) -> None:
    cube = read_cube(args.data)
    if cube.labels is None:
        raise ConstraintError(f"{args.data} has no labels to split")
    if args.mode == "random":
        split = random_split(cube.labels, args.train_frac, args.patch, args.seed)
    else:
        gap = args.patch - 1 if args.gap is None else args.gap
        args.gap = gap
        split = block_split(cube.labels, args.block, gap, args.patch, args.seed, args.stride)
    write_split(args.out, split)
    _manifest(args, _resolved_argv(args), {"split": args.out})


def _load_pair(args):
    cube = read_cube(args.data)
    if cube.labels is None:
        raise ConstraintError(f"{args.data} has no labels")
    split = read_split(args.split)
    split.validate(cube.labels)
    return cube, split


def cmd_train(args) -> None:
    cube, split = _load_pair(args)
    levels = args.levels if args.levels is not None else default_levels(args.embed)
    if args.multi_level == "off":
        levels = (args.embed,)
    args.levels = levels
    cfg = SaaFormerConfig(
        in_bands=cube.shape[2], classes=cube.n_classes, embed=args.embed, heads=args.heads,
        depth=args.depth, levels=levels, patch=split.patch, dropout=args.dropout,
    )
    tcfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr, seed=args.seed)
    result = train(cube, split, cfg, tcfg)
    save_checkpoint(args.out, result.params, cfg)
    trace_path = args.trace or f"{args.out}.trace.json"
    args.trace = trace_path
    _dump(trace_path, {"config": cfg.to_dict(), "trace": result.trace()})
    _manifest(args, _resolved_argv(args), {"checkpoint": args.out, "trace": trace_path})


def cmd_eval(args) -> None:
    cube, split = _load_pair(args)
    params, cfg = load_checkpoint(args.ckpt)
    if cfg.patch != split.patch:
        raise ConstraintError(f"checkpoint patch {cfg.patch} != split patch {split.patch}")
    centers = np.asarray(split.test)
    truth = cube.labels[centers[:, 0], centers[:, 1]].astype(np.int64)
    pred = predict(extract_patches(cube.values, centers, cfg.patch), params, cfg)
    cm = ConfusionMatrix.from_pairs(truth, pred, max(cfg.classes, cube.n_classes))
    buckets = None
    if args.audit_overlap:
        buckets = bucketed_accuracy(truth, pred, overlap_rates(split.test, split.train, split.patch))
    out = report(cm, buckets)
    majority = np.bincount(truth).max() / len(truth)
    out["majority_baseline"] = float(majority)
    _dump(args.report, out)
    _manifest(args, _resolved_argv(args), {"report": args.report})


def audit_report(split, patch: int) -> dict:
    rates = overlap_rates(split.test, split.train, patch)
    counts = bucket_counts(rates)
    n = len(rates)
    return {
        "patch": patch,
        "mode": split.mode,
        "test_samples": n,
        "train_samples": len(split.train),
        "buckets": counts,
        "fractions": {k: (v / n if n else None) for k, v in counts.items()},
        "bucket_edges": {"none": "r == 0", "partial": "0 < r <= 0.5", "high": "r > 0.5"},
        "mean_overlap": float(rates.mean()) if n else None,
    }


def cmd_audit(args) -> None:
    cube = read_cube(args.data)
    split = read_split(args.split)
    if cube.labels is not None:
        split.validate(cube.labels)
    patch = split.patch if args.patch is None else args.patch
    if patch % 2 == 0:
        raise UsageError("--patch must be odd")
    rep = audit_report(split, patch)
    if args.out:
        _dump(args.out, rep)
        _manifest(args, _resolved_argv(args), {"report": args.out})
    else:
        print(json.dumps(rep, sort_keys=True, indent=2))


def map_to_ppm(labels: np.ndarray) -> bytes:
    h, w = labels.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    mask = labels > 0
    rgb[mask] = PALETTE[(labels[mask].astype(np.int64) - 1) % len(PALETTE)]
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def cmd_map(args) -> None:
    cube = read_cube(args.data)
    params, cfg = load_checkpoint(args.ckpt)
    if cube.shape[2] != cfg.in_bands:
        raise ConstraintError(f"cube has {cube.shape[2]} bands, checkpoint expects {cfg.in_bands}")
    Path(args.out).write_bytes(map_to_ppm(predict_map(cube, params, cfg)))
    _manifest(args, _resolved_argv(args), {"map": args.out})


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        argv = manifest["argv"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{args.manifest}: unreadable manifest ({exc})") from None
    return main(argv)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saaformer", description="Axial aggregation transformer for hyperspectral cubes")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic labeled cube")
    g.add_argument("--height", type=int, default=48)
    g.add_argument("--width", type=int, default=48)
    g.add_argument("--bands", type=int, default=32)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--tile", type=int, default=12)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="draw a random or block-wise train/test split")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("random", "block"), default="block")
    s.add_argument("--train-frac", type=float, default=0.05)
    s.add_argument("--block", type=int, default=12)
    s.add_argument("--gap", type=int, default=None, help="default: patch - 1")
    s.add_argument("--stride", type=int, default=4, help="every stride-th tile is training territory")
    s.add_argument("--patch", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--split", required=True)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--lr", type=float, default=5e-4)
    t.add_argument("--embed", type=int, default=128)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--levels", type=_levels, default=None, help="default: embed, embed/2, embed/4")
    t.add_argument("--multi-level", choices=("on", "off"), default="on")
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--trace", default=None, help="default: <out>.trace.json")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the split's test centers")
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--audit-overlap", action="store_true", help="add per-overlap-bucket accuracy")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="histogram of test-window overlap with training windows")
    a.add_argument("--data", required=True)
    a.add_argument("--split", required=True)
    a.add_argument("--patch", type=int, default=None, help="default: the split's patch")
    a.add_argument("--out", default=None, help="default: print to stdout")
    a.set_defaults(func=cmd_audit)

    m = sub.add_parser("map", help="write a classification map as binary PPM")
    m.add_argument("--data", required=True)
    m.add_argument("--ckpt", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_map)

    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def _fail(code: int, kind: str, message: str) -> int:
    line = " ".join(str(message).split())
    print(f"saaformer: error code={code} kind={kind}: {line}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        code = args.func(args) or 0
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except ConstraintError as exc:
        return _fail(EXIT_CONSTRAINT, "constraint", exc)
    except (FormatError, OSError) as exc:
        return _fail(EXIT_FORMAT, "format", exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
