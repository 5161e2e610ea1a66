"""Command-line entry point: gen-data, train, infer, eval, ablate, verify."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import tensorio
from .attention import inject_causal_fault
from .decoder import DecoderWeights, ModelConfig, check_geometry, forward_window
from .errors import ConfigError, DataIOError, DatasetError, NumericError, TrajmapError
from .metrics import EvalProtocol, evaluate, oracle_predictor, parse_settings
from .refinement import cache_memory_report, extend, forward_window_cached
from .synthscene import SceneSpec, generate_dataset, load_clip, load_split
from .tokenization import Frame
from .training import SCHEDULES, STYLE_A, STYLE_B, TrainConfig, ablation_run, model_predictor, train

log = logging.getLogger("trajmap")

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_DATASET = range(7)
FAULTS = {"trajectory-causality": inject_causal_fault}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------------
# config files


def read_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines with ``#`` comments; keys may use '-' or '_'."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv: Sequence[str]):
    """Parse once to find --config, install file values as defaults, parse again."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in values.items():
            if k not in actions or k in ("help", "config"):
                raise ConfigError(f"unknown config key {k!r} for {args.command}")
            act = actions[k]
            if isinstance(act, argparse._StoreTrueAction):
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    defaults[k] = act.type(v) if act.type else v
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"config key {k}: bad value {v!r}") from exc
                if act.choices and defaults[k] not in act.choices:
                    raise ConfigError(f"config key {k}: {v!r} not in {list(act.choices)}")
            act.required = False
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def effective_lines(args: argparse.Namespace) -> list[str]:
    return [f"{k} = {v}" for k, v in sorted(vars(args).items()) if k not in ("func",)]


def _echo(args: argparse.Namespace, out_dir: Path | None = None) -> None:
    lines = effective_lines(args)
    for line in lines:
        log.info("config %s", line)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "run.log").write_text("".join(line + "\n" for line in lines))
        except OSError as exc:
            raise DataIOError(f"cannot write run log in {out_dir}: {exc}") from exc


# ----------------------------------------------------------------------------
# commands


def _model_config(args) -> ModelConfig:
    return ModelConfig(height=args.height, width=args.width, patch=args.patch, dim=args.dim,
                       heads=args.heads, depth=args.depth)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _echo(args)
    spec = SceneSpec(seed=args.seed, n_objects=args.objects, frames=args.frames, height=args.height,
                     width=args.width, style=args.style)
    files = generate_dataset(spec, args.clips, args.split, out)
    log.info("wrote %d files under %s", len(files), out)
    return EXIT_OK


def _schedule(name: str) -> str:
    return name.replace("-", "_")


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, clips_per_epoch=args.clips_per_epoch, batch_size=args.batch_size,
                       learning_rate=args.lr, weight_decay=args.weight_decay, schedule=_schedule(args.schedule),
                       switch_epoch=args.switch_epoch, window=args.window, seed=args.seed,
                       val_clips=args.val_clips)


def _datasets(args) -> dict[str, list]:
    sets = {}
    if args.data_a:
        sets[STYLE_A] = load_split(args.data_a, "train")
    if args.data_b:
        sets[STYLE_B] = load_split(args.data_b, "train")
    return sets


def cmd_train(args) -> int:
    out = Path(args.out)
    _echo(args, out)
    config = _train_config(args)
    datasets = _datasets(args)
    if config.epochs > 0 and not datasets:
        raise DatasetError("training needs --data-a and/or --data-b")
    val = load_split(args.val, "val", args.val_clips) if args.val else []
    model_cfg = _model_config(args)

    def run(dtype):
        weights = DecoderWeights.init(model_cfg, seed=args.seed, dtype=dtype)
        if args.freeze_layerscale:
            weights.freeze_layerscale()
        with nx.precision(dtype):
            return train(config, datasets, weights, val, out)

    try:
        result = run(np.float32)
    except NumericError as exc:
        # one retry in double precision before giving up
        log.warning("non-finite values (%s); retrying in float64", exc)
        result = run(np.float64)
    for entry in result.log:
        print(entry.line())
    return EXIT_OK


def _clip_frames(clip, start: int, stride: int, count: int) -> list[Frame]:
    idx = [start + k * stride for k in range(count)]
    if idx[-1] >= len(clip):
        raise DatasetError(f"frames {idx} exceed the clip's {len(clip)} frames")
    return [Frame(clip.frames[i], i) for i in idx]


def write_ply(path: Path, points: np.ndarray, colors: np.ndarray) -> None:
    pts = points.reshape(-1, 3).astype(np.float32)
    rgb = np.clip(np.round(colors.reshape(-1, 3) * 255.0), 0, 255).astype(np.uint8)
    header = ("ply\nformat ascii 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n")
    body = "".join(f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}\n"
                   for p, c in zip(pts.tolist(), rgb.tolist()))
    try:
        path.write_text(header + body)
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def cmd_infer(args) -> int:
    out = Path(args.out)
    _echo(args, out)
    weights = DecoderWeights.load(args.checkpoint)
    clip = load_clip(args.clip)
    frames = _clip_frames(clip, args.start, args.stride, args.window + args.extend)
    check_geometry(weights, frames)
    with nx.precision(weights.dtype):
        pairs, cache = forward_window_cached(frames[:args.window], weights)
        for f in frames[args.window:]:
            new, cache = extend(cache, f, weights)
            pairs.update(new)
    colors = {f.frame_index: f.pixels for f in frames}
    for (i, j), pm in sorted(pairs.items()):
        tensorio.save_tensor(out / f"X_{i}_{j}.mmpt", np.asarray(pm.ego))
        tensorio.save_tensor(out / f"Y_{j}_{i}.mmpt", np.asarray(pm.target))
        if args.ply:
            ply = Path(args.ply)
            ply.mkdir(parents=True, exist_ok=True)
            write_ply(ply / f"X_{i}_{j}.ply", pm.ego, colors[i])
            write_ply(ply / f"Y_{j}_{i}.ply", pm.target, colors[j])
    log.info("wrote %d pointmap pairs to %s", len(pairs), out)
    if args.dump_cache_stats:
        text = cache_memory_report(cache).to_text()
        (out / "cache_stats.txt").write_text(text)
        sys.stdout.write(text)
    return EXIT_OK


def _protocol(args) -> EvalProtocol:
    return EvalProtocol(slice_length=args.slice_len, settings=parse_settings(args.settings),
                        slice_step=args.slice_step)


def cmd_eval(args) -> int:
    _echo(args)
    protocol = _protocol(args)
    clips = load_split(args.data, args.split, args.limit)
    if args.oracle:
        predict = oracle_predictor()
        name = "oracle"
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --oracle")
        weights = DecoderWeights.load(args.checkpoint)
        if clips:
            check_geometry(weights, [Frame(clips[0].frames[0], 0)])
        predict = model_predictor(weights, args.mode)
        name = args.name
    report = evaluate(predict, clips, protocol, name)
    print(report.table())
    for line in report.machine_lines():
        print(line)
    return EXIT_OK


def cmd_ablate(args) -> int:
    out = Path(args.out) if args.out else None
    _echo(args, out)
    config = _train_config(args)
    datasets = _datasets(args)
    test = load_split(args.test, "test", args.test_clips)
    val = load_split(args.val, "val", args.val_clips) if args.val else []
    result = ablation_run(config, _model_config(args), datasets, test, _protocol(args), val, init_seed=args.seed)
    print(result.table())
    if out is not None:
        (out / "ablation.txt").write_text(result.table() + "\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    _echo(args)
    fault = FAULTS[args.inject_fault]() if args.inject_fault else contextlib.nullcontext()
    with fault:
        results = run_suite(seed=args.seed, fast=args.fast, stop_on_failure=True)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"invariant failed: {failed[0].name}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--patch", type=int, default=8)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--depth", type=int, default=4)


def _train_flags(p):
    p.add_argument("--data-a", help="style-A (synthetic stand-in) dataset root")
    p.add_argument("--data-b", help="style-B (real stand-in) dataset root")
    p.add_argument("--val", help="dataset root with a val split")
    p.add_argument("--val-clips", type=int, default=None)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--clips-per-epoch", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--schedule", default="real-then-synthetic",
                   choices=[s.replace("_", "-") for s in SCHEDULES] + list(SCHEDULES))
    p.add_argument("--switch-epoch", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    _model_flags(p)


def _protocol_flags(p):
    p.add_argument("--slice-len", type=int, default=12)
    p.add_argument("--settings", default="2:6,4:3,6:2")
    p.add_argument("--slice-step", type=int, default=6)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = _Parser(prog="trajmap", description="Multi-frame pointmap decoder toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sp = {}

    p = sp["gen-data"] = subs.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--style", choices=["flat", "textured"], default="flat")
    p.add_argument("--split", choices=["train", "val", "test"], default="train")
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sp["train"] = subs.add_parser("train", help="train a decoder")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-layerscale", action="store_true", help="pairwise baseline")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sp["infer"] = subs.add_parser("infer", help="decode a window and optionally extend it")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip directory")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--extend", type=int, default=0)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--ply", help="directory for ASCII PLY exports")
    p.add_argument("--dump-cache-stats", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sp["eval"] = subs.add_parser("eval", help="strided multi-window evaluation")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", help="score ground truth (protocol check)")
    p.add_argument("--mode", choices=["trajectory", "pairwise"], default="trajectory")
    p.add_argument("--name", default="synthetic")
    _protocol_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sp["ablate"] = subs.add_parser("ablate", help="frozen-layerscale baseline vs full model")
    p.add_argument("--config")
    p.add_argument("--test", required=True, help="dataset root with a test split")
    p.add_argument("--test-clips", type=int, default=None)
    p.add_argument("--out")
    _train_flags(p)
    _protocol_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sp["verify"] = subs.add_parser("verify", help="run the invariant suite")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fast", action="store_true")
    p.add_argument("--inject-fault", choices=sorted(FAULTS))
    p.set_defaults(func=cmd_verify)
    return parser, sp


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, subs[args.command], argv)
    except UsageError as exc:
        print(f"trajmap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrajmapError as exc:
        print(f"trajmap: error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TrajmapError as exc:
        print(f"trajmap: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"trajmap: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
