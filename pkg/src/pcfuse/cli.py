"""Command-line entry point: ``pcfuse <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 non-finite training loss.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .geometry import GeometryError, load_cloud, normalize_unit, read_obj
from .numerics import CheckpointError, ShapeError
from .render import RenderError, read_views, render_views, write_views
from .synth import build_corpus

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NAN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    if getattr(args, "no_fusion", False):
        cfg.fusion = False
    if getattr(args, "corpus", None):
        cfg.corpus = args.corpus
    return cfg


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_gen(args) -> int:
    cfg = _config(args)
    root = build_corpus(cfg.gen, args.out or cfg.corpus)
    print(root)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    man = pipeline.train_completion(cfg, args.out, log=_log)
    print(json.dumps({"final_loss": man["epoch_loss"][-1], "test_aggregate": man.get("test_aggregate")},
                     sort_keys=True))
    return EXIT_OK


def cmd_train_denoiser(args) -> int:
    cfg = _config(args)
    man = pipeline.train_denoiser(cfg, args.out, log=_log)
    print(json.dumps({"final_loss": man["epoch_loss"][-1], "held_out": man["held_out"]}, sort_keys=True))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    override = _config(args).model_config() if args.config else None
    model = pipeline.load_model(args.checkpoint, "completion", override)
    views = read_views(_view_paths(args.views)) if args.views else None
    partial = load_cloud(args.input)
    t0 = time.perf_counter()
    dense = pipeline.reconstruct(model, partial, views)
    if args.denoise:
        den = pipeline.load_model(args.denoise, "denoiser")
        dense = pipeline.denoise_cloud(den, dense, _config(args).schedule)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    pipeline.write_cloud(out, dense)
    out.with_suffix(".json").write_text(json.dumps(
        {"input": str(args.input), "checkpoint": str(args.checkpoint), "denoised": bool(args.denoise),
         "points": int(dense.shape[0]), "wall_clock_s": elapsed}, indent=1, sort_keys=True))
    print(out)
    return EXIT_OK


def _view_paths(spec: str) -> list[Path]:
    p = Path(spec)
    if p.is_dir():
        return [p / f"view_{a}.pgm" for a in "xyz"]
    parts = [Path(s) for s in spec.split(",")]
    if len(parts) != 3:
        raise UsageError("--views takes a directory or three comma-separated PGM paths")
    return parts


def cmd_denoise(args) -> int:
    model = pipeline.load_model(args.checkpoint, "denoiser")
    cloud = load_cloud(args.input)
    pipeline.write_cloud(args.out, pipeline.denoise_cloud(model, cloud, _config(args).schedule))
    print(args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if (args.checkpoint is None) == (args.baseline is None):
        raise UsageError("eval needs exactly one of --checkpoint or --baseline")
    agg = pipeline.evaluate(cfg, args.out, args.checkpoint, args.baseline)
    print(json.dumps(agg, sort_keys=True))
    return EXIT_OK


def cmd_render(args) -> int:
    path = Path(args.input)
    if path.suffix.lower() == ".obj":
        verts, faces = read_obj(path)
        geom = verts
    else:
        geom, faces = load_cloud(path).points, None
    if args.normalize:
        cloud, rec = normalize_unit(geom)
        geom = cloud.points
    views = render_views(geom, args.resolution, args.splat_radius, faces=faces)
    for p in write_views(args.out, views):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pcfuse", description="point-cloud completion with multi-view fusion")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", help="output path")
        return p

    add("gen", cmd_gen, "generate the synthetic corpus")
    p = add("train", cmd_train, "train the completion model")
    p.add_argument("--corpus")
    p.add_argument("--no-fusion", action="store_true", help="train the point-only model")
    add("train-denoiser", cmd_train_denoiser, "train the score denoiser")
    p = add("reconstruct", cmd_reconstruct, "complete one partial cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--views", help="directory with view_{x,y,z}.pgm or three comma-separated paths")
    p.add_argument("--denoise", metavar="DENOISER_CKPT", help="refine the output with a denoiser")
    p = add("denoise", cmd_denoise, "denoise one cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p = add("eval", cmd_eval, "evaluate a checkpoint or a baseline on the test split")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=["copy-partial", "ground-truth"])
    p = add("render", cmd_render, "render the three orthographic views")
    p.add_argument("--input", required=True)
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--splat-radius", type=float, default=2.0)
    p.add_argument("--normalize", action="store_true", help="normalize the input first")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    needs_out = args.command in ("reconstruct", "denoise", "eval", "render")
    if needs_out and not args.out:
        _log(f"pcfuse {args.command}: --out is required")
        return EXIT_USAGE
    try:
        return args.fn(args)
    except UsageError as exc:
        _log(f"error: {exc}")
        return EXIT_USAGE
    except pipeline.NumericError as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NAN
    except (FileNotFoundError, ConfigError, GeometryError, RenderError, CheckpointError, ShapeError,
            OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
