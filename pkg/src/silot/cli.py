"""Command-line entry points: generate-data, train, eval, conncomp, viz."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import ConfigurationError


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message)


def _fail(kind: str, message: str, code: int = 2):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    raise SystemExit(code)


def _pair(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _range(text: str) -> tuple[int, int]:
    try:
        parts = [int(v) for v in text.split(":")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or not 1 <= parts[0] <= parts[1]:
        raise argparse.ArgumentTypeError("need 1 <= LO <= HI")
    return parts[0], parts[1]


def _buckets(text: str) -> list[int] | None:
    if text == "all":
        return None
    try:
        return sorted({int(v) for v in text.split(",")})
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'all' or a comma-separated list") from None


# ---------------------------------------------------------------- commands

def cmd_generate_data(args) -> Path:
    from .datagen import SceneConfig, generate_dataset, write_dataset
    cfg = SceneConfig(dataset=args.dataset, frame_size=args.size, T=args.T, n_min=args.n_objects[0],
                      n_max=args.n_objects[1], crop=args.crop, split=args.split)
    videos = generate_dataset(cfg, args.n_videos, args.seed, workers=args.workers,
                              bank_path=args.digits)
    out = write_dataset(args.out, videos, cfg, args.seed)
    print(json.dumps({"out": str(out), "n_videos": len(videos)}))
    return out


def _load_videos(path, limit=None):
    from .datagen import read_dataset
    videos = read_dataset(path).videos
    return videos[:limit] if limit else videos


def cmd_train(args) -> Path:
    from .core import ModelConfig
    from .training import train
    config = ModelConfig.load(args.config) if args.config else ModelConfig()
    if args.val_metric:
        config.train.val_metric = args.val_metric
    from .datagen import read_dataset
    data = read_dataset(args.data)
    val = _load_videos(args.val_data, args.val_videos) if args.val_data else None
    max_objects = max(v.n_objects for v in data.videos)
    config.check_capacity(max_objects)
    result = train(np.asarray(data.frames), config, steps=args.steps, seed=args.seed, val_set=val,
                   out_dir=args.out, resume=args.resume, log_every=args.log_every,
                   time_limit=args.time_limit)
    print(json.dumps({"out": str(args.out), "steps": result.steps, "best_step": result.best_step,
                      "best_metric": result.best_metric, "early_stops": result.early_stops}))
    return Path(args.out)


def _filter(videos, buckets):
    if buckets is None:
        return videos
    kept = [v for v in videos if v.n_objects in buckets]
    if not kept:
        raise CliError(f"no videos with object counts {buckets}")
    return kept


def cmd_eval(args) -> dict:
    from .evaluation import evaluate_conncomp, evaluate_model, prior_rollout_eval, write_report
    from .plotting import plot_metric_curves
    from .training import load_checkpoint
    model, _ = load_checkpoint(args.checkpoint)
    videos = _filter(_load_videos(args.data, args.limit), args.buckets)
    if args.mode == "prior-rollout":
        report = prior_rollout_eval(model, videos, batch_size=args.batch_size)
    else:
        report = evaluate_model(model, videos, batch_size=args.batch_size)
    reports = [report]
    if args.with_conncomp:
        reports.append(evaluate_conncomp(videos, frames=report["frames_scored"]))
    paths = write_report(reports, args.out)
    paths["figure"] = plot_metric_curves(reports, Path(args.out) / "metrics.png")
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return report


def cmd_conncomp(args) -> dict:
    from .evaluation import evaluate_conncomp, write_report
    from .plotting import plot_metric_curves
    videos = _filter(_load_videos(args.data, args.limit), args.buckets)
    report = evaluate_conncomp(videos)
    paths = write_report(report, args.out, stem="conncomp")
    paths["figure"] = plot_metric_curves([report], Path(args.out) / "conncomp.png")
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return report


def cmd_viz(args) -> Path:
    import torch
    from .evaluation import ROLLOUT_CONTEXT, export_trace
    from .plotting import plot_rollout_panels
    from .training import load_checkpoint
    model, _ = load_checkpoint(args.checkpoint, map_location="cpu")
    videos = _load_videos(args.data)
    if not 0 <= args.video < len(videos):
        raise CliError(f"video index {args.video} out of range (0..{len(videos) - 1})")
    video = videos[args.video]
    model.eval()
    with torch.no_grad():
        frames = video.float_frames()[None]
        prior_from = ROLLOUT_CONTEXT if args.mode == "prior-rollout" else None
        trace = model.run_video(frames, mode="mean", prior_from=prior_from)
        export = export_trace(trace, 0, model.config.report_pres_threshold)
        appearances = []
        for step, info in zip(trace.steps, export):
            beta, xi = model.renderer.appearance(step.selected.what[0])
            rows = [o["row"] for o in info["objects"]]
            appearances.append([(beta[k] * xi[k]).numpy() for k in rows])
    recon = np.stack([s.rendered[0].numpy() for s in trace.steps])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    T = frames.shape[1]
    gt = [[tr.boxes[t] for tr in video.tracks if t in tr.boxes] for t in range(T)]
    path = plot_rollout_panels(frames[0].numpy(), recon, export, out / f"video{args.video:05d}.png",
                               appearances=appearances, gt_boxes=gt)
    (out / f"video{args.video:05d}.json").write_text(json.dumps(export, indent=1))
    print(json.dumps({"figure": str(path)}))
    return path


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="silot", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="generate a Scattered MNIST / Shapes dataset")
    g.add_argument("--dataset", choices=("mnist", "shapes"), required=True)
    g.add_argument("--n-videos", type=int, required=True)
    g.add_argument("--n-objects", type=_range, default=(1, 6), metavar="LO:HI")
    g.add_argument("--size", type=_pair, default=(48, 48), metavar="HxW")
    g.add_argument("--crop", type=_pair, default=None, metavar="HxW")
    g.add_argument("--T", type=int, default=8)
    g.add_argument("--split", choices=("train", "val", "test"), default="train")
    g.add_argument("--digits", default=None, help=".npz with an 'images' array of 28x28 digits")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="JSON file of ModelConfig fields")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-metric", choices=("mota", "elbo"), default=None)
    t.add_argument("--val-data", default=None)
    t.add_argument("--val-videos", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--time-limit", type=float, default=None, help="seconds")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=("posterior", "prior-rollout"), default="posterior")
    e.add_argument("--buckets", type=_buckets, default=None, metavar="all|N,N,...")
    e.add_argument("--with-conncomp", action="store_true")
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("conncomp", help="score the connected-components baseline")
    c.add_argument("--data", required=True)
    c.add_argument("--buckets", type=_buckets, default=None, metavar="all|N,N,...")
    c.add_argument("--limit", type=int, default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_conncomp)

    v = sub.add_parser("viz", help="render annotated rollout panels")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--video", type=int, default=0)
    v.add_argument("--mode", choices=("posterior", "prior-rollout"), default="posterior")
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, CliError, ValueError, FileNotFoundError, KeyError) as exc:
        _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
