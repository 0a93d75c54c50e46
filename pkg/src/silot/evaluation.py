"""Turning model rollouts and baseline outputs into tracking reports."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .baseline import conncomp_track
from .core import VideoSample
from .metrics import (Detection, MotaStats, TrackSet, average_precision, clear_mot,
                      count_abs_error)
from .model import FrameSource, RolloutTrace, Silot

ROLLOUT_CONTEXT = 3  # frames seen by the full model before the prior takes over
RETIRE_AFTER = 2     # consecutive low-pres frames after which a track id is retired


def trace_to_tracks(trace: RolloutTrace, b: int, threshold: float = 0.5) -> TrackSet:
    """Detections of video ``b``: rows with pres above ``threshold``.

    Row ids from the rollout become track ids, except that a row whose pres stayed
    at or below the threshold for RETIRE_AFTER consecutive frames gets a fresh id
    if it comes back.
    """
    display: dict[int, int] = {}
    low: dict[int, int] = {}
    next_id = 0
    frames = []
    for step in trace.steps:
        pres = step.selected.pres[b].detach().cpu().numpy()
        where = step.selected.where[b].detach().cpu().numpy()
        dets = []
        for k, rid in enumerate(step.ids[b]):
            rid = int(rid)
            if pres[k] > threshold:
                if rid not in display or low.get(rid, 0) >= RETIRE_AFTER:
                    display[rid] = next_id
                    next_id += 1
                low[rid] = 0
                dets.append(Detection(display[rid], tuple(float(v) for v in where[k]), float(pres[k])))
            else:
                low[rid] = low.get(rid, 0) + 1
        frames.append(dets)
    return TrackSet(frames)


def gt_tracks(video: VideoSample) -> TrackSet:
    return TrackSet.from_tracks(video.tracks, video.frames.shape[0])


def _batches(videos: Sequence[VideoSample], size: int):
    for i in range(0, len(videos), size):
        yield videos[i:i + size]


def run_model(model: Silot, videos: Sequence[VideoSample], *, prior_from: int | None = None,
              batch_size: int = 32, threshold: float | None = None, keep_traces: bool = False):
    """Mean-mode rollouts. Returns (track sets, frame-read counts per t, traces)."""
    threshold = model.config.report_pres_threshold if threshold is None else threshold
    model.eval()
    preds, traces = [], []
    reads = None
    with torch.no_grad():
        for chunk in _batches(list(videos), batch_size):
            src = FrameSource(torch.stack([v.float_frames() for v in chunk]))
            trace = model.run_video(src, mode="mean", prior_from=prior_from)
            reads = src.reads if reads is None else [a + b for a, b in zip(reads, src.reads)]
            preds += [trace_to_tracks(trace, b, threshold) for b in range(len(chunk))]
            if keep_traces:
                traces.append(trace)
    return preds, reads or [], traces


def _summary(preds: list[TrackSet], gts: list[TrackSet]) -> tuple[dict, MotaStats]:
    stats = MotaStats()
    pred_counts, gt_counts = [], []
    for p, g in zip(preds, gts):
        stats = stats + clear_mot(p, g)
        pred_counts += p.counts()
        gt_counts += g.counts()
    row = stats.as_dict()
    row["ap"] = average_precision(preds, gts)
    row["count_abs_error"] = count_abs_error(pred_counts, gt_counts)
    row["n_videos"] = len(preds)
    return row, stats


def score(preds: list[TrackSet], videos: Sequence[VideoSample], *, frames: Sequence[int] | None = None,
          name: str = "model", mode: str = "posterior") -> dict:
    """Bucketed MOTA / AP / count error report. Only ``frames`` are scored."""
    if len(preds) != len(videos):
        raise ValueError("one prediction per video required")
    if not videos:
        raise ValueError("no videos to score")
    T = videos[0].frames.shape[0]
    frames = list(range(T)) if frames is None else sorted(frames)
    gts = [gt_tracks(v).subset(frames) for v in videos]
    preds = [p.subset(frames) for p in preds]
    overall, stats = _summary(preds, gts)
    per_frame = {t: {"t": t, "gt": 0, "matches": 0, "fp": 0, "fn": 0, "id_switches": 0}
                 for t in frames}
    for f in stats.per_frame:
        row = per_frame[frames[f["t"]]]
        for key in ("gt", "matches", "fp", "fn", "id_switches"):
            row[key] += f[key]
    buckets = []
    for n in sorted({v.n_objects for v in videos}):
        sel = [i for i, v in enumerate(videos) if v.n_objects == n]
        row, _ = _summary([preds[i] for i in sel], [gts[i] for i in sel])
        buckets.append({"n_objects": n, **row})
    return {"model": name, "mode": mode, "n_videos": len(videos), "frames_scored": frames,
            "frames_excluded": [t for t in range(T) if t not in frames],
            "overall": overall, "buckets": buckets, "per_frame": list(per_frame.values())}


def evaluate_model(model: Silot, videos: Sequence[VideoSample], *, batch_size: int = 32,
                   name: str = "silot") -> dict:
    preds, reads, _ = run_model(model, videos, batch_size=batch_size)
    report = score(preds, videos, name=name, mode="posterior")
    report["frame_reads"] = reads
    return report


def prior_rollout_eval(model: Silot, videos: Sequence[VideoSample], *, batch_size: int = 32,
                       name: str = "silot") -> dict:
    """Full model on the first frames, then the frame-free prior; scores the rest."""
    T = videos[0].frames.shape[0]
    if T <= ROLLOUT_CONTEXT:
        raise ValueError(f"prior rollout needs more than {ROLLOUT_CONTEXT} frames")
    preds, reads, _ = run_model(model, videos, prior_from=ROLLOUT_CONTEXT, batch_size=batch_size)
    report = score(preds, videos, frames=range(ROLLOUT_CONTEXT, T), name=name, mode="prior-rollout")
    report["frame_reads"] = reads
    return report


def evaluate_conncomp(videos: Sequence[VideoSample], *, frames=None) -> dict:
    preds = [conncomp_track(np.asarray(v.frames)) for v in videos]
    return score(preds, videos, frames=frames, name="conncomp", mode="baseline")


# ---------------------------------------------------------------- export

REPORT_COLUMNS = ("model", "mode", "n_objects", "n_videos", "mota", "ap", "count_abs_error",
                  "gt", "fp", "fn", "id_switches", "matches")


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def report_rows(report: dict) -> list[dict]:
    rows = [{"model": report["model"], "mode": report["mode"], **b} for b in report["buckets"]]
    rows.append({"model": report["model"], "mode": report["mode"], "n_objects": "all",
                 **report["overall"]})
    return rows


def write_report(report: dict | list[dict], out_dir, stem: str = "report") -> dict[str, Path]:
    """Write JSON and CSV (one row per model and object-count bucket)."""
    reports = [report] if isinstance(report, dict) else list(report)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / f"{stem}.json", "csv": out / f"{stem}.csv"}
    payload = reports[0] if len(reports) == 1 else {"reports": reports}
    paths["json"].write_text(json.dumps(_clean(payload), indent=1))
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in reports:
            writer.writerows(report_rows(r))
    return paths


def export_trace(trace: RolloutTrace, b: int = 0, threshold: float = 0.5) -> list[dict]:
    """Per-frame boxes, ids and pres of video ``b`` for visualisation."""
    out = []
    for t, step in enumerate(trace.steps):
        pres = step.selected.pres[b].detach().cpu().numpy()
        where = step.selected.where[b].detach().cpu().numpy()
        objs = [{"row": k, "id": int(step.ids[b, k]), "pres": float(pres[k]),
                 "box": [float(v) for v in where[k]],
                 "discovered": bool(step.discovered_mask[b, k])}
                for k in range(len(pres)) if pres[k] > threshold]
        out.append({"t": t, "prior": step.prior, "objects": objs})
    return out
