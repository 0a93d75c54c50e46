"""Tracking and detection metrics: IoU, Hungarian matching, MOTA, AP, count error.

Boxes everywhere are (y, x, h, w) with (y, x) the box centre.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class Detection:
    track_id: int
    box: tuple[float, float, float, float]
    confidence: float = 1.0


@dataclass
class TrackSet:
    """Per-frame detections of one video; at most one box per (track_id, frame)."""

    frames: list[list[Detection]]

    def __post_init__(self):
        for t, dets in enumerate(self.frames):
            ids = [d.track_id for d in dets]
            if len(ids) != len(set(ids)):
                raise ValueError(f"duplicate track id in frame {t}")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def counts(self) -> list[int]:
        return [len(d) for d in self.frames]

    def subset(self, frames: Sequence[int]) -> "TrackSet":
        return TrackSet([self.frames[t] for t in frames])

    @classmethod
    def from_tracks(cls, tracks, n_frames: int) -> "TrackSet":
        frames: list[list[Detection]] = [[] for _ in range(n_frames)]
        for tr in tracks:
            for t, box in tr.boxes.items():
                frames[t].append(Detection(tr.track_id, tuple(float(v) for v in box)))
        return cls(frames)


def iou(a, b) -> float:
    ay, ax, ah, aw = a
    by, bx, bh, bw = b
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    if ih <= 0 or iw <= 0:
        return 0.0
    inter = ih * iw
    return inter / (ah * aw + bh * bw - inter)


def iou_matrix(a: Sequence, b: Sequence) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    A = np.asarray(a, dtype=float)[:, None, :]
    B = np.asarray(b, dtype=float)[None, :, :]
    ih = np.minimum(A[..., 0] + A[..., 2] / 2, B[..., 0] + B[..., 2] / 2) - \
        np.maximum(A[..., 0] - A[..., 2] / 2, B[..., 0] - B[..., 2] / 2)
    iw = np.minimum(A[..., 1] + A[..., 3] / 2, B[..., 1] + B[..., 3] / 2) - \
        np.maximum(A[..., 1] - A[..., 3] / 2, B[..., 1] - B[..., 3] / 2)
    inter = np.clip(ih, 0, None) * np.clip(iw, 0, None)
    union = A[..., 2] * A[..., 3] + B[..., 2] * B[..., 3] - inter
    return inter / union


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost matching of maximal size; infinite entries are never matched."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    finite = np.isfinite(cost)
    if not finite.any():
        return []
    # a penalty larger than any finite matching makes the solver first maximise
    # the number of finite pairs, then minimise their cost
    span = np.abs(cost[finite]).max()
    big = (span + 1.0) * (min(cost.shape) + 1) * 2
    rows, cols = linear_sum_assignment(np.where(finite, cost, big))
    return [(int(r), int(c)) for r, c in zip(rows, cols) if finite[r, c]]


@dataclass
class MotaStats:
    gt: int = 0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    matches: int = 0
    per_frame: list[dict] = field(default_factory=list)

    @property
    def mota(self) -> float:
        if self.gt == 0:
            return math.nan
        return 1.0 - (self.fn + self.fp + self.idsw) / self.gt

    def __add__(self, other: "MotaStats") -> "MotaStats":
        return MotaStats(self.gt + other.gt, self.fp + other.fp, self.fn + other.fn,
                         self.idsw + other.idsw, self.matches + other.matches,
                         self.per_frame + other.per_frame)

    def as_dict(self) -> dict:
        return {"mota": self.mota, "gt": self.gt, "fp": self.fp, "fn": self.fn,
                "id_switches": self.idsw, "matches": self.matches}


def clear_mot(pred: TrackSet, gt: TrackSet, iou_thresh: float = 0.5) -> MotaStats:
    """CLEAR-MOT counts. Correspondences from the previous frame are kept while
    their IoU stays at or above the threshold; the rest are matched by Hungarian
    assignment on IoU. A switch is counted when a ground-truth track is matched to
    a different prediction than at its last match."""
    if pred.n_frames != gt.n_frames:
        raise ValueError("prediction and ground truth cover different numbers of frames")
    stats = MotaStats()
    last: dict[int, int] = {}
    for t in range(gt.n_frames):
        gts, preds = gt.frames[t], pred.frames[t]
        ious = iou_matrix([g.box for g in gts], [p.box for p in preds])
        g_index = {g.track_id: i for i, g in enumerate(gts)}
        p_index = {p.track_id: j for j, p in enumerate(preds)}
        pairs: list[tuple[int, int]] = []
        used_g, used_p = set(), set()
        for gid, pid in last.items():
            i, j = g_index.get(gid), p_index.get(pid)
            if i is not None and j is not None and j not in used_p and ious[i, j] >= iou_thresh:
                pairs.append((i, j))
                used_g.add(i)
                used_p.add(j)
        free_g = [i for i in range(len(gts)) if i not in used_g]
        free_p = [j for j in range(len(preds)) if j not in used_p]
        if free_g and free_p:
            sub = ious[np.ix_(free_g, free_p)]
            cost = np.where(sub >= iou_thresh, 1.0 - sub, np.inf)
            pairs += [(free_g[a], free_p[b]) for a, b in hungarian(cost)]
        switches = 0
        for i, j in pairs:
            gid, pid = gts[i].track_id, preds[j].track_id
            if gid in last and last[gid] != pid:
                switches += 1
            last[gid] = pid
        frame = {"t": t, "gt": len(gts), "matches": len(pairs), "fn": len(gts) - len(pairs),
                 "fp": len(preds) - len(pairs), "id_switches": switches}
        stats.gt += frame["gt"]
        stats.fn += frame["fn"]
        stats.fp += frame["fp"]
        stats.idsw += switches
        stats.matches += frame["matches"]
        stats.per_frame.append(frame)
    return stats


def mota(pred: TrackSet, gt: TrackSet, iou_thresh: float = 0.5) -> tuple[float, MotaStats]:
    """Returns (MOTA, diagnostics); MOTA is NaN when the ground truth is empty."""
    stats = clear_mot(pred, gt, iou_thresh)
    return stats.mota, stats


AP_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def _as_list(x) -> list[TrackSet]:
    return [x] if isinstance(x, TrackSet) else list(x)


def average_precision(pred, gt, thresholds: Iterable[float] = AP_THRESHOLDS) -> float:
    """Detection AP averaged over IoU thresholds.

    ``pred`` / ``gt`` are TrackSets or equal-length lists of them (pooled). For each
    threshold detections are ranked by confidence and greedily matched to their
    best-overlapping ground-truth box; AP is the area under the interpolated
    precision-recall curve. NaN when there is no ground truth.
    """
    preds, gts = _as_list(pred), _as_list(gt)
    if len(preds) != len(gts):
        raise ValueError("need one prediction per ground-truth video")
    n_gt = sum(len(f) for g in gts for f in g.frames)
    if n_gt == 0:
        return math.nan
    dets = []  # (confidence, order, key, best gt index, best iou)
    order = 0
    for v, (p, g) in enumerate(zip(preds, gts)):
        if p.n_frames != g.n_frames:
            raise ValueError("prediction and ground truth cover different numbers of frames")
        for t in range(g.n_frames):
            ious = iou_matrix([d.box for d in p.frames[t]], [d.box for d in g.frames[t]])
            for j, d in enumerate(p.frames[t]):
                if ious.shape[1]:
                    best = int(np.argmax(ious[j]))
                    dets.append((d.confidence, order, (v, t, best), float(ious[j, best])))
                else:
                    dets.append((d.confidence, order, None, 0.0))
                order += 1
    if not dets:
        return 0.0
    dets.sort(key=lambda d: (-d[0], d[1]))
    aps = []
    for thr in thresholds:
        matched = set()
        tp = np.zeros(len(dets))
        for n, (_, _, key, ov) in enumerate(dets):
            if key is not None and ov >= thr and key not in matched:
                matched.add(key)
                tp[n] = 1
        ctp = np.cumsum(tp)
        recall = ctp / n_gt
        precision = ctp / np.arange(1, len(dets) + 1)
        aps.append(_interpolated_area(recall, precision))
    return float(np.mean(aps))


def _interpolated_area(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def count_abs_error(pred_counts, gt_counts) -> float:
    pred_counts, gt_counts = np.asarray(pred_counts), np.asarray(gt_counts)
    if pred_counts.shape != gt_counts.shape:
        raise ValueError("count sequences differ in length")
    if pred_counts.size == 0:
        return 0.0
    return float(np.mean(np.abs(pred_counts - gt_counts)))
