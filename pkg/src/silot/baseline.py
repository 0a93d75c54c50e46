"""Connected-components tracker: each same-colour blob is an object, linked across
frames by centroid distance with a colour gate."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .metrics import Detection, TrackSet, hungarian

# 4-connectivity
_STRUCTURE = ndimage.generate_binary_structure(2, 1)


def quantize(frames: np.ndarray, threshold: int = 128) -> np.ndarray:
    """Map RGB frames (..., 3) to palette codes by thresholding each channel.

    Code 0 is black (background); the synthetic palettes are fully saturated so
    every sprite colour gets its own code.
    """
    bits = (np.asarray(frames) >= threshold).astype(np.int64)
    return bits[..., 0] * 4 + bits[..., 1] * 2 + bits[..., 2]


def detect_components(codes: np.ndarray) -> list[dict]:
    """Components of one quantized frame (H, W): colour, centroid and tight box."""
    out = []
    for color in np.unique(codes):
        if color == 0:
            continue
        labels, n = ndimage.label(codes == color, structure=_STRUCTURE)
        if n == 0:
            continue
        slices = ndimage.find_objects(labels)
        centroids = ndimage.center_of_mass(np.ones_like(labels), labels, range(1, n + 1))
        for sl, (cy, cx) in zip(slices, centroids):
            r0, r1 = sl[0].start, sl[0].stop
            c0, c1 = sl[1].start, sl[1].stop
            out.append({"color": int(color), "centroid": (cy + 0.5, cx + 0.5),
                        "box": ((r0 + r1) / 2.0, (c0 + c1) / 2.0, float(r1 - r0), float(c1 - c0))})
    return out


def conncomp_track(frames: np.ndarray, threshold: int = 128) -> TrackSet:
    """Track blobs through uint8 frames (T, H, W, 3)."""
    codes = quantize(frames, threshold)
    next_id = 0
    prev: list[dict] = []
    result = []
    for t in range(codes.shape[0]):
        dets = detect_components(codes[t])
        ids = [-1] * len(dets)
        if prev and dets:
            cost = np.full((len(prev), len(dets)), np.inf)
            for i, p in enumerate(prev):
                for j, d in enumerate(dets):
                    if p["color"] == d["color"]:
                        cost[i, j] = float(np.hypot(p["centroid"][0] - d["centroid"][0],
                                                    p["centroid"][1] - d["centroid"][1]))
            for i, j in hungarian(cost):
                ids[j] = prev[i]["id"]
        for j, d in enumerate(dets):
            if ids[j] < 0:
                ids[j] = next_id
                next_id += 1
            d["id"] = ids[j]
        result.append([Detection(d["id"], d["box"], 1.0) for d in dets])
        prev = dets
    return TrackSet(result)
