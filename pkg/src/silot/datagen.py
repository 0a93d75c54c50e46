"""Scattered MNIST and Scattered Shapes video generators with ground-truth tracks.

Sprites move in straight lines at a fixed speed, bounce off the frame borders and
pass through each other. Frames are black backgrounds with sprites painted in
index order.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolyPath
from scipy import ndimage

from .core import ConfigurationError, Track, VideoSample

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "cyan": (0, 255, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
}
SHAPES = ("circle", "diamond", "star", "cross", "x")
SPLITS = ("train", "val", "test")


class PlacementError(RuntimeError):
    """Initial positions could not satisfy the overlap limit."""


@dataclass
class SceneConfig:
    dataset: str = "mnist"
    frame_size: tuple[int, int] = (48, 48)
    T: int = 8
    n_min: int = 1
    n_max: int = 6
    speed: float | None = None          # default: 2 for mnist, 5 for shapes
    sprite_size: tuple[int, int] = (14, 14)
    size_std: float | None = None       # default: 0 for mnist, 1.4 for shapes
    overlap_threshold: int = 98
    max_attempts: int = 1000
    colors: tuple[str, ...] = tuple(PALETTE)
    shapes: tuple[str, ...] = SHAPES
    crop: tuple[int, int] | None = None
    crop_min_visible: float = 0.25
    split: str = "train"

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        self.sprite_size = tuple(int(v) for v in self.sprite_size)
        self.colors, self.shapes = tuple(self.colors), tuple(self.shapes)
        if self.crop is not None:
            self.crop = tuple(int(v) for v in self.crop)
            if any(c > f for c, f in zip(self.crop, self.frame_size)):
                raise ConfigurationError("crop larger than the frame")
        if self.dataset not in ("mnist", "shapes"):
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        if self.speed is None:
            self.speed = 2.0 if self.dataset == "mnist" else 5.0
        if self.size_std is None:
            self.size_std = 0.0 if self.dataset == "mnist" else 1.4
        if not 1 <= self.n_min <= self.n_max:
            raise ConfigurationError("need 1 <= n_min <= n_max")
        if self.speed <= 0:
            raise ConfigurationError("speed must be positive")
        if self.T < 1:
            raise ConfigurationError("T must be >= 1")
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        bad = [c for c in self.colors if c not in PALETTE] + [s for s in self.shapes if s not in SHAPES]
        if bad:
            raise ConfigurationError(f"unknown palette entries {bad}")

    def to_dict(self) -> dict:
        return asdict(self)


def simulate(positions, velocities, sizes, bounds, T: int) -> np.ndarray:
    """Bounce sprites around a frame.

    positions: (N, 2) top-left corners (y, x); velocities (N, 2) in px/frame;
    sizes (N, 2) sprite (h, w); bounds (H, W). Returns (T, N, 2) positions, row 0
    being the initial positions. Borders reflect elastically.
    """
    pos = np.array(positions, dtype=float).reshape(-1, 2)
    vel = np.array(velocities, dtype=float).reshape(-1, 2)
    sizes = np.asarray(sizes, dtype=float).reshape(-1, 2)
    upper = np.asarray(bounds, dtype=float)[None, :] - sizes
    if (upper < 0).any():
        raise ConfigurationError("sprite larger than the frame")
    out = np.empty((T,) + pos.shape)
    for t in range(T):
        out[t] = pos
        pos = pos + vel
        for _ in range(64):
            low, high = pos < 0, pos > upper
            if not (low.any() or high.any()):
                break
            pos = np.where(low, -pos, pos)
            pos = np.where(high, 2 * upper - pos, pos)
            vel = np.where(low | high, -vel, vel)
        # degenerate zero-width range: pin to the border
        pos = np.clip(pos, 0, upper)
    return out


# sprites ------------------------------------------------------------------

@lru_cache(maxsize=1)
def load_stencils() -> dict:
    text = resources.files("silot").joinpath("assets/shape_stencils.json").read_text()
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


def rasterize_shape(shape: str, size: tuple[int, int]) -> np.ndarray:
    """Binary (h, w) mask of a stencil; pixel centres inside the outline are on.

    Thin tips can leave pixels cut off from the body at small sizes; only the largest
    4-connected piece is kept so every sprite is a single region.
    """
    h, w = size
    rows, cols = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    st = load_stencils()[shape]
    if st.get("ellipse"):
        return ((rows - 0.5) ** 2 + (cols - 0.5) ** 2 <= 0.25).astype(np.float64)
    pts = np.stack([rows.ravel(), cols.ravel()], 1)
    inside = np.zeros(len(pts), dtype=bool)
    for poly in st["polygons"]:
        inside |= PolyPath(np.asarray(poly, dtype=float)).contains_points(pts)
    labels, n = ndimage.label(inside.reshape(h, w))
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        return (labels == 1 + int(np.argmax(sizes))).astype(np.float64)
    return (labels > 0).astype(np.float64)


@dataclass
class DigitBank:
    """28x28 grayscale digits split into disjoint train/val/test index sets."""

    images: np.ndarray                      # (N, 28, 28) uint8
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_images(cls, images, seed: int = 0, fractions=(0.8, 0.1, 0.1)):
        images = np.asarray(images)
        if images.ndim == 2:
            side = int(round(math.sqrt(images.shape[1])))
            images = images.reshape(-1, side, side)
        images = np.clip(images, 0, 255).astype(np.uint8)
        n = len(images)
        perm = np.random.default_rng(seed).permutation(n)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        return cls(images, {"train": np.sort(perm[:a]), "val": np.sort(perm[a:b]),
                            "test": np.sort(perm[b:])})

    def sprite(self, index: int, size=(14, 14)) -> np.ndarray:
        """Digit resized to ``size`` by area averaging, as intensity in [0, 1]."""
        img = self.images[index].astype(np.float64) / 255.0
        return resize_area(img, size)


def resize_area(img: np.ndarray, size) -> np.ndarray:
    h, w = size
    H, W = img.shape
    if H % h == 0 and W % w == 0:
        return img.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    from PIL import Image
    out = Image.fromarray((img * 255).astype(np.uint8)).resize((w, h), Image.BOX)
    return np.asarray(out, dtype=np.float64) / 255.0


def load_digit_bank(path: str | Path | None = None) -> DigitBank:
    """Digits from an ``.npz`` with an ``images`` array, or mlxtend's bundled
    5000-digit MNIST subset when no path is given."""
    if path is not None:
        with np.load(path) as data:
            return DigitBank.from_images(data["images"])
    from mlxtend.data import mnist_data
    X, _ = mnist_data()
    return DigitBank.from_images(X)


# generation ----------------------------------------------------------------

@dataclass
class _Sprite:
    alpha: np.ndarray         # (h, w) in [0, 1]
    color: np.ndarray         # (3,) in [0, 1]
    label: str

    @property
    def mask(self) -> np.ndarray:
        return self.alpha > 0

    @property
    def size(self):
        return self.alpha.shape


def _place(sprites: list[_Sprite], frame_size, cfg: SceneConfig, rng) -> np.ndarray:
    """Rejection-sample top-left corners so each sprite overlaps the union of the
    already placed ones by at most ``overlap_threshold`` mask pixels."""
    H, W = frame_size
    occupied = np.zeros((H, W), dtype=bool)
    out = []
    for sp in sprites:
        h, w = sp.size
        if h > H or w > W:
            raise ConfigurationError("sprite larger than the frame")
        for _ in range(cfg.max_attempts):
            y, x = rng.uniform(0, H - h), rng.uniform(0, W - w)
            r, c = int(round(y)), int(round(x))
            overlap = int((occupied[r:r + h, c:c + w] & sp.mask).sum())
            if overlap <= cfg.overlap_threshold:
                occupied[r:r + h, c:c + w] |= sp.mask
                out.append((y, x))
                break
        else:
            raise PlacementError(f"no placement within {cfg.max_attempts} attempts")
    return np.asarray(out, dtype=float).reshape(-1, 2)


def _velocities(n: int, speed: float, rng) -> np.ndarray:
    angle = rng.uniform(0, 2 * np.pi, size=n)
    return speed * np.stack([np.sin(angle), np.cos(angle)], 1)


def _render(sprites, traj, frame_size, crop_origin, crop_size, cfg: SceneConfig):
    """Paint sprites into frames and compute per-frame tight boxes of visible masks."""
    T = traj.shape[0]
    H, W = frame_size
    ch, cw = crop_size
    oy, ox = crop_origin
    canvas = np.zeros((T, H, W, 3))
    tracks = []
    for i, sp in enumerate(sprites):
        h, w = sp.size
        boxes = {}
        for t in range(T):
            r, c = (int(v) for v in np.round(traj[t, i]))
            region = canvas[t, r:r + h, c:c + w]
            a = sp.alpha[..., None]
            canvas[t, r:r + h, c:c + w] = region * (1 - a) + a * sp.color
            mask = np.zeros((H, W), dtype=bool)
            mask[r:r + h, c:c + w] = sp.mask
            full = mask.sum()
            vis = mask[oy:oy + ch, ox:ox + cw]
            if full == 0 or vis.sum() < cfg.crop_min_visible * full:
                continue
            rows, cols = np.nonzero(vis.any(1))[0], np.nonzero(vis.any(0))[0]
            r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
            boxes[t] = ((r0 + r1 + 1) / 2.0, (c0 + c1 + 1) / 2.0,
                        float(r1 - r0 + 1), float(c1 - c0 + 1))
        if boxes:
            tracks.append(Track(len(tracks), boxes))
    frames = np.round(canvas[:, oy:oy + ch, ox:ox + cw] * 255).astype(np.uint8)
    return frames, tracks


def _video(sprites, cfg: SceneConfig, rng, video_id: int) -> VideoSample:
    frame_size = cfg.frame_size
    sizes = np.array([sp.size for sp in sprites], dtype=float)
    start = _place(sprites, frame_size, cfg, rng)
    traj = simulate(start, _velocities(len(sprites), cfg.speed, rng), sizes, frame_size, cfg.T)
    if cfg.crop is not None:
        crop = cfg.crop
        origin = (int(rng.integers(0, frame_size[0] - crop[0] + 1)),
                  int(rng.integers(0, frame_size[1] - crop[1] + 1)))
    else:
        crop, origin = frame_size, (0, 0)
    frames, tracks = _render(sprites, traj, frame_size, origin, crop, cfg)
    return VideoSample(frames, tracks, video_id)


def gen_scattered_mnist(cfg: SceneConfig, bank: DigitBank, rng, video_id: int = 0) -> VideoSample:
    pool = bank.splits[cfg.split]
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    picks = rng.choice(pool, size=n, replace=True)
    white = np.ones(3)
    sprites = [_Sprite(bank.sprite(int(i), cfg.sprite_size), white, f"digit:{int(i)}") for i in picks]
    return _video(sprites, cfg, rng, video_id)


def gen_scattered_shapes(cfg: SceneConfig, rng, video_id: int = 0) -> VideoSample:
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    sprites = []
    for _ in range(n):
        color = cfg.colors[int(rng.integers(len(cfg.colors)))]
        shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
        size = np.round(rng.normal(cfg.sprite_size, cfg.size_std)).astype(int)
        size = tuple(int(v) for v in np.clip(size, 3, cfg.frame_size))
        sprites.append(_Sprite(rasterize_shape(shape, size), np.array(PALETTE[color]) / 255.0,
                               f"{color}:{shape}"))
    return _video(sprites, cfg, rng, video_id)


def video_rng(seed: int, index: int, split: str = "train") -> np.random.Generator:
    """Independent stream per (seed, split, video index)."""
    return np.random.default_rng([int(seed), SPLITS.index(split), int(index)])


def generate_video(cfg: SceneConfig, seed: int, index: int, bank: DigitBank | None = None):
    rng = video_rng(seed, index, cfg.split)
    if cfg.dataset == "mnist":
        if bank is None:
            raise ConfigurationError("mnist generation needs a digit bank")
        return gen_scattered_mnist(cfg, bank, rng, index)
    return gen_scattered_shapes(cfg, rng, index)


_WORKER_BANK: DigitBank | None = None


def _worker(args):
    cfg, seed, index, bank_path = args
    global _WORKER_BANK
    bank = None
    if cfg.dataset == "mnist":
        if _WORKER_BANK is None:
            _WORKER_BANK = load_digit_bank(bank_path)
        bank = _WORKER_BANK
    return generate_video(cfg, seed, index, bank)


def generate_dataset(cfg: SceneConfig, n_videos: int, seed: int, workers: int = 1,
                     bank_path=None) -> list[VideoSample]:
    jobs = [(cfg, seed, i, bank_path) for i in range(n_videos)]
    if workers <= 1:
        return [_worker(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_worker, jobs, chunksize=16))


# dataset IO --------------------------------------------------------------

FRAMES_FILE, HEADER_FILE, ANNOTATIONS_FILE, MANIFEST_FILE = (
    "frames.u8", "frames.json", "annotations.jsonl", "manifest.json")


def write_dataset(out_dir, videos: list[VideoSample], cfg: SceneConfig, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not videos:
        raise ConfigurationError("empty dataset")
    shape = videos[0].frames.shape
    if any(v.frames.shape != shape for v in videos):
        raise ConfigurationError("all videos in a dataset must share a shape")
    frames = np.stack([v.frames for v in videos]).astype("<u1")
    frames.tofile(out / FRAMES_FILE)
    (out / HEADER_FILE).write_text(json.dumps(
        {"dtype": "uint8", "byte_order": "little", "shape": list(frames.shape),
         "axes": ["video", "t", "y", "x", "channel"]}, indent=1))
    with open(out / ANNOTATIONS_FILE, "w") as fh:
        for v in videos:
            for tr in v.tracks:
                for t in sorted(tr.boxes):
                    y, x, h, w = tr.boxes[t]
                    fh.write(json.dumps({"video_id": v.video_id, "track_id": tr.track_id, "t": t,
                                         "y": y, "x": x, "h": h, "w": w}) + "\n")
    manifest = {
        "format": "silot-dataset", "version": 1, "seed": seed, "scene": cfg.to_dict(),
        "frames": FRAMES_FILE, "header": HEADER_FILE, "annotations": ANNOTATIONS_FILE,
        "videos": [{"video_id": v.video_id, "index": i, "n_objects": v.n_objects}
                   for i, v in enumerate(videos)],
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1))
    return out


@dataclass
class Dataset:
    frames: np.ndarray          # (N, T, H, W, 3) uint8, memory-mapped
    videos: list[VideoSample]
    manifest: dict

    def __len__(self):
        return len(self.videos)


def read_dataset(path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / MANIFEST_FILE).read_text())
    header = json.loads((path / manifest["header"]).read_text())
    if header.get("dtype") != "uint8":
        raise ConfigurationError("frames must be uint8")
    frames = np.memmap(path / manifest["frames"], dtype="<u1", mode="r",
                       shape=tuple(header["shape"]))
    boxes: dict[int, dict[int, dict[int, tuple]]] = {}
    with open(path / manifest["annotations"]) as fh:
        for line in fh:
            a = json.loads(line)
            boxes.setdefault(a["video_id"], {}).setdefault(a["track_id"], {})[a["t"]] = (
                a["y"], a["x"], a["h"], a["w"])
    videos = []
    for entry in manifest["videos"]:
        vid = entry["video_id"]
        tracks = [Track(tid, b) for tid, b in sorted(boxes.get(vid, {}).items())]
        videos.append(VideoSample(frames[entry["index"]], tracks, vid))
    return Dataset(frames, videos, manifest)
