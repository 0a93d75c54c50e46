"""Domain types shared across the tracker: object sets, configuration, video samples."""
from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch


class ConfigurationError(ValueError):
    pass


class NumericFault(FloatingPointError):
    pass


ATTRIBUTES = ("where", "what", "depth", "pres", "hidden")


@dataclass(frozen=True)
class ObjectSet:
    """A batch of K objects stored attribute-wise.

    Shapes: where (B, K, 4) as (y, x, h, w) in pixels with (y, x) the box centre,
    what (B, K, A), depth (B, K), pres (B, K), hidden (B, K, D_h).
    """

    where: torch.Tensor
    what: torch.Tensor
    depth: torch.Tensor
    pres: torch.Tensor
    hidden: torch.Tensor

    @property
    def n_objects(self) -> int:
        return self.pres.shape[1]

    @property
    def batch_size(self) -> int:
        return self.pres.shape[0]

    def map(self, fn) -> "ObjectSet":
        return ObjectSet(*(fn(getattr(self, a)) for a in ATTRIBUTES))

    def replace(self, **kw) -> "ObjectSet":
        return dataclasses.replace(self, **kw)

    def gather(self, idx: torch.Tensor) -> "ObjectSet":
        """Select rows per batch element; ``idx`` has shape (B, K_out)."""

        def take(t):
            ix = idx.reshape(idx.shape + (1,) * (t.dim() - 2)).expand(idx.shape + t.shape[2:])
            return torch.gather(t, 1, ix)

        return self.map(take)

    def split(self, k: int) -> tuple["ObjectSet", "ObjectSet"]:
        return self.map(lambda t: t[:, :k]), self.map(lambda t: t[:, k:])

    def detach(self) -> "ObjectSet":
        return self.map(torch.Tensor.detach)

    def check_bounds(self) -> None:
        for name in ("depth", "pres"):
            t = getattr(self, name)
            if t.numel() and (t.min() < 0 or t.max() > 1):
                raise NumericFault(f"{name} outside [0, 1]")
        if self.where.numel() and (self.where[..., 2:] <= 0).any():
            raise NumericFault("non-positive box size")


def concat_object_sets(a: ObjectSet, b: ObjectSet) -> ObjectSet:
    """Row-wise union of two object sets, rows of ``a`` first."""
    for name in ATTRIBUTES:
        ta, tb = getattr(a, name), getattr(b, name)
        if ta.shape[0] != tb.shape[0] or ta.shape[2:] != tb.shape[2:]:
            raise ConfigurationError(
                f"cannot concatenate {name}: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    return ObjectSet(*(torch.cat([getattr(a, n), getattr(b, n)], dim=1) for n in ATTRIBUTES))


def empty_object_set(K: int, batch_size: int, frame_size: tuple[int, int],
                     anchor: tuple[float, float], what_dim: int,
                     hidden_init: torch.Tensor) -> ObjectSet:
    """Degenerate objects used in place of propagated objects at t=0.

    pres is exactly 0; boxes sit at the frame centre with anchor size; the hidden
    state is the (trainable) default initial state repeated for every row.
    """
    ref = hidden_init
    H, W = frame_size
    where = torch.tensor([H / 2, W / 2, anchor[0], anchor[1]], dtype=ref.dtype, device=ref.device)
    return ObjectSet(
        where=where.expand(batch_size, K, 4).clone(),
        what=ref.new_zeros(batch_size, K, what_dim),
        depth=ref.new_full((batch_size, K), 0.5),
        pres=ref.new_zeros(batch_size, K),
        hidden=hidden_init.expand(batch_size, K, hidden_init.shape[-1]),
    )


@dataclass
class PriorConfig:
    disc_yx: tuple[float, float] = (0.0, 1.0)
    disc_hw: tuple[float, float] = (-2.2, 0.5)
    disc_what: tuple[float, float] = (0.0, 1.0)
    disc_depth: tuple[float, float] = (0.0, 1.0)
    prop_yx: tuple[float, float] = (0.0, 0.3)
    prop_hw: tuple[float, float] = (0.0, 0.3)
    prop_what: tuple[float, float] = (0.0, 0.4)
    prop_depth: tuple[float, float] = (0.0, 1.0)
    # static Logistic location for propagated pres latents
    prop_pres_loc: float = 0.0
    # expected object count; None means derive from the grid (0.5 per cell -> 1 per 50 cells)
    count_start: float | None = None
    count_end: float | None = None
    # None means anneal over the curriculum duration
    count_anneal_steps: int | None = None
    learned_prior_weight: float = 0.5

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                v = tuple(float(x) for x in v)
                setattr(self, f.name, v)
                if v[1] <= 0:
                    raise ConfigurationError(f"prior {f.name} needs positive std, got {v[1]}")
        if not 0.0 <= self.learned_prior_weight <= 1.0:
            raise ConfigurationError("learned_prior_weight must lie in [0, 1]")


@dataclass
class TrainSchedule:
    lr: float = 1e-4
    batch_size: int = 16
    max_grad_norm: float = 10.0
    n_curric: int = 40000
    patience: int = 30000
    lr_divisor: float = 3.0
    max_early_stops: int = 3
    warmup_steps: int = 1000
    p_dd: float = 0.5
    val_every: int = 1000
    val_metric: str = "mota"

    def __post_init__(self):
        if min(self.lr, self.batch_size, self.max_grad_norm, self.n_curric, self.patience,
               self.lr_divisor, self.max_early_stops) <= 0:
            raise ConfigurationError("training schedule values must be positive")
        if not 0.0 <= self.p_dd <= 1.0:
            raise ConfigurationError("p_dd must lie in [0, 1]")
        if self.val_metric not in ("mota", "elbo"):
            raise ConfigurationError(f"unknown val_metric {self.val_metric!r}")


BACKBONE = ((128, 4, 3, "relu"), (128, 4, 2, "relu"), (128, 4, 2, "relu"),
            (128, 1, 1, "relu"), (128, 1, 1, "relu"), (128, 1, 1, None))


@dataclass
class ModelConfig:
    K: int = 16
    A: int = 64
    anchor: tuple[float, float] = (48.0, 48.0)
    cell: tuple[int, int] = (12, 12)
    b_min: float = -0.5
    b_max: float = 1.5
    attn_sigma: float = 0.1
    render_temp: float = 0.25
    obj_shape: tuple[int, int] = (14, 14)
    mu_beta: float = 0.0
    sigma_beta: float = 2.0
    mu_xi: float = 5.0
    sigma_xi: float = 0.1
    hidden_dim: int = 128
    bc_temp: float = 1.0
    # f^{y/x} moves at most this many cells per frame
    prop_move_scale: float = 1.0
    glimpse_offset_scale: float = 0.1
    # multiplies every fully-connected width (Table A2 widths at 1.0)
    width_scale: float = 1.0
    backbone: tuple = BACKBONE
    report_pres_threshold: float = 0.5
    prior: PriorConfig = field(default_factory=PriorConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)

    def __post_init__(self):
        if isinstance(self.prior, dict):
            self.prior = PriorConfig(**self.prior)
        if isinstance(self.train, dict):
            self.train = TrainSchedule(**self.train)
        self.anchor = tuple(float(a) for a in self.anchor)
        self.cell = tuple(int(c) for c in self.cell)
        self.obj_shape = tuple(int(c) for c in self.obj_shape)
        self.backbone = tuple(tuple(layer) for layer in self.backbone)
        if not self.b_min < self.b_max:
            raise ConfigurationError("b_min must be smaller than b_max")
        if self.render_temp <= 0:
            raise ConfigurationError("render_temp must be positive")
        if self.K < 1:
            raise ConfigurationError("K must be at least 1")
        if self.attn_sigma <= 0:
            raise ConfigurationError("attn_sigma must be positive")

    def check_capacity(self, max_objects: int) -> bool:
        """Warn when K leaves less than ~25% headroom over the expected object count."""
        if self.K < 1.25 * max_objects:
            warnings.warn(f"K={self.K} is below 1.25 x {max_objects} expected objects", stacklevel=2)
            return False
        return True

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Track:
    track_id: int
    # frame index -> (y, x, h, w) box centre/size in pixels
    boxes: dict[int, tuple[float, float, float, float]]


@dataclass
class VideoSample:
    """frames: uint8 array (T, H, W, 3); tracks: ground truth, evaluation only."""

    frames: Any
    tracks: list[Track]
    video_id: int = 0

    @property
    def n_objects(self) -> int:
        return len(self.tracks)

    def float_frames(self) -> torch.Tensor:
        return torch.tensor(self.frames).float() / 255.0


@dataclass
class LatentRecord:
    """Distribution parameters and samples for one timestep.

    ``disc`` / ``prop`` map attribute group ('yx', 'hw', 'what', 'depth') to
    (mu, sigma, z) and 'pres' to (loc, z). ``prior`` holds the learned prior's
    parameters for the propagated latents, same layout.
    """

    disc: dict[str, tuple] | None = None
    prop: dict[str, tuple] | None = None
    prior: dict[str, tuple] | None = None
    disc_on: bool = True
