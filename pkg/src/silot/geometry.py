"""Discovery-grid arithmetic, where decoding, and bilinear glimpse / placement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import ConfigurationError, ModelConfig

# finite stand-in for -inf in importance maps
NEG_INF = -1e6


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    c_h: int
    c_w: int
    H: int
    W: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int
    a_h: float
    a_w: float
    b_min: float
    b_max: float
    H_inp: int
    W_inp: int

    @property
    def n_cells(self) -> int:
        return self.H * self.W

    def cell_centres(self, dtype=torch.float32, device=None) -> torch.Tensor:
        """(H, W, 2) pixel coordinates of cell centres."""
        ys = (torch.arange(self.H, dtype=dtype, device=device) + 0.5) * self.c_h
        xs = (torch.arange(self.W, dtype=dtype, device=device) + 0.5) * self.c_w
        return torch.stack(torch.meshgrid(ys, xs, indexing="ij"), dim=-1)


def _conv_out(n: int, layers) -> int:
    for _, f, s, _ in layers:
        n = (n - f) // s + 1
        if n <= 0:
            return 0
    return n


def _axis_padding(n_inp: int, cell: int, layers) -> tuple[int, int, int]:
    start, jump = 0.5, 1
    for _, f, s, _ in layers:
        start += (f - 1) / 2 * jump
        jump *= s
    if jump != cell:
        raise ConfigurationError(f"backbone stride product {jump} != cell size {cell}")
    n_cells = math.ceil(n_inp / cell)
    # receptive-field centre of output 0 sits at `start` in padded coordinates;
    # shift it onto the first cell centre (within half a pixel when the field is odd)
    pad_lo = math.floor(start - cell / 2)
    if pad_lo < 0:
        raise ConfigurationError("backbone receptive field is smaller than half a cell")
    for pad_hi in range(0, 4 * cell + int(start) * 2 + 1):
        n_out = _conv_out(pad_lo + n_inp + pad_hi, layers)
        if n_out == n_cells:
            return n_cells, pad_lo, pad_hi
        if n_out > n_cells:
            break
    raise ConfigurationError(f"no padding yields {n_cells} output cells for input {n_inp}")


def compute_grid_spec(H_inp: int, W_inp: int, config: ModelConfig, backbone=None) -> GridSpec:
    layers = config.backbone if backbone is None else backbone
    H, pt, pb = _axis_padding(H_inp, config.cell[0], layers)
    W, pl, pr = _axis_padding(W_inp, config.cell[1], layers)
    return GridSpec(c_h=config.cell[0], c_w=config.cell[1], H=H, W=W,
                    pad_top=pt, pad_bottom=pb, pad_left=pl, pad_right=pr,
                    a_h=config.anchor[0], a_w=config.anchor[1],
                    b_min=config.b_min, b_max=config.b_max, H_inp=H_inp, W_inp=W_inp)


def decode_where_disc(z_where: torch.Tensor, grid: GridSpec) -> torch.Tensor:
    """Map (..., H, W, 4) discovery where-latents to pixel boxes (y, x, h, w)."""
    zy, zx, zh, zw = z_where.unbind(-1)
    i = torch.arange(grid.H, dtype=z_where.dtype, device=z_where.device)[:, None]
    j = torch.arange(grid.W, dtype=z_where.dtype, device=z_where.device)[None, :]
    span = grid.b_max - grid.b_min
    y = (i + grid.b_min + torch.sigmoid(zy) * span) * grid.c_h
    x = (j + grid.b_min + torch.sigmoid(zx) * span) * grid.c_w
    h = torch.sigmoid(zh) * grid.a_h
    w = torch.sigmoid(zw) * grid.a_w
    return torch.stack([y, x, h, w], dim=-1)


def _check_boxes(where: torch.Tensor) -> None:
    if where.numel() and bool((where[..., 2:] <= 0).any()):
        raise DegenerateBoxError("box height and width must be positive")


def extract_glimpse(frames: torch.Tensor, where: torch.Tensor, out_size: tuple[int, int]) -> torch.Tensor:
    """Bilinearly resample the box ``where`` of each frame to ``out_size``.

    frames: (B, H, W, C); where: (B, K, 4) centre/size in pixels.
    Returns (B, K, Ho, Wo, C). Samples falling outside the frame read as 0.
    """
    _check_boxes(where)
    B, H, W, C = frames.shape
    K = where.shape[1]
    Ho, Wo = out_size
    if Ho <= 0 or Wo <= 0:
        raise ValueError("glimpse size must be positive")
    if K == 0:
        return frames.new_zeros(B, 0, Ho, Wo, C)
    cy, cx, h, w = (t[..., None] for t in where.unbind(-1))
    r = (torch.arange(Ho, dtype=frames.dtype, device=frames.device) + 0.5) / Ho
    c = (torch.arange(Wo, dtype=frames.dtype, device=frames.device) + 0.5) / Wo
    ys = cy - h / 2 + r * h  # (B, K, Ho)
    xs = cx - w / 2 + c * w  # (B, K, Wo)
    gy = (2 * ys / H - 1)[..., :, None].expand(B, K, Ho, Wo)
    gx = (2 * xs / W - 1)[..., None, :].expand(B, K, Ho, Wo)
    grid = torch.stack([gx, gy], dim=-1).reshape(B, K * Ho, Wo, 2)
    out = F.grid_sample(frames.permute(0, 3, 1, 2), grid, mode="bilinear",
                        padding_mode="zeros", align_corners=False)
    return out.reshape(B, C, K, Ho, Wo).permute(0, 2, 3, 4, 1)


def inverse_place(maps: torch.Tensor, where: torch.Tensor, frame_size: tuple[int, int],
                  default, soft_edge: bool = False) -> torch.Tensor:
    """Draw each object's map into a frame-sized canvas at its box.

    maps: (B, K, Ho, Wo, C); ``default`` is a scalar or length-C sequence used
    for canvas pixels whose centre lies outside the box. Returns (B, K, H, W, C).

    With ``soft_edge`` the map is zero-padded instead of clipped: values fade to
    0 over the half texel either side of the box edge, so the canvas depends
    smoothly on the box size. ``default`` must then be 0.
    """
    _check_boxes(where)
    B, K, Ho, Wo, C = maps.shape
    H, W = frame_size
    if K == 0:
        return maps.new_zeros(B, 0, H, W, C)
    cy, cx, h, w = (t[..., None] for t in where.unbind(-1))
    py = torch.arange(H, dtype=maps.dtype, device=maps.device) + 0.5
    px = torch.arange(W, dtype=maps.dtype, device=maps.device) + 0.5
    u = (py - (cy - h / 2)) / h  # (B, K, H) in [0, 1] inside the box
    v = (px - (cx - w / 2)) / w
    gy = (2 * u - 1)[..., :, None].expand(B, K, H, W)
    gx = (2 * v - 1)[..., None, :].expand(B, K, H, W)
    grid = torch.stack([gx, gy], dim=-1).reshape(B * K, H, W, 2)
    src = maps.reshape(B * K, Ho, Wo, C).permute(0, 3, 1, 2)
    padding = "zeros" if soft_edge else "border"
    out = F.grid_sample(src, grid, mode="bilinear", padding_mode=padding, align_corners=False)
    out = out.permute(0, 2, 3, 1).reshape(B, K, H, W, C)
    if soft_edge:
        if any(float(d) != 0.0 for d in torch.as_tensor(default).reshape(-1)):
            raise ValueError("soft-edged placement only supports a zero default")
        return out
    inside = (((u >= 0) & (u <= 1))[..., :, None] & ((v >= 0) & (v <= 1))[..., None, :])
    fill = torch.as_tensor(default, dtype=maps.dtype, device=maps.device).expand(C)
    return torch.where(inside[..., None], out, fill)
