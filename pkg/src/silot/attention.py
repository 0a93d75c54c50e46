"""Gaussian-kernel spatial attention over object sets.

Offsets between positions are measured in anchor-box units, so ``sigma`` is a
fraction of the anchor box and the feature nets never see absolute positions.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .core import ObjectSet
from .geometry import GridSpec
from .nets import MLP


def gaussian_density(offsets: torch.Tensor, sigma: float) -> torch.Tensor:
    """Isotropic 2-D normal density evaluated at ``offsets`` (..., 2)."""
    sq = (offsets ** 2).sum(-1)
    return torch.exp(-sq / (2 * sigma ** 2)) / (2 * math.pi * sigma ** 2)


def object_features(objs: ObjectSet, anchor: tuple[float, float], hidden: bool) -> torch.Tensor:
    """Every attribute except the absolute position, sizes in anchor units."""
    size = objs.where[..., 2:] / objs.where.new_tensor(anchor)
    parts = [size, objs.what, objs.depth[..., None], objs.pres[..., None]]
    if hidden:
        parts.append(objs.hidden)
    return torch.cat(parts, dim=-1)


class DiscoveryAttention(nn.Module):
    """Per-cell summary of nearby propagated objects."""

    def __init__(self, what_dim: int, n_out: int = 64, sigma: float = 0.1,
                 anchor=(48.0, 48.0), scale: float = 1.0):
        super().__init__()
        self.sigma = sigma
        self.anchor = anchor
        self.n_out = n_out
        self.d_spatial = MLP(what_dim + 4 + 2, (64, 64), n_out, scale)

    def forward(self, propagated: ObjectSet, grid: GridSpec) -> torch.Tensor:
        B, K = propagated.batch_size, propagated.n_objects
        ref = propagated.where
        if K == 0:
            return ref.new_zeros(B, grid.H, grid.W, self.n_out)
        centres = grid.cell_centres(ref.dtype, ref.device)  # (H, W, 2)
        anchor = ref.new_tensor(self.anchor)
        offsets = (ref[:, None, None, :, :2] - centres[None, :, :, None, :]) / anchor
        feats = object_features(propagated, self.anchor, hidden=False)
        feats = feats[:, None, None].expand(B, grid.H, grid.W, K, feats.shape[-1])
        values = self.d_spatial(torch.cat([feats, offsets], dim=-1))
        weights = gaussian_density(offsets, self.sigma)
        return (weights[..., None] * values).sum(dim=3)


class PropagationAttention(nn.Module):
    """Per-object feature vector including the additive effect of nearby objects."""

    def __init__(self, what_dim: int, hidden_dim: int, n_out: int = 64, sigma: float = 0.1,
                 anchor=(48.0, 48.0), scale: float = 1.0):
        super().__init__()
        self.sigma = sigma
        self.anchor = anchor
        self.n_out = n_out
        n_attr = what_dim + 4 + hidden_dim
        self.p_td = MLP(n_attr, (64, 64), n_out, scale)
        self.p_spatial = MLP(n_attr + 2 + n_out, (64, 64), n_out, scale)

    def forward(self, objs: ObjectSet) -> torch.Tensor:
        B, K = objs.batch_size, objs.n_objects
        if K == 0:
            return objs.where.new_zeros(B, 0, self.n_out)
        feats = object_features(objs, self.anchor, hidden=True)
        u0 = self.p_td(feats)
        anchor = objs.where.new_tensor(self.anchor)
        pos = objs.where[..., :2]
        # offsets[b, l, k] = position of k relative to target l
        offsets = (pos[:, None, :, :] - pos[:, :, None, :]) / anchor
        pair_in = torch.cat([
            feats[:, None].expand(B, K, K, feats.shape[-1]),
            offsets,
            u0[:, :, None].expand(B, K, K, self.n_out),
        ], dim=-1)
        values = self.p_spatial(pair_in)
        weights = gaussian_density(offsets, self.sigma)
        return u0 + (weights[..., None] * values).sum(dim=2)
