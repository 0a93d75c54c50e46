"""Component networks: fully-connected stacks and the convolutional backbone."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigurationError


class MLP(nn.Sequential):
    """Two ReLU hidden layers and an unconstrained linear output, applied on the last axis."""

    def __init__(self, n_in: int, hidden: tuple[int, int], n_out: int, scale: float = 1.0):
        widths = [max(4, int(round(h * scale))) for h in hidden]
        layers = []
        for w in widths:
            layers += [nn.Linear(n_in, w), nn.ReLU()]
            n_in = w
        layers.append(nn.Linear(n_in, n_out))
        super().__init__(*layers)

    @property
    def out_layer(self) -> nn.Linear:
        return self[-1]


class Backbone(nn.Module):
    def __init__(self, layers, n_in: int = 3):
        super().__init__()
        self.convs = nn.ModuleList()
        self.acts = []
        for n, f, s, nl in layers:
            self.convs.append(nn.Conv2d(n_in, n, kernel_size=f, stride=s))
            self.acts.append(nl)
            n_in = n
        self.n_out = n_in

    def forward(self, frames: torch.Tensor, grid) -> torch.Tensor:
        """frames (B, H_inp, W_inp, 3) -> features (B, H, W, C) aligned with ``grid``."""
        x = frames.permute(0, 3, 1, 2)
        x = F.pad(x, (grid.pad_left, grid.pad_right, grid.pad_top, grid.pad_bottom))
        for conv, nl in zip(self.convs, self.acts):
            x = conv(x)
            if nl == "relu":
                x = F.relu(x)
        if x.shape[-2:] != (grid.H, grid.W):
            raise ConfigurationError(f"backbone output {tuple(x.shape[-2:])} != grid {(grid.H, grid.W)}")
        return x.permute(0, 2, 3, 1)


def normal_params(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a head output into (mu, sigma) with sigma = softplus(.) + 1e-4."""
    mu, s = raw.chunk(2, dim=-1)
    return mu, F.softplus(s) + 1e-4
