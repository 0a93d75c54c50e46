"""Convolutional object discovery: one candidate object per grid cell."""
from __future__ import annotations

import torch
import torch.nn as nn

from .attention import DiscoveryAttention
from .core import ModelConfig, NumericFault, ObjectSet
from .geometry import GridSpec, decode_where_disc, extract_glimpse
from .nets import MLP, Backbone, normal_params


def sample_normal(mu, sigma, mode, generator):
    if mode == "mean":
        return mu
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + sigma * eps


def sample_logistic(loc, temp, mode, generator):
    if mode == "mean":
        return loc
    u = torch.rand(loc.shape, generator=generator, dtype=loc.dtype, device=loc.device)
    u = u.clamp(1e-6, 1 - 1e-6)
    return loc + temp * (torch.log(u) - torch.log1p(-u))


def _check_finite(name: str, *tensors) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericFault(f"non-finite output from {name} head")


class Discovery(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        s = config.width_scale
        A = config.A
        self.config = config
        self.backbone = Backbone(config.backbone)
        n_bu = self.backbone.n_out
        self.attention = DiscoveryAttention(A, 64, config.attn_sigma, config.anchor, s)
        n_obj = n_glimpse = 128
        glimpse_in = config.obj_shape[0] * config.obj_shape[1] * 3
        self.d_fuse = MLP(n_bu + 64, (100, 100), 128, s)
        self.d_where = MLP(128, (100, 100), 8, s)
        self.d_obj = MLP(glimpse_in, (256, 128), n_glimpse, s)
        self.d_what = MLP(128 + n_obj + 4, (100, 100), 2 * A, s)
        self.d_depth = MLP(128 + n_obj + 4 + A, (100, 100), 2, s)
        self.d_pres = MLP(128 + n_obj + 4 + A + 1, (100, 100), 1, s)

    def forward(self, frames: torch.Tensor, propagated: ObjectSet, grid: GridSpec,
                hidden_init: torch.Tensor, mode: str = "sample", generator=None,
                block_grads: bool = False):
        """Discover H*W candidate objects in ``frames`` (B, H_inp, W_inp, 3).

        Returns the candidate ObjectSet (rows in row-major cell order) and a dict of
        latent parameters/samples keyed by attribute group.
        """
        cfg = self.config
        B = frames.shape[0]
        HW = grid.n_cells
        v_bu = self.backbone(frames, grid)
        v_td = self.attention(propagated, grid)
        v = self.d_fuse(torch.cat([v_bu, v_td], dim=-1)).reshape(B, HW, -1)

        mu, sigma = normal_params(self.d_where(v))
        _check_finite("where", mu, sigma)
        z_where = sample_normal(mu, sigma, mode, generator)
        where = decode_where_disc(z_where.reshape(B, grid.H, grid.W, 4), grid).reshape(B, HW, 4)
        where_feat = torch.sigmoid(z_where)
        if block_grads:
            where, where_feat = where.detach(), where_feat.detach()
        record = {"yx": (mu[..., :2], sigma[..., :2], z_where[..., :2]),
                  "hw": (mu[..., 2:], sigma[..., 2:], z_where[..., 2:])}

        glimpse = extract_glimpse(frames, where, cfg.obj_shape)
        v_obj = self.d_obj(glimpse.reshape(B, HW, -1))

        mu, sigma = normal_params(self.d_what(torch.cat([v, v_obj, where_feat], -1)))
        _check_finite("what", mu, sigma)
        what = sample_normal(mu, sigma, mode, generator)
        record["what"] = (mu, sigma, what)

        mu, sigma = normal_params(self.d_depth(torch.cat([v, v_obj, where_feat, what], -1)))
        _check_finite("depth", mu, sigma)
        z_depth = sample_normal(mu, sigma, mode, generator)
        depth = torch.sigmoid(z_depth)[..., 0]
        record["depth"] = (mu, sigma, z_depth)
        if block_grads:
            depth = depth.detach()

        loc = self.d_pres(torch.cat([v, v_obj, where_feat, what, depth[..., None]], -1))
        _check_finite("pres", loc)
        z_pres = sample_logistic(loc, cfg.bc_temp, mode, generator)
        pres = torch.sigmoid(z_pres)[..., 0]
        record["pres"] = (loc, z_pres)
        if block_grads:
            pres = pres.detach()

        objs = ObjectSet(where=where, what=what, depth=depth, pres=pres,
                         hidden=hidden_init.expand(B, HW, hidden_init.shape[-1]))
        return objs, record
