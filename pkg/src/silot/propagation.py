"""Per-object propagation of attributes from one frame to the next."""
from __future__ import annotations

import torch
import torch.nn as nn

from .attention import PropagationAttention
from .core import ModelConfig, ObjectSet
from .discovery import _check_finite, sample_logistic, sample_normal
from .geometry import extract_glimpse
from .nets import MLP, normal_params

_EPS = 1e-6


def _logit(p: torch.Tensor) -> torch.Tensor:
    p = p.clamp(_EPS, 1 - _EPS)
    return torch.log(p) - torch.log1p(-p)


def f_position(prev: torch.Tensor, z: torch.Tensor, cell: torch.Tensor | float) -> torch.Tensor:
    """Centre update; moves at most ``cell`` pixels per step."""
    return prev + cell * torch.tanh(z)


def f_size(prev: torch.Tensor, z: torch.Tensor, anchor: torch.Tensor | float) -> torch.Tensor:
    return anchor * torch.sigmoid(_logit(prev / anchor) + z)


def f_depth(prev: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(_logit(prev) + z)


def f_what(prev: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    return prev + torch.tanh(z)


def apply_updates(prev: ObjectSet, z_where, z_what, z_depth, config: ModelConfig):
    """Apply where/what/depth updates; returns (where, what, depth)."""
    cell = prev.where.new_tensor(config.cell) * config.prop_move_scale
    anchor = prev.where.new_tensor(config.anchor)
    yx = f_position(prev.where[..., :2], z_where[..., :2], cell)
    hw = f_size(prev.where[..., 2:], z_where[..., 2:], anchor)
    return torch.cat([yx, hw], -1), f_what(prev.what, z_what), f_depth(prev.depth, z_depth)


def where_features(z_where: torch.Tensor, where: torch.Tensor, anchor) -> torch.Tensor:
    """Translation-free summary of a propagated box: step direction and relative size."""
    return torch.cat([torch.tanh(z_where[..., :2]), where[..., 2:] / where.new_tensor(anchor)], -1)


class _Heads(nn.Module):
    def __init__(self, n_where: int, n_in: int, A: int, s: float):
        super().__init__()
        self.p_where = MLP(n_where, (100, 100), 8, s)
        self.p_what = MLP(n_in + 4, (100, 100), 2 * A, s)
        self.p_depth = MLP(n_in + 4 + A, (100, 100), 2, s)
        self.p_pres = MLP(n_in + 4 + A + 1, (100, 100), 1, s)


class Propagation(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        s = config.width_scale
        A = config.A
        self.config = config
        self.attention = PropagationAttention(A, config.hidden_dim, 64, config.attn_sigma,
                                              config.anchor, s)
        glimpse_in = config.obj_shape[0] * config.obj_shape[1] * 3
        self.p_glimpse = MLP(64, (100, 100), 4, s)
        self.p_bu = MLP(glimpse_in, (256, 128), 128, s)
        self.p_fuse = MLP(128 + 64, (100, 100), 128, s)
        self.p_obj = MLP(glimpse_in, (256, 128), 128, s)
        self.heads = _Heads(128, 128 + 128, A, s)
        self.p_rnn = nn.GRUCell(4 + A + 2, config.hidden_dim)

    def glimpse_box(self, prev: ObjectSet, u_td: torch.Tensor) -> torch.Tensor:
        anchor = prev.where.new_tensor(self.config.anchor)
        delta = torch.tanh(self.p_glimpse(u_td)) * anchor.repeat(2)
        box = prev.where + self.config.glimpse_offset_scale * delta
        return torch.cat([box[..., :2], box[..., 2:].clamp(min=1.0)], -1)

    def update_hidden(self, hidden, where_feat, what, depth, pres):
        B, K, D = hidden.shape
        x = torch.cat([where_feat, what, depth[..., None], pres[..., None]], -1)
        return self.p_rnn(x.reshape(B * K, -1), hidden.reshape(B * K, D)).reshape(B, K, D)

    def forward(self, frames: torch.Tensor, prev: ObjectSet, mode: str = "sample",
                generator=None, block_grads: bool = False):
        cfg = self.config
        B, K = prev.batch_size, prev.n_objects
        obj_shape = cfg.obj_shape
        u_td = self.attention(prev)
        g0 = extract_glimpse(frames, self.glimpse_box(prev, u_td), obj_shape)
        u_bu = self.p_bu(g0.reshape(B, K, -1))
        u = self.p_fuse(torch.cat([u_bu, u_td], -1))

        mu, sigma = normal_params(self.heads.p_where(u))
        _check_finite("propagation where", mu, sigma)
        z_where = sample_normal(mu, sigma, mode, generator)
        record = {"yx": (mu[..., :2], sigma[..., :2], z_where[..., :2]),
                  "hw": (mu[..., 2:], sigma[..., 2:], z_where[..., 2:])}
        anchor = prev.where.new_tensor(cfg.anchor)
        cell = prev.where.new_tensor(cfg.cell) * cfg.prop_move_scale
        where = torch.cat([f_position(prev.where[..., :2], z_where[..., :2], cell),
                           f_size(prev.where[..., 2:], z_where[..., 2:], anchor)], -1)
        wf = where_features(z_where, where, cfg.anchor)
        if block_grads:
            where, wf = where.detach(), wf.detach()

        g1 = extract_glimpse(frames, where, obj_shape)
        u = torch.cat([u, self.p_obj(g1.reshape(B, K, -1))], -1)

        mu, sigma = normal_params(self.heads.p_what(torch.cat([u, wf], -1)))
        _check_finite("propagation what", mu, sigma)
        z_what = sample_normal(mu, sigma, mode, generator)
        what = f_what(prev.what, z_what)
        record["what"] = (mu, sigma, z_what)

        mu, sigma = normal_params(self.heads.p_depth(torch.cat([u, wf, what], -1)))
        _check_finite("propagation depth", mu, sigma)
        z_depth = sample_normal(mu, sigma, mode, generator)
        depth = f_depth(prev.depth, z_depth[..., 0])
        record["depth"] = (mu, sigma, z_depth)
        if block_grads:
            depth = depth.detach()

        loc = self.heads.p_pres(torch.cat([u, wf, what, depth[..., None]], -1))
        _check_finite("propagation pres", loc)
        z_pres = sample_logistic(loc, cfg.bc_temp, mode, generator)
        pres = prev.pres * torch.sigmoid(z_pres[..., 0])
        record["pres"] = (loc, z_pres)
        if block_grads:
            pres = pres.detach()

        hidden = self.update_hidden(prev.hidden, wf, what, depth, pres)
        return ObjectSet(where, what, depth, pres, hidden), record


class PriorPropagation(nn.Module):
    """Frame-free copy of the propagation module used as a learned prior.

    The recurrent cell is shared with the posterior propagation module, whose
    input is object attributes only.
    """

    def __init__(self, config: ModelConfig, rnn: nn.GRUCell):
        super().__init__()
        s = config.width_scale
        self.config = config
        self.attention = PropagationAttention(config.A, config.hidden_dim, 64, config.attn_sigma,
                                              config.anchor, s)
        self.p_fuse = MLP(64, (100, 100), 128, s)
        self.heads = _Heads(128, 128, config.A, s)
        self._rnn = [rnn]

    def forward(self, prev: ObjectSet, mode: str = "sample", generator=None, posterior=None):
        """One prior step. With ``posterior`` (a latent record from the posterior step)
        the autoregressive conditioning uses the posterior samples, which is how the
        prior is scored during training; otherwise the prior samples its own latents.
        """
        cfg = self.config
        u = self.p_fuse(self.attention(prev))
        anchor = prev.where.new_tensor(cfg.anchor)
        cell = prev.where.new_tensor(cfg.cell) * cfg.prop_move_scale

        def draw(key, mu, sigma=None):
            if posterior is not None:
                return posterior[key][-1]
            if sigma is None:
                return sample_logistic(mu, cfg.bc_temp, mode, generator)
            return sample_normal(mu, sigma, mode, generator)

        mu, sigma = normal_params(self.heads.p_where(u))
        params = {"yx": (mu[..., :2], sigma[..., :2]), "hw": (mu[..., 2:], sigma[..., 2:])}
        z_where = torch.cat([draw("yx", *params["yx"]), draw("hw", *params["hw"])], -1)
        where = torch.cat([f_position(prev.where[..., :2], z_where[..., :2], cell),
                           f_size(prev.where[..., 2:], z_where[..., 2:], anchor)], -1)
        wf = where_features(z_where, where, cfg.anchor)

        params["what"] = normal_params(self.heads.p_what(torch.cat([u, wf], -1)))
        what = f_what(prev.what, draw("what", *params["what"]))

        params["depth"] = normal_params(self.heads.p_depth(torch.cat([u, wf, what], -1)))
        depth = f_depth(prev.depth, draw("depth", *params["depth"])[..., 0])

        params["pres"] = (self.heads.p_pres(torch.cat([u, wf, what, depth[..., None]], -1)),)
        pres = prev.pres * torch.sigmoid(draw("pres", params["pres"][0])[..., 0])

        B, K, D = prev.hidden.shape
        x = torch.cat([wf, what, depth[..., None], pres[..., None]], -1)
        hidden = self._rnn[0](x.reshape(B * K, -1), prev.hidden.reshape(B * K, D)).reshape(B, K, D)
        return ObjectSet(where, what, depth, pres, hidden), params
