"""Top-K object selection and the differentiable compositing renderer."""
from __future__ import annotations

import torch
import torch.nn as nn

from .core import ModelConfig, ObjectSet, concat_object_sets
from .geometry import NEG_INF, inverse_place
from .nets import MLP

LIKELIHOOD_CLAMP = 1e-6


def select_top_k(candidates: ObjectSet, K: int, padding: ObjectSet | None = None):
    """Keep the K rows with the highest pres, preserving their original order.

    Ties go to the lower original index. If fewer than K candidates exist the
    result is topped up with rows from ``padding`` (degenerate, pres = 0).
    Returns (selected, index) where ``index`` (B, K) points into the candidates,
    padded rows carrying indices >= candidates.n_objects.
    """
    n = candidates.n_objects
    if n < K:
        if padding is None or padding.n_objects < K - n:
            raise ValueError("not enough padding rows for top-K selection")
        candidates = concat_object_sets(candidates, padding.map(lambda t: t[:, :K - n]))
    order = torch.sort(-candidates.pres.detach(), dim=1, stable=True).indices[:, :K]
    index = torch.sort(order, dim=1).values
    return candidates.gather(index), index


class Renderer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        Ho, Wo = config.obj_shape
        self.r_obj = MLP(config.A, (128, 256), Ho * Wo * 4, config.width_scale)

    def appearance(self, what: torch.Tensor):
        """Object-space appearance beta (…, Ho, Wo, 3) and transparency xi (…, Ho, Wo, 1)."""
        cfg = self.config
        Ho, Wo = cfg.obj_shape
        logits = self.r_obj(what).reshape(what.shape[:-1] + (Ho, Wo, 4))
        beta = torch.sigmoid(cfg.mu_beta + cfg.sigma_beta * logits[..., :3])
        xi = torch.sigmoid(cfg.mu_xi + cfg.sigma_xi * logits[..., 3:])
        return beta, xi

    def forward(self, objects: ObjectSet, frame_size: tuple[int, int]) -> torch.Tensor:
        beta, xi = self.appearance(objects.what)
        return composite(beta, xi, objects, frame_size, self.config.render_temp)


def composite(beta: torch.Tensor, xi: torch.Tensor, objects: ObjectSet,
              frame_size: tuple[int, int], temperature: float) -> torch.Tensor:
    """Softmax-over-depth compositing of placed object maps into (B, H, W, 3).

    Colour is placed premultiplied by alpha, and each object's softmax weight is
    scaled by how much of the pixel its placed map covers. Inside a box this is
    the plain softmax of gamma / temperature; outside it the weight is exactly 0.
    """
    B, K = objects.batch_size, objects.n_objects
    H, W = frame_size
    if K == 0:
        return beta.new_zeros(B, H, W, 3)
    alpha = xi * objects.pres[..., None, None, None]
    gamma = alpha * objects.depth[..., None, None, None]
    maps = torch.cat([alpha * beta, gamma, torch.ones_like(gamma)], dim=-1)
    placed = inverse_place(maps, objects.where, frame_size, 0.0, soft_edge=True)
    colour, gamma_p, cover = placed[..., :3], placed[..., 3:4], placed[..., 4:]
    covered = cover > 0
    logits = torch.where(covered, gamma_p / temperature + torch.log(cover.clamp_min(1e-30)),
                         torch.full_like(cover, NEG_INF))
    weights = torch.softmax(logits, dim=1)
    return (weights * colour).sum(dim=1)


def frame_log_likelihood(frames: torch.Tensor, means: torch.Tensor) -> torch.Tensor:
    """Bernoulli log-likelihood summed over all but the leading (batch) axis."""
    if frames.shape != means.shape:
        raise ValueError(f"shape mismatch {tuple(frames.shape)} vs {tuple(means.shape)}")
    p = means.clamp(LIKELIHOOD_CLAMP, 1 - LIKELIHOOD_CLAMP)
    ll = frames * torch.log(p) + (1 - frames) * torch.log1p(-p)
    return ll.reshape(ll.shape[0], -1).sum(-1)
