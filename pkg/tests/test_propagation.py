import inspect

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from silot.core import ModelConfig, ObjectSet
from silot.propagation import (PriorPropagation, Propagation, apply_updates, f_depth, f_position,
                               f_size)
from silot.render import Renderer, frame_log_likelihood

CFG = ModelConfig(width_scale=0.25, A=8, hidden_dim=16)


@pytest.fixture(autouse=True)
def _float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def prev_set(B, K, seed=0, size=48.0):
    g = torch.Generator().manual_seed(seed)
    yx = torch.rand(B, K, 2, generator=g) * size
    hw = 6 + torch.rand(B, K, 2, generator=g) * 14
    return ObjectSet(torch.cat([yx, hw], -1), torch.randn(B, K, CFG.A, generator=g),
                     0.05 + 0.9 * torch.rand(B, K, generator=g),
                     torch.rand(B, K, generator=g), torch.randn(B, K, CFG.hidden_dim, generator=g))


def test_update_functions_at_zero():
    prev = prev_set(2, 5)
    zero = torch.zeros(2, 5, 4)
    where, what, depth = apply_updates(prev, zero, torch.zeros(2, 5, CFG.A), torch.zeros(2, 5), CFG)
    assert torch.allclose(where, prev.where, atol=1e-9)
    assert torch.equal(what, prev.what)
    assert torch.allclose(depth, prev.depth, atol=1e-12)
    assert f_depth(torch.tensor(0.5), torch.tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)
    assert f_size(torch.tensor(24.0), torch.tensor(0.0), 48.0).item() == pytest.approx(24.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(0, 100), st.floats(-50, 50))
def test_position_step_bounded_by_cell(o, c, z):
    new = f_position(torch.tensor(o), torch.tensor(z), c)
    assert abs(new.item() - o) <= c + 1e-9


def test_logit_clamping_keeps_extremes_finite():
    assert torch.isfinite(f_depth(torch.tensor([0.0, 1.0]), torch.zeros(2))).all()
    assert torch.isfinite(f_size(torch.tensor([0.0, 48.0]), torch.zeros(2), 48.0)).all()


def test_pres_never_increases_and_zero_is_absorbing():
    torch.manual_seed(0)
    prop = Propagation(CFG)
    frames = torch.rand(1000, 48, 48, 3)
    prev = prev_set(1000, 10, seed=1)
    prev = prev.replace(pres=torch.where(torch.arange(10) % 5 == 0, 0.0, prev.pres))
    g = torch.Generator().manual_seed(2)
    with torch.no_grad():
        out, _ = prop(frames, prev, "sample", g)
    assert bool((out.pres <= prev.pres).all())
    assert bool((out.pres[prev.pres == 0] == 0).all())


def test_mean_mode_zero_heads_copy_attributes():
    torch.manual_seed(1)
    prop = Propagation(CFG)
    for head in (prop.heads.p_where, prop.heads.p_what, prop.heads.p_depth, prop.heads.p_pres):
        torch.nn.init.zeros_(head.out_layer.weight)
        torch.nn.init.zeros_(head.out_layer.bias)
    prev = prev_set(2, 4)
    with torch.no_grad():
        out, _ = prop(torch.rand(2, 48, 48, 3), prev, "mean")
    assert torch.allclose(out.where, prev.where, atol=1e-9)
    assert torch.equal(out.what, prev.what)
    assert torch.allclose(out.depth, prev.depth, atol=1e-12)
    assert torch.allclose(out.pres, prev.pres * 0.5, atol=1e-15)


def test_zero_glimpse_offset_reads_at_previous_box():
    torch.manual_seed(2)
    prop = Propagation(ModelConfig(width_scale=0.25, A=8, hidden_dim=16, glimpse_offset_scale=0.0))
    prev = prev_set(2, 6)
    u_td = prop.attention(prev)
    assert torch.equal(prop.glimpse_box(prev, u_td), prev.where)


def test_update_hidden_properties():
    torch.manual_seed(3)
    prop = Propagation(CFG)
    prev = prev_set(1, 5)
    wf = torch.rand(1, 5, 4)
    args = (prev.hidden, wf, prev.what, prev.depth, prev.pres)
    a, b = prop.update_hidden(*args), prop.update_hidden(*args)
    assert torch.equal(a, b)
    perm = torch.tensor([3, 0, 4, 1, 2])
    permuted = prop.update_hidden(*(t[:, perm] for t in args))
    assert torch.allclose(permuted, a[:, perm], atol=1e-14)
    zeros = prop.update_hidden(torch.zeros(1, 5, 16), torch.zeros(1, 5, 4), torch.zeros(1, 5, 8),
                               torch.zeros(1, 5), torch.zeros(1, 5))
    assert torch.allclose(zeros, zeros[:, :1].expand_as(zeros), atol=0)


def test_whole_step_is_permutation_equivariant():
    torch.manual_seed(4)
    prop = Propagation(CFG)
    frames = torch.rand(1, 48, 48, 3)
    prev = prev_set(1, 6, seed=5)
    perm = torch.tensor([[5, 2, 0, 4, 1, 3]])
    with torch.no_grad():
        a, _ = prop(frames, prev, "mean")
        b, _ = prop(frames, prev.gather(perm), "mean")
    for name in ("where", "what", "depth", "pres", "hidden"):
        assert torch.allclose(getattr(b, name), getattr(a, name)[:, perm[0]], atol=1e-12)


def test_prior_takes_no_frame_and_keeps_pres_monotone():
    torch.manual_seed(5)
    prop = Propagation(CFG)
    prior = PriorPropagation(CFG, prop.p_rnn)
    params = inspect.signature(prior.forward).parameters
    assert not any("frame" in name for name in params)
    prev = prev_set(40, 50, seed=6)
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        out, dist = prior(prev, "sample", g)
    assert bool((out.pres <= prev.pres).all())
    assert set(dist) == {"yx", "hw", "what", "depth", "pres"}
    # no glimpse networks in the prior
    assert not any(hasattr(prior, n) for n in ("p_glimpse", "p_bu", "p_obj"))


def test_prior_scores_posterior_samples():
    torch.manual_seed(6)
    prop = Propagation(CFG)
    prior = PriorPropagation(CFG, prop.p_rnn)
    prev = prev_set(2, 3)
    g = torch.Generator().manual_seed(1)
    post, record = prop(torch.rand(2, 48, 48, 3), prev, "sample", g)
    conditioned, _ = prior(prev, posterior=record)
    # feeding the posterior latents through the prior's update path reproduces the posterior state
    for name in ("where", "what", "depth", "pres"):
        assert torch.allclose(getattr(conditioned, name), getattr(post, name), atol=1e-12)


def test_reconstruction_gradient_reaches_previous_where():
    torch.manual_seed(7)
    prop, renderer = Propagation(CFG), Renderer(CFG)
    frames = torch.zeros(1, 24, 24, 3)
    frames[0, 8:15, 9:17] = torch.tensor([0.9, 0.2, 0.6])
    base = prev_set(1, 1, seed=3, size=24.0)

    def loss(where):
        prev = base.replace(where=where)
        objs, _ = prop(frames, prev, "mean")
        return -frame_log_likelihood(frames, renderer(objs, (24, 24))).sum()

    where = torch.tensor([[[11.37, 12.61, 7.13, 8.29]]], requires_grad=True)
    (grad,) = torch.autograd.grad(loss(where), where)
    assert grad.abs().max().item() > 0
    eps = 1e-6
    fd = torch.zeros(4)
    with torch.no_grad():
        for i in range(4):
            d = torch.zeros(1, 1, 4)
            d[..., i] = eps
            fd[i] = (loss(where + d) - loss(where - d)) / (2 * eps)
    rel = (grad.flatten() - fd).abs().max() / fd.abs().max()
    assert rel.item() < 1e-3
