import json
import warnings

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from silot.core import (ConfigurationError, ModelConfig, NumericFault, ObjectSet, PriorConfig,
                        TrainSchedule, concat_object_sets, empty_object_set)


def make_set(B, K, A=3, D=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ObjectSet(
        where=torch.rand(B, K, 4, generator=g) * 10 + 1,
        what=torch.randn(B, K, A, generator=g),
        depth=torch.rand(B, K, generator=g),
        pres=torch.rand(B, K, generator=g),
        hidden=torch.randn(B, K, D, generator=g),
    )


def test_concat_shapes_and_order():
    a, b = make_set(2, 2, seed=1), make_set(2, 3, seed=2)
    out = concat_object_sets(a, b)
    assert out.n_objects == 5
    assert torch.equal(out.where[:, 0], a.where[:, 0])
    assert torch.equal(out.what[:, 2:], b.what)


def test_concat_with_empty_is_identity():
    a = make_set(1, 4)
    out = concat_object_sets(a, make_set(1, 0))
    for name in ("where", "what", "depth", "pres", "hidden"):
        assert torch.equal(getattr(out, name), getattr(a, name))


def test_concat_pres_values():
    a, b = make_set(1, 1), make_set(1, 2)
    a = a.replace(pres=torch.tensor([[0.9]]))
    b = b.replace(pres=torch.tensor([[0.1, 0.2]]))
    assert concat_object_sets(a, b).pres[0].tolist() == pytest.approx([0.9, 0.1, 0.2])


def test_concat_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        concat_object_sets(make_set(1, 2, A=3), make_set(1, 2, A=4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5), st.integers(0, 5), st.integers(1, 3))
def test_concat_then_split_round_trip(ka, kb, B):
    a, b = make_set(B, ka, seed=ka), make_set(B, kb, seed=10 + kb)
    left, right = concat_object_sets(a, b).split(ka)
    for name in ("where", "what", "depth", "pres", "hidden"):
        assert torch.equal(getattr(left, name), getattr(a, name))
        assert torch.equal(getattr(right, name), getattr(b, name))


def test_empty_object_set():
    h0 = torch.randn(7)
    assert empty_object_set(0, 2, (48, 48), (48, 48), 4, h0).n_objects == 0
    s = empty_object_set(16, 2, (48, 40), (48, 48), 4, h0)
    assert s.n_objects == 16 and bool((s.pres == 0).all())
    assert s.where[0, 0].tolist() == [24.0, 20.0, 48.0, 48.0]
    assert bool((s.depth == 0.5).all()) and bool((s.what == 0).all())
    assert torch.equal(s.hidden[1, 5], h0)
    s2 = empty_object_set(16, 2, (48, 40), (48, 48), 4, h0)
    assert torch.equal(s.where, s2.where) and torch.equal(s.hidden, s2.hidden)


def test_empty_object_set_hidden_is_differentiable():
    h0 = torch.zeros(3, requires_grad=True)
    empty_object_set(4, 2, (8, 8), (8, 8), 2, h0).hidden.sum().backward()
    assert h0.grad.tolist() == [8.0, 8.0, 8.0]


def test_check_bounds():
    s = make_set(1, 3)
    s.check_bounds()
    with pytest.raises(NumericFault):
        s.replace(pres=torch.tensor([[0.5, 1.5, 0.0]])).check_bounds()
    with pytest.raises(NumericFault):
        s.replace(where=-s.where).check_bounds()


def test_gather_rows():
    s = make_set(2, 4)
    idx = torch.tensor([[3, 0], [1, 2]])
    g = s.gather(idx)
    assert torch.equal(g.what[0, 0], s.what[0, 3])
    assert torch.equal(g.hidden[1, 1], s.hidden[1, 2])


def test_model_config_defaults_and_validation():
    cfg = ModelConfig()
    assert (cfg.K, cfg.A, cfg.anchor, cfg.cell, cfg.obj_shape) == (16, 64, (48.0, 48.0), (12, 12), (14, 14))
    assert (cfg.b_min, cfg.b_max, cfg.attn_sigma, cfg.render_temp) == (-0.5, 1.5, 0.1, 0.25)
    assert (cfg.mu_beta, cfg.sigma_beta, cfg.mu_xi, cfg.sigma_xi) == (0.0, 2.0, 5.0, 0.1)
    assert cfg.train.p_dd == 0.5 and cfg.train.lr == 1e-4 and cfg.train.batch_size == 16
    assert cfg.prior.disc_hw == (-2.2, 0.5) and cfg.prior.learned_prior_weight == 0.5
    for bad in ({"b_min": 2.0}, {"render_temp": 0.0}, {"K": 0}):
        with pytest.raises(ConfigurationError):
            ModelConfig(**bad)
    with pytest.raises(ConfigurationError):
        PriorConfig(disc_yx=(0.0, -1.0))
    with pytest.raises(ConfigurationError):
        TrainSchedule(p_dd=1.5)


def test_model_config_round_trip(tmp_path):
    cfg = ModelConfig(K=8, prior={"count_end": 2.0}, train={"lr": 3e-4})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = ModelConfig.load(path)
    assert again == cfg
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"bogus": 1})


def test_capacity_warning():
    cfg = ModelConfig(K=16)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert cfg.check_capacity(12)
    with pytest.warns(UserWarning):
        assert not cfg.check_capacity(13)
