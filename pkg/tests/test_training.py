import math

import numpy as np
import pytest
import torch

import silot.training as training
from silot.core import ModelConfig, NumericFault, PriorConfig
from silot.model import Silot
from silot.training import (_DISC_PRIORS, TrainingDiverged, curriculum_frames, discovery_dropout_mask,
                            elbo_estimate, expected_count, normal_kl, normal_logpdf, pres_prior_logprob,
                            train)


def tiny_config(**train_kw):
    return ModelConfig(width_scale=0.25, A=8, hidden_dim=16, K=4,
                       train={"batch_size": 4, **train_kw})


def tiny_videos(N=4, T=2, seed=0):
    rng = np.random.default_rng(seed)
    frames = np.zeros((N, T, 24, 24, 3), dtype=np.uint8)
    for n in range(N):
        y, x = rng.integers(2, 14, 2)
        for t in range(T):
            frames[n, t, y:y + 7, x + t:x + t + 7, n % 3] = 255
    return frames


# --- KL and priors


def test_normal_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        mq, mp = rng.normal(0, 1.5, 2)
        sq, sp = rng.uniform(0.3, 2.0, 2)
        z = mq + sq * torch.randn(100_000, generator=g, dtype=torch.float64)
        log_q = -0.5 * ((z - mq) / sq) ** 2 - math.log(sq)
        log_p = -0.5 * ((z - mp) / sp) ** 2 - math.log(sp)
        samples = log_q - log_p
        se = samples.std().item() / math.sqrt(len(samples))
        closed = normal_kl(torch.tensor(mq, dtype=torch.float64), torch.tensor(sq), mp, sp).item()
        assert abs(samples.mean().item() - closed) < 3 * se


def test_normal_kl_reference_case_and_self():
    closed = normal_kl(torch.tensor(1.0), torch.tensor(0.5), 0.0, 1.0).item()
    assert closed == pytest.approx(math.log(2) + (0.25 + 1) / 2 - 0.5)
    mu, sigma = torch.randn(5), torch.rand(5) + 0.1
    assert torch.equal(normal_kl(mu, sigma, mu, sigma), torch.zeros(5))


def test_expected_count_schedule():
    prior = PriorConfig(count_start=8.0, count_end=0.5, count_anneal_steps=100)
    assert expected_count(0, prior, 16, 0) == 8.0
    assert expected_count(100, prior, 16, 0) == pytest.approx(0.5)
    assert expected_count(10_000, prior, 16, 0) == pytest.approx(0.5)
    assert expected_count(50, prior, 16, 0) == pytest.approx(2.0)
    flat = PriorConfig(count_start=3.0, count_end=3.0, count_anneal_steps=100)
    assert {expected_count(s, flat, 16, 0) for s in (0, 7, 100, 500)} == {3.0}
    defaults = PriorConfig()
    assert expected_count(0, defaults, 16, 10) == 8.0
    assert expected_count(10, defaults, 16, 10) == pytest.approx(16 / 50)


@pytest.mark.parametrize("target", [1.0, 2.5, 6.0])
def test_pres_prior_peaks_at_target_count(target):
    cfg = ModelConfig(prior={"count_start": target, "count_end": target})
    N = 32
    p = torch.linspace(0.001, 0.999, 9981, dtype=torch.float64)
    scores = pres_prior_logprob(p[:, None].expand(-1, N), 0, cfg, 16)
    best_mass = (p[scores.argmax()] * N).item()
    assert best_mass == pytest.approx(target, abs=N * 1e-4)


def test_curriculum():
    assert curriculum_frames(0, 8, 100) == 2
    assert curriculum_frames(100, 8, 100) == 4
    assert curriculum_frames(300, 8, 100) == 8
    assert curriculum_frames(10_000, 8, 100) == 8
    vals = [curriculum_frames(s, 7, 10) for s in range(100)]
    assert vals == sorted(vals) and max(vals) == 7


def test_discovery_dropout_mask():
    rng = np.random.default_rng(0)
    assert discovery_dropout_mask(8, 0.0, rng).all()
    assert discovery_dropout_mask(8, 1.0, rng).tolist() == [True] + [False] * 7
    draws = np.stack([discovery_dropout_mask(8, 0.5, rng) for _ in range(10_000)])
    assert draws[:, 0].all()
    assert 0.48 <= 1 - draws[:, 1:].mean() <= 0.52
    with pytest.raises(ValueError):
        discovery_dropout_mask(3, 1.5, rng)


# --- ELBO assembly


def test_dropped_discovery_adds_no_discovery_kl():
    torch.manual_seed(0)
    model = Silot(tiny_config())
    x = torch.as_tensor(tiny_videos(T=3)).float() / 255
    g = torch.Generator().manual_seed(0)
    elbo, terms = elbo_estimate(model, x, 0, g, dropout_mask=[True, False, True])
    kl = [s["disc_kl"] for s in terms.per_step]
    assert kl[1] == 0.0 and kl[0] > 0 and kl[2] > 0
    total = terms.log_likelihood - terms.disc_kl + terms.prop_log_ratio + terms.pres_prior
    assert torch.allclose(elbo, total)


def test_closed_form_kl_does_not_bias_the_estimate():
    # swapping each closed-form KL for its one-sample log q - log p must leave the mean unchanged
    torch.manual_seed(4)
    model = Silot(tiny_config()).eval()
    x = torch.as_tensor(tiny_videos(N=1, T=2)).float().expand(2000, -1, -1, -1, -1) / 255
    g = torch.Generator().manual_seed(0)
    diffs = []
    with torch.no_grad():
        for _ in range(5):
            trace = model.run_video(x, mode="sample", generator=g, learned_prior=True)
            for s in trace.steps:
                for key, name in _DISC_PRIORS.items():
                    mu, sigma, z = s.record.disc[key]
                    pm, ps = getattr(model.config.prior, name)
                    closed = normal_kl(mu, sigma, pm, ps)
                    sampled = normal_logpdf(z, mu, sigma) - normal_logpdf(z, pm, ps)
                    diffs.append((closed - sampled).reshape(len(x), -1).sum(-1))
    d = torch.stack(diffs).sum(0).double()
    assert abs(d.mean().item()) < 3 * d.std().item() / math.sqrt(len(d))


def test_warmup_blocks_reconstruction_gradient_to_where_heads():
    torch.manual_seed(1)
    model = Silot(tiny_config())
    x = torch.as_tensor(tiny_videos()).float() / 255

    def where_head_grads(block):
        model.zero_grad()
        _, terms = elbo_estimate(model, x, 0, torch.Generator().manual_seed(3), block_grads=block)
        terms.log_likelihood.sum().backward()
        heads = [model.discovery.d_where, model.propagation.heads.p_where]
        return [p.grad for h in heads for p in h.parameters()]

    gated = where_head_grads(True)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in gated)
    open_ = where_head_grads(False)
    assert any(g is not None and float(g.abs().max()) > 0 for g in open_)

    # the loss itself still responds to where
    def loss(delta):
        hook = model.discovery.d_where.register_forward_hook(lambda m, i, o: o + delta)
        with torch.no_grad():
            _, terms = elbo_estimate(model, x, 0, torch.Generator().manual_seed(3), block_grads=True)
        hook.remove()
        return terms.log_likelihood.sum().item()

    assert loss(0.0) != loss(0.5)


def test_clip_bounds_global_norm():
    torch.manual_seed(2)
    model = Silot(tiny_config())
    x = torch.as_tensor(tiny_videos()).float() / 255
    elbo, _ = elbo_estimate(model, x, 0, torch.Generator().manual_seed(0))
    (-1e4 * elbo.sum()).backward()
    before = training._gated_clip(model, 10.0)
    after = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in model.parameters() if p.grad is not None))
    assert before > 10 and after <= 10 + 1e-3


# --- training loop


def test_lr_divided_by_nine_after_two_early_stops(monkeypatch):
    metrics = iter([1.0, 0.5, 0.4, 0.3, 0.2])
    monkeypatch.setattr(training, "validation_metric", lambda *a, **k: next(metrics))
    cfg = tiny_config(patience=1, val_every=1, n_curric=1, max_early_stops=3)
    res = train(tiny_videos(), cfg, steps=3, val_set=[object()], log_every=1)
    assert res.early_stops == 2
    assert res.history[-1]["lr"] == pytest.approx(1e-4 / 9)
    assert res.best_step == 1


def test_training_stops_after_max_early_stops(monkeypatch):
    monkeypatch.setattr(training, "validation_metric", lambda *a, **k: 0.0)
    cfg = tiny_config(patience=1, val_every=1, n_curric=1, max_early_stops=3)
    res = train(tiny_videos(), cfg, steps=50, val_set=[object()], log_every=1)
    assert res.early_stops == 3 and res.steps == 4


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_config()
    frames = tiny_videos()
    full = train(frames, cfg, steps=4, seed=5, out_dir=tmp_path / "a", log_every=2)
    train(frames, cfg, steps=2, seed=5, out_dir=tmp_path / "b", log_every=2)
    resumed = train(frames, cfg, steps=4, seed=5, out_dir=tmp_path / "b", resume=True, log_every=2)
    for (name, a), (_, b) in zip(full.model.state_dict().items(), resumed.model.state_dict().items()):
        assert torch.equal(a, b), name
    lines = (tmp_path / "b" / "log.jsonl").read_text().splitlines()
    assert len(lines) == 2


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(3)
    model = Silot(tiny_config())
    training.save_checkpoint(tmp_path / "m.pt", model, step=7)
    again, payload = training.load_checkpoint(tmp_path / "m.pt")
    assert payload["step"] == 7 and again.config == model.config
    for a, b in zip(model.parameters(), again.parameters()):
        assert torch.equal(a, b)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        training.load_checkpoint(tmp_path / "bad.pt")


def test_numeric_fault_aborts(monkeypatch):
    def broken(*a, **k):
        raise NumericFault("non-finite log_likelihood at t=0")

    monkeypatch.setattr(training, "elbo_estimate", broken)
    with pytest.raises(TrainingDiverged):
        train(tiny_videos(), tiny_config(), steps=2)


def test_nan_gradient_aborts_with_checkpoint_hint(monkeypatch, tmp_path):
    real = training.elbo_estimate
    calls = {"n": 0}

    def poisoned(model, *a, **k):
        elbo, terms = real(model, *a, **k)
        calls["n"] += 1
        if calls["n"] > 1:
            elbo = elbo * float("nan")
        return elbo, terms

    monkeypatch.setattr(training, "elbo_estimate", poisoned)
    with pytest.raises(TrainingDiverged, match="checkpoint"):
        train(tiny_videos(), tiny_config(), steps=5, out_dir=tmp_path, log_every=1)
    assert (tmp_path / "checkpoint.pt").exists()


def test_callback_can_end_training():
    seen = []
    res = train(tiny_videos(), tiny_config(), steps=10, log_every=2,
                callback=lambda record, model: seen.append(record["step"]) or record["step"] >= 4)
    assert seen == [2, 4] and res.steps == 4
