"""Training objective, priors, curriculum, discovery dropout and the optimisation loop."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import ModelConfig, NumericFault, PriorConfig
from .model import RolloutTrace, Silot
from .render import frame_log_likelihood

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "silot-checkpoint"
CHECKPOINT_VERSION = 1
_LOG_2PI = math.log(2 * math.pi)


class TrainingDiverged(RuntimeError):
    pass


def normal_kl(mu_q, sigma_q, mu_p, sigma_p):
    """Closed-form KL(N(mu_q, sigma_q) || N(mu_p, sigma_p)), elementwise."""
    sigma_p = torch.as_tensor(sigma_p, dtype=mu_q.dtype)
    mu_p = torch.as_tensor(mu_p, dtype=mu_q.dtype)
    return (torch.log(sigma_p / sigma_q)
            + (sigma_q ** 2 + (mu_q - mu_p) ** 2) / (2 * sigma_p ** 2) - 0.5)


def normal_logpdf(z, mu, sigma):
    sigma = torch.as_tensor(sigma, dtype=z.dtype)
    return -0.5 * ((z - mu) / sigma) ** 2 - torch.log(sigma) - 0.5 * _LOG_2PI


def logistic_logpdf(z, loc, temp):
    u = (z - loc) / temp
    return -u - 2 * torch.nn.functional.softplus(-u) - math.log(temp)


def bernoulli_kl(p, q):
    p = p.clamp(1e-6, 1 - 1e-6)
    q = torch.as_tensor(q, dtype=p.dtype).clamp(1e-6, 1 - 1e-6)
    return p * (torch.log(p) - torch.log(q)) + (1 - p) * (torch.log1p(-p) - torch.log1p(-q))


def expected_count(step: int, prior: PriorConfig, n_cells: int, anneal_default: int) -> float:
    """Target object count, annealed geometrically from many to few."""
    start = prior.count_start if prior.count_start is not None else 0.5 * n_cells
    end = prior.count_end if prior.count_end is not None else n_cells / 50.0
    steps = prior.count_anneal_steps if prior.count_anneal_steps is not None else anneal_default
    frac = 1.0 if steps <= 0 else min(max(step, 0) / steps, 1.0)
    return start * (end / start) ** frac


def pres_prior_logprob(pres: torch.Tensor, step: int, config: ModelConfig, n_cells: int) -> torch.Tensor:
    """Count-matching log prior on the pres values (B, N) of one timestep.

    Each object is scored against a Bernoulli whose rate spreads the target count
    c(step) over the N objects: -sum_k KL(Bern(pres_k) || Bern(c / N)). For a
    uniform pres vector this peaks exactly where the total pres mass equals c.
    """
    N = pres.shape[-1]
    if N == 0:
        return pres.new_zeros(pres.shape[:-1])
    c = expected_count(step, config.prior, n_cells, curriculum_duration(config))
    rate = min(max(c / N, 1e-6), 1 - 1e-6)
    return -bernoulli_kl(pres, rate).sum(-1)


def curriculum_duration(config: ModelConfig, T: int = 8) -> int:
    return (math.ceil(T / 2) - 1) * config.train.n_curric


def curriculum_frames(step: int, T: int, n_curric: int) -> int:
    return min(T, 2 + 2 * (step // n_curric))


def discovery_dropout_mask(T: int, p_dd: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= p_dd <= 1.0:
        raise ValueError("p_dd must lie in [0, 1]")
    mask = rng.random(T) >= p_dd
    mask[0] = True
    return mask


_DISC_PRIORS = {"yx": "disc_yx", "hw": "disc_hw", "what": "disc_what", "depth": "disc_depth"}
_PROP_PRIORS = {"yx": "prop_yx", "hw": "prop_hw", "what": "prop_what", "depth": "prop_depth"}


def _sum_tail(t: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape[0], -1).sum(-1)


def discovery_kl(record: dict, prior: PriorConfig) -> torch.Tensor:
    """Closed-form Normal KL of the discovery latents against the static prior, per video."""
    total = 0.0
    for key, name in _DISC_PRIORS.items():
        mu, sigma, _ = record[key]
        pm, ps = getattr(prior, name)
        total = total + _sum_tail(normal_kl(mu, sigma, pm, ps))
    return total


def mixture_logpdf(log_static: torch.Tensor, log_learned: torch.Tensor | None, w: float) -> torch.Tensor:
    """log((1 - w) * static + w * learned), mixing densities rather than log-densities."""
    if log_learned is None or w == 0:
        return log_static
    if w == 1:
        return log_learned
    return torch.logaddexp(log_static + math.log1p(-w), log_learned + math.log(w))


def propagation_log_ratio(record: dict, learned: dict | None, config: ModelConfig) -> torch.Tensor:
    """Single-sample log g(z) - log h(z|x) for the propagated latents, g being the
    mixture of static and learned priors."""
    prior = config.prior
    w = prior.learned_prior_weight
    total = 0.0
    for key, name in _PROP_PRIORS.items():
        mu, sigma, z = record[key]
        pm, ps = getattr(prior, name)
        log_learned = normal_logpdf(z, *learned[key]) if learned is not None else None
        log_g = mixture_logpdf(normal_logpdf(z, pm, ps), log_learned, w)
        total = total + _sum_tail(log_g - normal_logpdf(z, mu, sigma))
    loc, z = record["pres"]
    tau = config.bc_temp
    log_static = logistic_logpdf(z, torch.full_like(z, prior.prop_pres_loc), tau)
    log_learned = logistic_logpdf(z, learned["pres"][0], tau) if learned is not None else None
    log_g = mixture_logpdf(log_static, log_learned, w)
    return total + _sum_tail(log_g - logistic_logpdf(z, loc, tau))


@dataclass
class ElboTerms:
    elbo: torch.Tensor                      # (B,)
    log_likelihood: torch.Tensor            # (B,)
    disc_kl: torch.Tensor                   # (B,)
    prop_log_ratio: torch.Tensor            # (B,)
    pres_prior: torch.Tensor                # (B,)
    per_step: list[dict] = field(default_factory=list)


def elbo_from_trace(trace: RolloutTrace, frames: torch.Tensor, config: ModelConfig,
                    step: int) -> ElboTerms:
    """Assemble the single-sample ELBO estimate from a posterior rollout."""
    B = frames.shape[0]
    zero = frames.new_zeros(B)
    ll_tot, dkl_tot, prop_tot, pres_tot = zero, zero, zero, zero
    n_cells = trace.grid.n_cells
    per_step = []
    for t, s in enumerate(trace.steps):
        ll = frame_log_likelihood(frames[:, t], s.rendered)
        dkl = discovery_kl(s.record.disc, config.prior) if s.record.disc_on else zero
        prop = propagation_log_ratio(s.record.prop, s.record.prior, config) if s.record.prop else zero
        pres = []
        if s.record.prop:
            prev_pres = trace.steps[t - 1].selected.pres
            pres.append(prev_pres * torch.sigmoid(s.record.prop["pres"][1][..., 0]))
        if s.record.disc_on:
            pres.append(torch.sigmoid(s.record.disc["pres"][1][..., 0]))
        pp = pres_prior_logprob(torch.cat(pres, -1), step, config, n_cells)
        for name, v in (("log_likelihood", ll), ("disc_kl", dkl), ("prop", prop), ("pres", pp)):
            if not torch.isfinite(v).all():
                raise NumericFault(f"non-finite {name} at t={t}")
        ll_tot, dkl_tot, prop_tot, pres_tot = ll_tot + ll, dkl_tot + dkl, prop_tot + prop, pres_tot + pp
        per_step.append({"t": t, "log_likelihood": float(ll.detach().mean()),
                         "disc_kl": float(dkl.detach().mean()), "prop": float(prop.detach().mean()),
                         "pres": float(pp.detach().mean()),
                         "disc_on": s.record.disc_on})
    elbo = ll_tot - dkl_tot + prop_tot + pres_tot
    return ElboTerms(elbo, ll_tot, dkl_tot, prop_tot, pres_tot, per_step)


def elbo_estimate(model: Silot, frames: torch.Tensor, step: int = 0, generator=None,
                  dropout_mask=None, block_grads: bool = False) -> tuple[torch.Tensor, ElboTerms]:
    """Single-sample ELBO per video for frames (B, T, H, W, 3) in [0, 1]."""
    if frames.shape[1] < 1:
        raise ValueError("need at least one frame")
    trace = model.run_video(frames, mode="sample", generator=generator, dropout_mask=dropout_mask,
                            block_grads=block_grads, learned_prior=True)
    terms = elbo_from_trace(trace, frames, model.config, step)
    return terms.elbo, terms


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, model: Silot, optimizer=None, **state) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        **state,
    }
    tmp = path.with_suffix(".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, map_location="cpu") -> tuple[Silot, dict]:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported")
    model = Silot(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: Silot
    history: list[dict]
    best_metric: float
    best_step: int
    steps: int
    early_stops: int


def _gated_clip(model: Silot, max_norm: float) -> float:
    return float(torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm))


def train(train_frames: np.ndarray, config: ModelConfig, *, steps: int, seed: int = 0,
          val_set=None, out_dir: str | Path | None = None, resume: bool = False,
          log_every: int = 100, time_limit: float | None = None, callback=None) -> TrainResult:
    """Maximise the ELBO on uint8 videos ``train_frames`` (N, T, H, W, 3).

    ``val_set`` is a list of VideoSample used for early stopping (MOTA or ELBO per
    ``config.train.val_metric``). Checkpoints and an append-only JSONL log are
    written under ``out_dir`` when given. ``callback(record, model)`` runs at every
    logged step; a truthy return ends training there.
    """
    sched = config.train
    out = Path(out_dir) if out_dir is not None else None
    torch.manual_seed(seed)
    model = Silot(config)
    opt = torch.optim.Adam(model.parameters(), lr=sched.lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    step, lr, early_stops = 0, sched.lr, 0
    best_metric, best_step, best_state = -math.inf, 0, None
    last_improve = 0
    history: list[dict] = []

    if resume and out is not None and (out / "checkpoint.pt").exists():
        _, payload = load_checkpoint(out / "checkpoint.pt")
        model.load_state_dict(payload["state_dict"])
        opt.load_state_dict(payload["optimizer"])
        step, lr, early_stops = payload["step"], payload["lr"], payload["early_stops"]
        best_metric, best_step = payload["best_metric"], payload["best_step"]
        last_improve = payload["last_improve"]
        rng.bit_generator.state = payload["rng"]["numpy"]
        gen.set_state(payload["rng"]["torch"])
        torch.set_rng_state(payload["rng"]["torch_global"])
        if math.isfinite(best_metric) and (out / "best.pt").exists():
            best_state = torch.load(out / "best.pt", weights_only=False)["state_dict"]
        log.info("resumed at step %d", step)

    def set_lr(value):
        for g in opt.param_groups:
            g["lr"] = value

    set_lr(lr)
    N, T = train_frames.shape[:2]
    full_from = curriculum_duration(config, T)
    started = time.time()

    def snapshot():
        return {"step": step, "lr": lr, "early_stops": early_stops, "best_metric": best_metric,
                "best_step": best_step, "last_improve": last_improve,
                "rng": {"numpy": rng.bit_generator.state, "torch": gen.get_state(),
                        "torch_global": torch.get_rng_state()}}

    while step < steps and early_stops < sched.max_early_stops:
        if time_limit is not None and time.time() - started > time_limit:
            break
        idx = rng.choice(N, size=min(sched.batch_size, N), replace=False)
        n_frames = curriculum_frames(step, T, sched.n_curric)
        x = torch.as_tensor(train_frames[idx, :n_frames]).float() / 255.0
        mask = discovery_dropout_mask(n_frames, sched.p_dd, rng)
        model.train()
        try:
            elbo, terms = elbo_estimate(model, x, step, gen, mask,
                                        block_grads=step < sched.warmup_steps)
        except NumericFault as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        loss = -elbo.mean()
        opt.zero_grad()
        loss.backward()
        grad_norm = _gated_clip(model, sched.max_grad_norm)
        if not math.isfinite(grad_norm):
            if out is not None and (out / "checkpoint.pt").exists():
                raise TrainingDiverged(f"non-finite gradient at step {step}; last finite "
                                       f"checkpoint at {out / 'checkpoint.pt'}")
            raise TrainingDiverged(f"non-finite gradient at step {step}")
        opt.step()
        step += 1

        record = None
        if step % log_every == 0 or step == steps:
            n_pix = x.shape[1] * x.shape[2] * x.shape[3]
            record = {"step": step, "elbo": float(elbo.detach().mean()),
                      "bce_per_pixel": float(-terms.log_likelihood.detach().mean()) / n_pix,
                      "disc_kl": float(terms.disc_kl.detach().mean()),
                      "prop_log_ratio": float(terms.prop_log_ratio.detach().mean()),
                      "pres_prior": float(terms.pres_prior.detach().mean()),
                      "n_frames": n_frames, "lr": lr, "grad_norm": grad_norm,
                      "time": time.time() - started}

        if val_set is not None and step % sched.val_every == 0:
            metric = validation_metric(model, val_set, sched.val_metric, step)
            record = record or {"step": step}
            record["val_" + sched.val_metric] = metric
            if metric > best_metric:
                best_metric, best_step, last_improve = metric, step, step
                best_state = copy.deepcopy(model.state_dict())
                if out is not None:
                    save_checkpoint(out / "best.pt", model, None, **snapshot())
            elif step >= full_from and step - max(last_improve, full_from) >= sched.patience:
                early_stops += 1
                lr = lr / sched.lr_divisor
                model.load_state_dict(best_state)
                set_lr(lr)
                last_improve = step
                record["early_stop"] = early_stops
                record["lr"] = lr
                log.info("early stop %d at step %d, lr -> %g", early_stops, step, lr)

        if record is not None:
            history.append(record)
            log.info(json.dumps(record))
            if out is not None:
                out.mkdir(parents=True, exist_ok=True)
                with open(out / "log.jsonl", "a") as f:
                    f.write(json.dumps(record) + "\n")
                save_checkpoint(out / "checkpoint.pt", model, opt, **snapshot())
            if callback is not None and callback(record, model):
                break

    if out is not None:
        save_checkpoint(out / "checkpoint.pt", model, opt, **snapshot())
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_step = step
        if out is not None:
            save_checkpoint(out / "best.pt", model, None, **snapshot())
    return TrainResult(model, history, best_metric, best_step, step, early_stops)


def validation_metric(model: Silot, val_set, metric: str, step: int = 0) -> float:
    from .evaluation import evaluate_model

    model.eval()
    with torch.no_grad():
        if metric == "mota":
            report = evaluate_model(model, val_set)
            return report["overall"]["mota"]
        frames = torch.stack([v.float_frames() for v in val_set])
        gen = torch.Generator().manual_seed(0)
        elbo, _ = elbo_estimate(model, frames, step, gen)
        return float(elbo.mean())
