"""Per-timestep dataflow: propagate, discover, select, render."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .core import LatentRecord, ModelConfig, ObjectSet, concat_object_sets, empty_object_set
from .discovery import Discovery
from .geometry import GridSpec, compute_grid_spec
from .propagation import PriorPropagation, Propagation
from .render import Renderer, select_top_k


class ModuleError(RuntimeError):
    def __init__(self, t: int, module: str, cause: Exception):
        super().__init__(f"t={t} module={module}: {cause}")
        self.t, self.module = t, module


class FrameSource:
    """Wraps a (B, T, H, W, 3) float tensor and counts per-timestep reads."""

    def __init__(self, frames: torch.Tensor):
        self.frames = frames
        self.reads = [0] * frames.shape[1]

    @property
    def n_frames(self) -> int:
        return self.frames.shape[1]

    @property
    def shape(self):
        return self.frames.shape

    def get(self, t: int) -> torch.Tensor:
        self.reads[t] += 1
        return self.frames[:, t]


@dataclass
class Step:
    propagated: ObjectSet | None
    discovered: ObjectSet | None
    selected: ObjectSet
    rendered: torch.Tensor
    record: LatentRecord
    index: torch.Tensor          # (B, K) rows of (propagated ++ discovered) that were kept
    ids: np.ndarray              # (B, K) track id per selected row
    discovered_mask: np.ndarray  # (B, K) True where the row was discovered this step
    prior: bool = False          # the learned prior replaced posterior propagation


@dataclass
class RolloutTrace:
    steps: list[Step] = field(default_factory=list)
    grid: GridSpec | None = None

    def __len__(self):
        return len(self.steps)

    def __getitem__(self, t):
        return self.steps[t]


class Silot(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.discovery = Discovery(config)
        self.propagation = Propagation(config)
        self.prior_propagation = PriorPropagation(config, self.propagation.p_rnn)
        self.renderer = Renderer(config)
        self.hidden_init = nn.Parameter(torch.zeros(config.hidden_dim))

    def grid_for(self, H: int, W: int) -> GridSpec:
        return compute_grid_spec(H, W, self.config)

    def degenerate(self, K: int, B: int, frame_size) -> ObjectSet:
        return empty_object_set(K, B, frame_size, self.config.anchor, self.config.A,
                                self.hidden_init)

    def run_video(self, frames, mode: str = "sample", generator=None, dropout_mask=None,
                  block_grads: bool = False, prior_from: int | None = None,
                  learned_prior: bool = False, check: bool = False) -> RolloutTrace:
        """Process a batch of videos.

        frames: (B, T, H, W, 3) float tensor in [0, 1] or a FrameSource.
        dropout_mask: length-T booleans, True where discovery runs (t=0 must be on).
        prior_from: from this timestep on, discovery is off and the frame-free prior
            propagation replaces posterior propagation; frames are never read there.
        learned_prior: also evaluate the learned prior on each posterior step
            (needed for the training objective).
        """
        src = frames if isinstance(frames, FrameSource) else FrameSource(frames)
        B, T, H, W, _ = src.shape
        cfg = self.config
        K = cfg.K
        grid = self.grid_for(H, W)
        if dropout_mask is None:
            dropout_mask = [True] * T
        dropout_mask = [bool(m) for m in dropout_mask]
        if not dropout_mask[0]:
            raise ValueError("discovery must run at t=0")
        trace = RolloutTrace(grid=grid)
        next_id = np.zeros(B, dtype=np.int64)
        prev = None
        prev_ids = np.full((B, K), -1, dtype=np.int64)
        pad = self.degenerate(K, B, (H, W))

        for t in range(T):
            use_prior = prior_from is not None and t >= prior_from
            record = LatentRecord(disc_on=dropout_mask[t] and not use_prior)
            x = None if use_prior else src.get(t)
            module = "propagation"
            try:
                if t == 0:
                    propagated = None
                    prop_for_disc = self.degenerate(K, B, (H, W))
                    prop_ids = np.full((B, K), -1, dtype=np.int64)
                elif use_prior:
                    propagated, _ = self.prior_propagation(prev, mode=mode, generator=generator)
                    prop_for_disc, prop_ids = propagated, prev_ids
                else:
                    propagated, record.prop = self.propagation(x, prev, mode, generator, block_grads)
                    if learned_prior:
                        module = "prior_propagation"
                        _, record.prior = self.prior_propagation(prev, posterior=record.prop)
                    prop_for_disc, prop_ids = propagated, prev_ids

                module = "discovery"
                if record.disc_on:
                    discovered, record.disc = self.discovery(
                        x, prop_for_disc, grid, self.hidden_init, mode, generator, block_grads)
                    union = concat_object_sets(prop_for_disc, discovered)
                else:
                    discovered = None
                    union = prop_for_disc

                module = "selection"
                selected, index = select_top_k(union, K, pad)
                idx = index.cpu().numpy()
                is_disc = idx >= K
                union_ids = np.concatenate([prop_ids, np.full((B, union.n_objects - K), -1)], 1) \
                    if union.n_objects > K else prop_ids
                ids = np.take_along_axis(union_ids, np.minimum(idx, union_ids.shape[1] - 1), 1)
                ids = np.where(is_disc | (idx >= union.n_objects), -1, ids)
                for b in range(B):
                    for k in range(K):
                        if ids[b, k] < 0:
                            ids[b, k] = next_id[b]
                            next_id[b] += 1

                module = "render"
                rendered = self.renderer(selected, (H, W))
                if check:
                    selected.check_bounds()
            except ModuleError:
                raise
            except Exception as exc:
                raise ModuleError(t, module, exc) from exc

            trace.steps.append(Step(propagated, discovered, selected, rendered, record, index,
                                    ids, is_disc & (idx < union.n_objects), prior=use_prior))
            prev, prev_ids = selected, ids
        return trace
