"""Sampling and deployment.

Generation integrates the learned field with plain Euler steps on a uniform
grid over t in [0, 1]; one step is the deployment setting. The receding
horizon loop replans after executing a prefix of each planned chunk and
records wall-clock per planning call, spectral mask and local operator fits
included.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .backbone import Conditioning, KoopmanFlowModel
from .errors import ConfigError


@dataclass
class SamplerConfig:
    nfe: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.nfe < 1:
            raise ConfigError(f"nfe must be >= 1, got {self.nfe}")


@dataclass
class RhcConfig:
    horizon: int = 4   # planned steps taken from each sampled trajectory
    execute: int = 3   # steps executed before replanning

    def __post_init__(self):
        if not 1 <= self.execute <= self.horizon:
            raise ConfigError(
                f"need 1 <= execute <= horizon, got {self.execute}/{self.horizon}"
            )


def euler_sample_batch(model, events: np.ndarray, context: np.ndarray,
                       cfg: SamplerConfig, rng: np.random.Generator | None = None,
                       return_fields: bool = False):
    """Integrate from noise to a clean batch [B, T, D] in ``cfg.nfe`` steps."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    B = events.shape[0]
    cond = Conditioning(events=events, context=context)
    x = rng.standard_normal((B, model.cfg.T, model.cfg.D))
    fields = None
    for k in range(cfg.nfe):
        t = np.full(B, k / cfg.nfe)
        fields, _ = model.forward(x, cond, t)
        x = x + fields.v_total.data / cfg.nfe
    if return_fields:
        return x, fields
    return x


def euler_sample(model, cond: Conditioning, cfg: SamplerConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Single-condition convenience wrapper; returns [T, D]."""
    events = np.atleast_2d(cond.events)
    context = np.atleast_2d(cond.context)
    return euler_sample_batch(model, events, context, cfg, rng=rng)[0]


def variant_magnitude_report(model, x_t: np.ndarray, cond: Conditioning, t):
    """Per-step norms of the variant and total fields along the sequence."""
    if x_t.ndim == 2:
        x_t = x_t[None]
        cond = Conditioning(events=np.atleast_2d(cond.events),
                            context=np.atleast_2d(cond.context))
    fields, _ = model.forward(x_t, cond, t)
    v_var = np.linalg.norm(fields.v_var.data, axis=-1).mean(axis=0)
    v_total = np.linalg.norm(fields.v_total.data, axis=-1).mean(axis=0)
    return v_var, v_total


def rhc_execute(env, model: KoopmanFlowModel, rhc: RhcConfig,
                sampler: SamplerConfig, episode_len: int):
    """Plan / execute / replan until the episode ends.

    Returns the stitched executed trajectory (exactly ``episode_len`` steps
    unless the environment terminates early) and per-call latencies in ms.
    """
    rng = np.random.default_rng(sampler.seed)
    executed: list[np.ndarray] = []
    latencies_ms: list[float] = []
    taken = 0
    while taken < episode_len and not env.done:
        events, context = env.observe()
        start = time.perf_counter()
        plan = euler_sample(
            model, Conditioning(events=events, context=context), sampler, rng=rng
        )
        latencies_ms.append((time.perf_counter() - start) * 1e3)
        want = min(rhc.execute, episode_len - taken)
        chunk = plan[: rhc.horizon][:want]
        accepted = env.apply(chunk)
        executed.append(chunk[:accepted])
        taken += accepted
        if accepted < len(chunk):
            break
    trajectory = (
        np.concatenate(executed, axis=0) if executed
        else np.zeros((0, model.cfg.D))
    )
    return trajectory, latencies_ms
