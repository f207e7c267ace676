"""Deterministic DDIM generation loop."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .param import predict_eps, predict_x0
from .schedule import NoiseSchedule, ddim_timesteps
from .volume import Volume


@dataclass
class SamplerConfig:
    steps: int = 64
    eta: float = 0.0
    seed: int = 0
    shape: tuple = (16, 16, 16)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")


class NoiseStream:
    """Counter-based Gaussian stream: Philox 64-bit uniforms through
    Box-Muller, so a (seed, shape) pair reproduces identically anywhere."""

    def __init__(self, seed: int):
        self._rng = np.random.Generator(np.random.Philox(seed))

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        npairs = (n + 1) // 2
        u1 = self._rng.random(npairs)          # [0, 1); flip to (0, 1]
        u2 = self._rng.random(npairs)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)


def gaussian_noise(seed: int, shape) -> np.ndarray:
    return NoiseStream(seed).normal(shape)


def ddim_step(xt, x0_hat, eps_hat, ab_t: float, ab_prev: float,
              eta: float = 0.0, noise=None):
    """One DDIM update from signal level ab_t to ab_prev (ab_prev >= ab_t;
    ab_prev = 1 collapses to the clean estimate)."""
    if not (0.0 < ab_t < 1.0):
        raise ValueError(f"ab_t must lie in (0, 1), got {ab_t}")
    if not (ab_t <= ab_prev <= 1.0):
        raise ValueError(f"need ab_t <= ab_prev <= 1, got ({ab_t}, {ab_prev})")
    sigma = 0.0
    if eta > 0.0 and ab_prev < 1.0:
        sigma = (eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
                 * math.sqrt(1.0 - ab_t / ab_prev))
    dir_coeff = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * np.asarray(x0_hat) + dir_coeff * np.asarray(eps_hat)
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise tensor")
        out = out + sigma * np.asarray(noise)
    return out


def generate(denoiser, schedule: NoiseSchedule, cfg: SamplerConfig) -> Volume:
    """Run the reverse DDIM loop from seeded unit noise to a volume.

    Deterministic given (seed, eta=0, denoiser weights).
    """
    if schedule.T < cfg.steps:
        raise ValueError(f"schedule.T={schedule.T} < steps={cfg.steps}")
    stream = NoiseStream(cfg.seed)
    x = stream.normal(cfg.shape)
    ts = ddim_timesteps(schedule.T, cfg.steps)
    for i in range(len(ts) - 1, -1, -1):
        t = int(ts[i])
        ab_t = float(schedule.alpha_bar[t])
        ab_prev = float(schedule.alpha_bar[int(ts[i - 1])]) if i > 0 else 1.0
        pred = denoiser.predict(x, t)
        if pred.shape != x.shape:
            raise ValueError(f"denoiser returned shape {pred.shape}, expected {x.shape}")
        x0_hat = predict_x0(denoiser.kind, pred, x, ab_t)
        eps_hat = predict_eps(denoiser.kind, pred, x, ab_t)
        noise = stream.normal(cfg.shape) if (cfg.eta > 0.0 and ab_prev < 1.0) else None
        x = ddim_step(x, x0_hat, eps_hat, ab_t, ab_prev, cfg.eta, noise)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite values after step t={t}")
    return Volume(data=x.astype(np.float32))


def sidecar_metadata(cfg: SamplerConfig, kind, schedule: NoiseSchedule,
                     volume: Volume) -> dict:
    return {
        "seed": cfg.seed,
        "steps": cfg.steps,
        "eta": cfg.eta,
        "kind": str(kind),
        "schedule": {"T": schedule.T, "beta_start": schedule.beta_start,
                     "beta_end": schedule.beta_end},
        "value_range": [float(volume.data.min()), float(volume.data.max())],
    }
