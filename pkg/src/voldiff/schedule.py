"""Discrete diffusion noise schedules and DDIM timestep selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta diffusion schedule.

    All arrays are float64; immutable after construction so it can be
    shared freely across workers.
    """

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "beta_start": self.beta_start,
                           "beta_end": self.beta_end})

    @staticmethod
    def from_json(doc: str) -> "NoiseSchedule":
        d = json.loads(doc)
        return build_linear_schedule(d["T"], d["beta_start"], d["beta_end"])


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                          beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated beta schedule with running-product alpha_bar."""
    if T < 1:
        raise InvalidParameterError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidParameterError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta_start=beta_start, beta_end=beta_end,
                         beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def ddim_timesteps(T: int, S: int) -> np.ndarray:
    """Uniform-stride subsequence of {0..T-1} ending at T-1, length S.

    Consumed in reverse during sampling.
    """
    if not (1 <= S <= T):
        raise InvalidParameterError(f"need 1 <= S <= T, got S={S}, T={T}")
    stride = T // S
    ts = T - 1 - stride * np.arange(S - 1, -1, -1, dtype=np.int64)
    return ts
