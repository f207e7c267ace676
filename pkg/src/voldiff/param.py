"""Prediction-target construction and inversion for the three model kinds.

All operations are pure elementwise algebra on arrays plus a scalar
signal-retention factor ``ab`` (the cumulative alpha product at the
current step), so they apply equally to scalars, vectors, and volumes.
"""
from __future__ import annotations

import enum
import math

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class PredictionKind(enum.Enum):
    SAMPLE = "sample"
    VELOCITY = "velocity"
    FLOW = "flow"

    @staticmethod
    def from_str(s: str) -> "PredictionKind":
        return PredictionKind(s.lower())

    def __str__(self) -> str:
        return self.value


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"mismatched shapes: {sorted(shapes)}")


def _check_ab(ab: float):
    if not (0.0 < ab < 1.0):
        raise ValueError(f"ab must lie in (0, 1), got {ab}")


def forward_diffuse(x0, eps, ab: float):
    """Noised image sqrt(ab)*x0 + sqrt(1-ab)*eps."""
    _check_shapes(x0, eps)
    _check_ab(ab)
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def make_target(kind: PredictionKind, x0, eps, ab: float):
    """Training target for the given prediction kind."""
    _check_shapes(x0, eps)
    _check_ab(ab)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if kind is PredictionKind.SAMPLE:
        return x0.copy()
    if kind is PredictionKind.VELOCITY:
        return math.sqrt(ab) * eps - math.sqrt(1.0 - ab) * x0
    if kind is PredictionKind.FLOW:
        return eps - x0
    raise ValueError(f"unknown kind {kind!r}")


def predict_x0(kind: PredictionKind, pred, xt, ab: float):
    """Invert a network prediction to a clean-image estimate."""
    _check_shapes(pred, xt)
    _check_ab(ab)
    pred = np.asarray(pred)
    xt = np.asarray(xt)
    sa = math.sqrt(ab)
    sb = math.sqrt(1.0 - ab)
    if kind is PredictionKind.SAMPLE:
        return pred.copy()
    if kind is PredictionKind.VELOCITY:
        return sa * xt - sb * pred
    if kind is PredictionKind.FLOW:
        denom = sa + sb
        assert denom > 0.0
        return (xt - sb * pred) / denom
    raise ValueError(f"unknown kind {kind!r}")


def predict_eps(kind: PredictionKind, pred, xt, ab: float):
    """Invert a network prediction to a noise estimate."""
    _check_shapes(pred, xt)
    _check_ab(ab)
    if kind is PredictionKind.VELOCITY:
        # closed form; agrees with the generic route below to round-off
        return math.sqrt(ab) * np.asarray(pred) + math.sqrt(1.0 - ab) * np.asarray(xt)
    x0_hat = predict_x0(kind, pred, xt, ab)
    sb = math.sqrt(1.0 - ab)
    if sb == 0.0:
        raise ValueError("1 - ab underflowed; eps is unrecoverable")
    return (np.asarray(xt) - math.sqrt(ab) * x0_hat) / sb


def training_loss(kind: PredictionKind, pred, target) -> float:
    """Mean squared error over all elements; kind is part of the signature
    for call-site clarity but the loss itself is unweighted for every kind."""
    _check_shapes(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff * diff))
