"""Quantitative evaluation: Frechet distance over slice features,
two-sample KS with a permutation protocol, and nearest-neighbor search."""
from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

STRUCTURES = ("cerebral cortex", "brain stem", "ventricles",
              "thalamus", "putamen", "cerebellar cortex")


# ---------------------------------------------------------------------------
# Slice features
# ---------------------------------------------------------------------------

def extract_features(slices: Sequence[np.ndarray], extractor: str = "randproj64",
                     seed: int = 0) -> np.ndarray:
    """Feature matrix [n, d] for a list of equally sized 2D slices.

    The default extractor is a fixed seeded linear map: 8x8 average pooling
    (trailing remainder cropped) followed by a random Gaussian projection to
    d=64. Linear and bias-free, so it is deterministic and a zero slice maps
    to the zero feature. Not comparable with Inception-based scores; pair it
    with externally computed features when absolute numbers matter.
    """
    if extractor != "randproj64":
        raise ValueError(f"unknown extractor {extractor!r}")
    if len(slices) == 0:
        return np.zeros((0, 64))
    shape = np.shape(slices[0])
    for s in slices:
        if np.shape(s) != shape:
            raise ValueError(f"slice size mismatch: {np.shape(s)} vs {shape}")
    ph, pw = shape[0] // 8, shape[1] // 8
    if ph < 1 or pw < 1:
        raise ValueError(f"slices of shape {shape} too small for 8x8 pooling")
    d = 64
    rng = np.random.Generator(np.random.Philox(seed))
    proj = rng.standard_normal((ph * pw, d)) / math.sqrt(d)
    rows = []
    for s in slices:
        arr = np.asarray(s, dtype=np.float64)[:ph * 8, :pw * 8]
        pooled = arr.reshape(ph, 8, pw, 8).mean(axis=(1, 3))
        rows.append(pooled.ravel() @ proj)
    return np.stack(rows)


def save_features(path, features: np.ndarray, extractor: str) -> None:
    n, d = features.shape
    header = {"d": int(d), "n": int(n), "extractor": extractor}
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        f.write(np.asarray(features, dtype="<f8").tobytes())


def load_features(path) -> tuple[np.ndarray, str]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        blob = f.read()
    feats = np.frombuffer(blob, dtype="<f8").reshape(header["n"], header["d"])
    return feats.copy(), header["extractor"]


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.n < 2:
            raise ValueError(f"need n >= 2 samples, got {self.n}")
        if np.max(np.abs(self.sigma - self.sigma.T)) > 1e-10:
            raise ValueError("covariance not symmetric")
        eig = np.linalg.eigvalsh(self.sigma)
        if eig.min() < -1e-8 * max(np.trace(self.sigma), 1.0):
            raise ValueError("covariance not positive semidefinite")


def fit_stats(features: np.ndarray) -> FeatureStats:
    """Unbiased sample mean and covariance (1/(n-1))."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    mu = features.mean(axis=0)
    centered = features - mu
    sigma = centered.T @ centered / (n - 1)
    sigma = 0.5 * (sigma + sigma.T)
    return FeatureStats(mu=mu, sigma=sigma, n=n)


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)).

    Tr((Sa Sb)^(1/2)) is computed as the eigenvalue-sqrt sum of the
    symmetric product sqrt(Sa) Sb sqrt(Sa); small negative eigenvalues
    are clamped to zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimension mismatch")
    diff = a.mu - b.mu
    wa, va = np.linalg.eigh(a.sigma)
    sqrt_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    m = sqrt_a @ b.sigma @ sqrt_a
    m = 0.5 * (m + m.T)
    eig = np.linalg.eigvalsh(m)
    tol = 1e-8 * max(float(np.abs(eig).max(initial=0.0)), 1.0)
    if eig.min(initial=0.0) < -tol:
        raise ValueError("cross-covariance product not PSD beyond tolerance")
    trace_sqrt = np.sqrt(np.clip(eig, 0.0, None)).sum()
    fd = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt)
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# Kolmogorov-Smirnov machinery
# ---------------------------------------------------------------------------

def ks_statistic(a, b) -> float:
    """Two-sample sup gap between empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def kolmogorov_survival(lam: float) -> float:
    """Q(lam) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lam^2), summed to
    machine tolerance."""
    if lam <= 0.0:
        return 1.0
    total = 0.0
    for k in range(1, 101):
        term = 2.0 * (-1.0) ** (k - 1) * math.exp(-2.0 * k * k * lam * lam)
        total += term
        if abs(term) < 1e-16:
            break
    return min(max(total, 0.0), 1.0)


def ks_pvalue(d: float, n: int, m: int) -> float:
    """Asymptotic two-sided p-value; conservative below ~30 samples."""
    if n < 1 or m < 1:
        raise ValueError("sample sizes must be >= 1")
    en = math.sqrt(n * m / (n + m))
    return kolmogorov_survival(en * d)


@dataclass
class KsReport:
    fractions: dict[str, float]
    reps: int
    subsample: int
    alpha: float

    def to_json(self) -> str:
        return json.dumps({"fractions": self.fractions, "reps": self.reps,
                           "subsample": self.subsample, "alpha": self.alpha})


def permutation_protocol(real: dict[str, np.ndarray], synth: dict[str, np.ndarray],
                         reps: int = 1000, subsample: int = 1000,
                         alpha: float = 0.05, seed: int = 0) -> KsReport:
    """Repeatedly subsample the real cohort without replacement, KS-test each
    structure against all synthetic values, and report the fraction of
    repetitions with p >= alpha.

    real and synth map structure name -> per-volume values (mm^3).
    """
    fractions = {}
    rng = np.random.default_rng(seed)
    for structure in sorted(real):
        rv = np.asarray(real[structure], dtype=np.float64)
        sv = np.sort(np.asarray(synth[structure], dtype=np.float64))
        if rv.size < subsample:
            raise ValueError(f"{structure}: only {rv.size} real volumes, "
                             f"need {subsample}")
        if sv.size < 1:
            raise ValueError(f"{structure}: empty synthetic sample")
        hits = 0
        for _ in range(reps):
            sub = np.sort(rng.choice(rv, size=subsample, replace=False))
            pooled = np.concatenate([sub, sv])
            cdf_a = np.searchsorted(sub, pooled, side="right") / sub.size
            cdf_b = np.searchsorted(sv, pooled, side="right") / sv.size
            d = float(np.abs(cdf_a - cdf_b).max())
            if ks_pvalue(d, subsample, sv.size) >= alpha:
                hits += 1
        fractions[structure] = hits / reps
    return KsReport(fractions=fractions, reps=reps, subsample=subsample, alpha=alpha)


def load_regional_volumes(path) -> dict[str, dict[str, float]]:
    """Ingest a (volume id, structure, mm^3) CSV into id -> structure -> mm^3."""
    import csv

    out: dict[str, dict[str, float]] = {}
    with open(path, newline="") as f:
        rows = [row for row in csv.reader(f) if row]
    if rows:
        try:
            float(rows[0][2])
        except (ValueError, IndexError):
            rows = rows[1:]               # header row
    for row in rows:
        vid, structure, mm3 = row[0], row[1], float(row[2])
        out.setdefault(vid, {})[structure] = mm3
    return out


def regional_series(volumes: dict[str, dict[str, float]]) -> dict[str, np.ndarray]:
    """Pivot id -> structure -> mm^3 into structure -> value array."""
    series: dict[str, list[float]] = {}
    for vid in sorted(volumes):
        for structure, mm3 in volumes[vid].items():
            series.setdefault(structure, []).append(mm3)
    return {k: np.asarray(v) for k, v in series.items()}


# ---------------------------------------------------------------------------
# Nearest-neighbor memorization check
# ---------------------------------------------------------------------------

def nn_search(query: np.ndarray, candidates: Iterable[np.ndarray],
              k: int = 2) -> list[tuple[int, float]]:
    """Exact k smallest voxel-space MSEs, streamed with bounded memory.

    Ties break toward the lower candidate index. Returns [(index, mse)]
    in ascending (mse, index) order.
    """
    query = np.asarray(query, dtype=np.float64)
    heap: list[tuple[float, int]] = []     # max-heap via negation
    count = 0
    for i, cand in enumerate(candidates):
        cand = np.asarray(cand, dtype=np.float64)
        if cand.shape != query.shape:
            raise ValueError(f"candidate {i} shape {cand.shape} != query {query.shape}")
        mse = float(np.mean((cand - query) ** 2))
        entry = (-mse, -i)
        if len(heap) < k:
            heapq.heappush(heap, entry)
        elif entry > heap[0]:
            heapq.heapreplace(heap, entry)
        count += 1
    if count == 0:
        raise ValueError("no candidates")
    ordered = sorted((-negmse, -i) for negmse, i in heap)
    return [(idx, mse) for mse, idx in ordered]
