"""Randomized-smoothing certification of a base classifier.

A point is certified by voting over Gaussian-perturbed copies: a small
selection round picks the top class, a larger estimation round gives a
Clopper-Pearson lower bound on that class's probability, and a bound above
1/2 converts into an l2 radius ``sigma * Phi^-1(p_lower)``.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Protocol, Sequence

import numpy as np

from .core import STREAM_POINT, CertifiedCurve, RadiusGrid, ValidationError, seed_sequence


class DomainError(ValidationError):
    """Argument outside the mathematical domain of a function."""


@dataclass(frozen=True)
class SmoothingParams:
    sigma: float = 0.25
    n0: int = 100
    n: int = 1000
    alpha_conf: float = 0.001

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if not 1 <= self.n0 <= self.n:
            raise ValidationError("need n >= n0 >= 1")
        if not 0 < self.alpha_conf < 1:
            raise ValidationError("alpha_conf must lie in (0, 1)")


class Classifier(Protocol):
    """Maps a batch of inputs of shape ``(k, d)`` to ``k`` integer labels."""

    num_classes: int

    def predict(self, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class CertifyOutcome:
    """Certified(label, radius) when ``label`` is set, otherwise an abstention."""

    label: Optional[int]
    radius: float
    selection_count: int
    estimation_count: int
    p_lower: float = field(default=0.0)

    @property
    def certified(self) -> bool:
        return self.label is not None

    @property
    def verdict(self) -> str:
        return "certified" if self.certified else "abstain"


# ---------------------------------------------------------------------------
# inverse normal CDF


_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def std_normal_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _rational_guess(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        return -_rational_guess(1.0 - p)
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def inv_std_normal_cdf(p: float) -> float:
    """Quantile of the standard normal distribution.

    A rational approximation (relative error ~1e-9) polished by one Halley
    step against the erfc-based CDF. Upper-tail arguments are reflected so
    the refinement always works on the accurately represented lower tail.
    """
    if not 0.0 < p < 1.0:
        raise DomainError(f"normal quantile needs p in (0, 1), got {p!r}")
    if p > 0.5:
        return -inv_std_normal_cdf(1.0 - p)
    z = _rational_guess(p)
    err = std_normal_cdf(z) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * z * z)
    return z - u / (1.0 + 0.5 * z * u)


# ---------------------------------------------------------------------------
# Clopper-Pearson


def _log_binom_sf(k: int, n: int, p: float) -> float:
    """log P(Binomial(n, p) >= k), summed in log space."""
    if k <= 0:
        return 0.0
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return 0.0
    i = np.arange(k, n + 1)
    log_terms = (math.lgamma(n + 1) - _lgamma(i + 1) - _lgamma(n - i + 1)
                 + i * math.log(p) + (n - i) * math.log1p(-p))
    top = log_terms.max()
    return float(top + math.log(np.exp(log_terms - top).sum()))


_lgamma = np.vectorize(math.lgamma, otypes=[float])


@lru_cache(maxsize=65536)
def binom_lower_bound(k: int, n: int, alpha_conf: float) -> float:
    """One-sided ``1 - alpha_conf`` Clopper-Pearson lower bound for ``k`` of ``n``.

    Returns the ``p`` at which ``P(Binomial(n, p) >= k) = alpha_conf``; the
    tail is increasing in ``p`` so bisection pins it to float resolution.
    """
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n!r}")
    if int(k) != k or not 0 <= k <= n:
        raise DomainError(f"k must be an integer in [0, n], got {k!r}")
    if not 0.0 < alpha_conf < 1.0:
        raise DomainError(f"alpha_conf must lie in (0, 1), got {alpha_conf!r}")
    k, n = int(k), int(n)
    if k == 0:
        return 0.0
    if k == n:
        return alpha_conf ** (1.0 / n)
    log_alpha = math.log(alpha_conf)
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if _log_binom_sf(k, n, mid) > log_alpha:
            hi = mid
        else:
            lo = mid
    return lo


# ---------------------------------------------------------------------------
# CERTIFY


def _vote(classifier: Classifier, x: np.ndarray, count: int, sigma: float,
          rng: np.random.Generator, num_classes: int) -> np.ndarray:
    noisy = x[None, :] + sigma * rng.standard_normal((count, x.size))
    labels = np.asarray(classifier.predict(noisy), dtype=np.int64)
    return np.bincount(labels, minlength=num_classes)


def certify_point(classifier: Classifier, x, params: SmoothingParams, seed) -> CertifyOutcome:
    """Certify the smoothed prediction at ``x``; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float).ravel()
    m = classifier.num_classes
    selection = _vote(classifier, x, params.n0, params.sigma, rng, m)
    top = int(np.argmax(selection))  # ties go to the smallest class index
    estimation = _vote(classifier, x, params.n, params.sigma, rng, m)
    k = int(estimation[top])
    p_lower = binom_lower_bound(k, params.n, params.alpha_conf)
    if p_lower > 0.5:
        radius = params.sigma * inv_std_normal_cdf(p_lower)
        return CertifyOutcome(top, radius, int(selection[top]), k, p_lower)
    return CertifyOutcome(None, 0.0, int(selection[top]), k, p_lower)


def point_seed(seed: int, index: int) -> np.random.SeedSequence:
    return seed_sequence(seed, STREAM_POINT, index)


def _certify_chunk(args):
    classifier, xs, start, params, seed = args
    return [certify_point(classifier, x, params, point_seed(seed, start + i))
            for i, x in enumerate(xs)]


def certify_many(classifier: Classifier, xs: np.ndarray, params: SmoothingParams,
                 seed: int, workers: int = 1, offset: int = 0) -> list[CertifyOutcome]:
    """Certify each row of ``xs`` with per-point seeds; result is independent of ``workers``."""
    xs = np.asarray(xs, dtype=float)
    if workers <= 1 or len(xs) < 2:
        return _certify_chunk((classifier, xs, offset, params, seed))
    bounds = np.linspace(0, len(xs), min(workers, len(xs)) + 1).astype(int)
    jobs = [(classifier, xs[a:b], offset + a, params, seed) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return [o for chunk in pool.map(_certify_chunk, jobs) for o in chunk]


def curve_from_outcomes(outcomes: Sequence[CertifyOutcome], labels, grid: RadiusGrid) -> CertifiedCurve:
    """Fraction of points certified for their true label at a radius ``>= r``."""
    labels = np.asarray(labels)
    if len(outcomes) == 0 or len(outcomes) != labels.size:
        raise ValidationError("need one outcome per labelled point, and at least one point")
    radii = np.array([o.radius if o.certified and o.label == y else -1.0
                      for o, y in zip(outcomes, labels)])
    counts = (radii[:, None] >= grid.radii[None, :]).sum(axis=0)
    return CertifiedCurve(grid, counts / radii.size)


def certify_dataset(classifier: Classifier, samples, params: SmoothingParams, grid: RadiusGrid,
                    seed: int, workers: int = 1) -> tuple[CertifiedCurve, list[CertifyOutcome]]:
    """Certify a labelled set and return its certified-accuracy curve.

    ``samples`` is a sequence of ``(x, true_label)`` pairs. Abstentions and
    certifications of the wrong class count as non-robust at every radius.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("cannot certify an empty sample list")
    xs = np.stack([np.asarray(x, dtype=float).ravel() for x, _ in samples])
    labels = np.array([int(y) for _, y in samples])
    outcomes = certify_many(classifier, xs, params, seed, workers)
    return curve_from_outcomes(outcomes, labels, grid), outcomes


# ---------------------------------------------------------------------------
# bundled classifiers


class ConstantClassifier:
    def __init__(self, label: int, num_classes: int):
        self.label = label
        self.num_classes = num_classes

    def predict(self, x):
        return np.full(len(x), self.label, dtype=np.int64)


class ThresholdClassifier:
    """Class 0 when the first coordinate is below ``threshold``, else class 1.

    At input 0 with noise ``sigma`` the vote share of class 0 is
    ``Phi(threshold / sigma)``, which makes the true ``p_A`` known exactly.
    """

    num_classes = 2

    def __init__(self, threshold: float):
        self.threshold = threshold

    def predict(self, x):
        return (np.asarray(x)[:, 0] >= self.threshold).astype(np.int64)


class HashClassifier:
    """Labels that look uniformly random: a CRC of the input's bytes mod M."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes

    def predict(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        return np.array([zlib.crc32(row.tobytes()) % self.num_classes for row in x], dtype=np.int64)


class NearestCentroidClassifier:
    """Assigns each input to the closest class centroid in l2."""

    def __init__(self, centroids):
        self.centroids = np.asarray(centroids, dtype=float)
        self.num_classes = len(self.centroids)

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        d2 = ((x[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=-1)
        return np.argmin(d2, axis=1)


@dataclass(frozen=True)
class GaussianBlobs:
    """Toy data: class ``j`` inputs are ``centroid_j + spread * N(0, I)``."""

    centroids: np.ndarray
    spread: float

    @classmethod
    def make(cls, num_classes: int, dim: int, separation: float, spread: float, seed) -> "GaussianBlobs":
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((num_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return cls(separation * directions, spread)

    def classifier(self) -> NearestCentroidClassifier:
        return NearestCentroidClassifier(self.centroids)

    def sample(self, class_counts, seed) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(len(class_counts)), np.asarray(class_counts, dtype=int))
        xs = self.centroids[labels] + self.spread * rng.standard_normal((labels.size, self.centroids.shape[1]))
        return xs, labels
