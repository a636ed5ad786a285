"""Primitive distributions with sampling and exact log-density.

Every density is computed and kept in log space (nats); raw probabilities
are never materialised.  Scalar densities are hand-rolled on top of
``math`` because they sit on the hot path of the interpreter: a single
model execution can evaluate thousands of them, and the per-call overhead
of ``scipy.stats`` objects dominates at that scale.  The test suite checks
each formula against scipy / mpmath oracles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "Support",
    "Distribution",
    "Normal",
    "UniformContinuous",
    "Poisson",
    "Categorical",
    "GmmObsLik",
    "log_density",
    "sample",
    "log_sum_exp",
    "gmm_obs_log_lik",
    "normal_log_pdf",
]

_LOG_2PI = math.log(2.0 * math.pi)
NEG_INF = float("-inf")


class Support(enum.Enum):
    """Support class of a distribution; replay compatibility is decided on it."""

    CONTINUOUS = "continuous"
    INTEGER = "integer"          # non-negative integers
    INDEX = "index"              # finite index set {0, ..., n-1}
    OBSERVE_ONLY = "observe-only"


class ParameterError(ValueError):
    """A distribution was built with invalid or non-finite parameters."""


def _check_finite(name, *values):
    for v in values:
        if not math.isfinite(v):
            raise ParameterError(f"{name}: non-finite parameter {v!r}")


def normal_log_pdf(x: float, mean: float, std: float) -> float:
    return -0.5 * _LOG_2PI - math.log(std) - 0.5 * ((x - mean) / std) ** 2


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float
    support = Support.CONTINUOUS

    def __post_init__(self):
        _check_finite("Normal", self.mean, self.std)
        if self.std <= 0.0:
            raise ParameterError(f"Normal: std must be > 0, got {self.std}")

    def log_density(self, value: float) -> float:
        return normal_log_pdf(value, self.mean, self.std)

    def sample(self, rng: np.random.Generator) -> float:
        return self.mean + self.std * rng.standard_normal()

    def bounds(self):
        return (NEG_INF, math.inf)


@dataclass(frozen=True)
class UniformContinuous:
    lo: float
    hi: float
    support = Support.CONTINUOUS

    def __post_init__(self):
        _check_finite("UniformContinuous", self.lo, self.hi)
        if not self.hi > self.lo:
            raise ParameterError(f"UniformContinuous: need hi > lo, got [{self.lo}, {self.hi}]")

    def log_density(self, value: float) -> float:
        if self.lo <= value <= self.hi:
            return -math.log(self.hi - self.lo)
        return NEG_INF

    def sample(self, rng: np.random.Generator) -> float:
        return rng.uniform(self.lo, self.hi)

    def bounds(self):
        return (self.lo, self.hi)


@lru_cache(maxsize=64)
def _poisson_cdf_table(rate: float) -> np.ndarray:
    """Cumulative pmf of Poisson(rate), long enough to cover mass 1 - 1e-15."""
    terms = []
    log_pmf = -rate  # k = 0
    total = math.exp(log_pmf)
    terms.append(total)
    k = 0
    log_rate = math.log(rate)
    while total < 1.0 - 1e-15 and k < 100_000:
        k += 1
        log_pmf += log_rate - math.log(k)
        total += math.exp(log_pmf)
        terms.append(total)
    return np.asarray(terms)


@dataclass(frozen=True)
class Poisson:
    rate: float
    support = Support.INTEGER

    def __post_init__(self):
        _check_finite("Poisson", self.rate)
        if self.rate <= 0.0:
            raise ParameterError(f"Poisson: rate must be > 0, got {self.rate}")
        if self.rate > 700.0:
            # the inversion sampler accumulates exp(-rate); it underflows past ~745
            raise ParameterError(f"Poisson: rate {self.rate} too large for inversion sampling")

    def log_density(self, value) -> float:
        k = int(value)
        if k != value or k < 0:
            return NEG_INF
        return k * math.log(self.rate) - self.rate - math.lgamma(k + 1)

    def sample(self, rng: np.random.Generator) -> int:
        # inversion: u against the cached cumulative table (sequential search,
        # vectorised); u essentially never exceeds the table's 1 - 1e-15 reach,
        # but fall back to an explicit extension if it does.
        u = rng.random()
        cdf = _poisson_cdf_table(self.rate)
        k = int(np.searchsorted(cdf, u, side="right"))
        if k < len(cdf):
            return k
        total = float(cdf[-1])
        while total < u:
            k += 1
            total += math.exp(self.log_density(k))
        return k


@dataclass(frozen=True)
class Categorical:
    probs: tuple
    support = Support.INDEX

    def __init__(self, probs):
        probs = tuple(float(p) for p in probs)
        if not probs:
            raise ParameterError("Categorical: empty probability vector")
        _check_finite("Categorical", *probs)
        if min(probs) < 0.0:
            raise ParameterError(f"Categorical: negative probability in {probs}")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ParameterError(f"Categorical: probabilities sum to {sum(probs)!r}, not 1")
        object.__setattr__(self, "probs", probs)

    def log_density(self, value) -> float:
        k = int(value)
        if k != value or not 0 <= k < len(self.probs) or self.probs[k] == 0.0:
            return NEG_INF
        return math.log(self.probs[k])

    def sample(self, rng: np.random.Generator) -> int:
        u = rng.random()
        acc = 0.0
        for k, p in enumerate(self.probs):
            acc += p
            if u < acc:
                return k
        return len(self.probs) - 1


class UnsupportedSampleError(RuntimeError):
    """Raised when sampling an observe-only distribution."""


@dataclass(frozen=True)
class GmmObsLik:
    """Observation likelihood of an equal-weight Gaussian mixture.

    log p(y) = log-mean over components of N(y; mu_k, std); used to score a
    data point against a set of cluster means with the assignments
    marginalised out.  Observe-only: it has no sampler.
    """

    mus: tuple
    std: float
    support = Support.OBSERVE_ONLY
    _mus_arr: np.ndarray = field(init=False, repr=False, compare=False)

    def __init__(self, mus, std):
        mus = tuple(float(m) for m in mus)
        if not mus:
            raise ParameterError("GmmObsLik: empty component vector")
        _check_finite("GmmObsLik", *mus, std)
        if std <= 0.0:
            raise ParameterError(f"GmmObsLik: std must be > 0, got {std}")
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "std", float(std))
        object.__setattr__(self, "_mus_arr", np.asarray(mus))

    def log_density(self, value: float) -> float:
        z = (value - self._mus_arr) / self.std
        comp = -0.5 * _LOG_2PI - math.log(self.std) - 0.5 * z * z
        m = comp.max()
        return float(m + math.log(np.exp(comp - m).sum()) - math.log(len(self.mus)))

    def sample(self, rng):
        raise UnsupportedSampleError("GmmObsLik is observe-only and cannot be sampled")


Distribution = Normal | UniformContinuous | Poisson | Categorical | GmmObsLik


def log_density(dist, value) -> float:
    return dist.log_density(value)


def sample(dist, rng: np.random.Generator):
    return dist.sample(rng)


def log_sum_exp(xs) -> float:
    """log sum exp(x_i), stable for magnitudes up to ~700; -inf for all -inf."""
    xs = list(xs)
    if not xs:
        raise ValueError("log_sum_exp: empty input")
    m = max(xs)
    if m == NEG_INF:
        return NEG_INF
    return m + math.log(sum(math.exp(x - m) for x in xs))


def gmm_obs_log_lik(mus, std: float, y: float) -> float:
    """Log-mean of N(y; mu_k, std) over the components mu_k."""
    return GmmObsLik(mus, std).log_density(y)
