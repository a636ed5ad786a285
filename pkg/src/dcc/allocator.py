"""Compute-allocation utility over active paths.

Each active path k is scored as

    U_k = (1/S_k) * ( (1-delta) * tau_k / max_k tau_k
                      + delta * p_k / max_k p_k
                      + beta * log(sum_k S_k) / sqrt(S_k) )

where tau_k = sqrt(Z_k^2 + (1+kappa) * sigma_k^2) rewards both mass and
estimator variance, and p_k = 1 - Psi_k(log w_th)^T_a is the probability
that a batch of T_a look-ahead samples would beat the best importance
weight seen so far (Psi_k is a normal fit to the path's log-weights).
The leading 1/S_k multiplies all three terms, optimism bonus included, so
the bonus decays as S_k^(-3/2); this is deliberate and kept as stated.

A path never yet allocated (S_k = 0) has infinite utility and is selected
first; ties break toward the smallest id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

from scipy.special import log_ndtr

from .dists import NEG_INF, log_sum_exp

__all__ = ["tau_hat", "p_hat", "UtilityInputs", "SlpUtility", "select_slp", "utilities"]


def tau_hat(log_z: float, log_sigma2: float, kappa: float) -> float:
    """log of sqrt(Z^2 + (1+kappa)*sigma^2), computed fully in log space."""
    terms = []
    if log_z > NEG_INF:
        terms.append(2.0 * log_z)
    if log_sigma2 > NEG_INF:
        terms.append(math.log1p(kappa) + log_sigma2)
    if not terms:
        return NEG_INF
    return 0.5 * log_sum_exp(terms)


def p_hat(psi_mean: Optional[float], psi_std: Optional[float],
          log_w_th: float, t_a: int) -> float:
    """Probability that T_a fresh weights contain one above the threshold.

    With no log-weights collected yet the estimate is 1 (maximal
    exploration).  A zero-spread fit degenerates to a step function.
    """
    if psi_mean is None or psi_std is None:
        return 1.0
    if psi_std == 0.0:
        cdf_log = 0.0 if log_w_th >= psi_mean else NEG_INF
    else:
        cdf_log = log_ndtr((log_w_th - psi_mean) / psi_std)
    if cdf_log == NEG_INF:
        return 1.0
    return -math.expm1(t_a * cdf_log)


class SlpUtility(NamedTuple):
    slp_id: int
    s: int                      # allocation count
    log_tau: float
    p: float


@dataclass(frozen=True)
class UtilityInputs:
    """Per-path statistics plus the shared hyperparameters."""

    entries: Sequence[SlpUtility]
    delta: float = 0.5
    beta: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must be in [0, 1], got {self.delta}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")


def utilities(inputs: UtilityInputs) -> dict:
    """U_k for every entry; paths with S = 0 get +inf (must sample once)."""
    entries = list(inputs.entries)
    if not entries:
        raise ValueError("utilities: no active paths")
    max_log_tau = max(e.log_tau for e in entries)
    max_p = max(e.p for e in entries)
    total_s = sum(e.s for e in entries)
    log_total = math.log(total_s) if total_s > 0 else 0.0
    out = {}
    for e in entries:
        if e.s == 0:
            out[e.slp_id] = math.inf
            continue
        # a vanishing maximum means the term carries no signal: count it as
        # an all-equal contribution rather than dividing by zero
        tau_ratio = 1.0 if max_log_tau == NEG_INF else math.exp(e.log_tau - max_log_tau)
        p_ratio = 1.0 if max_p == 0.0 else e.p / max_p
        bonus = inputs.beta * log_total / math.sqrt(e.s)
        out[e.slp_id] = ((1.0 - inputs.delta) * tau_ratio + inputs.delta * p_ratio + bonus) / e.s
    return out


def select_slp(inputs: UtilityInputs) -> int:
    """Id of the maximum-utility path; ties break to the smallest id."""
    us = utilities(inputs)
    return max(sorted(us), key=lambda k: us[k])
