"""Inverse-probability-of-treatment weighting estimators.

Group means are Hajek-normalized (weights renormalized within each
treatment group), so estimates are invariant to rescaling all weights and
stay bounded under extreme weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RD, RR, CausalEstimate, Dataset, GpsMatrix, nearest_rank


@dataclass(frozen=True)
class WeightVector:
    """Reciprocal assignment-probability weights, optionally trimmed."""

    weights: np.ndarray
    trim_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(w)) or w.min() <= 0.0:
            raise ValueError("weights must be finite and positive")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def compute_weights(g: GpsMatrix, d: Dataset) -> WeightVector:
    """Weight each unit by 1 / probability of its observed treatment."""
    if g.n != d.n:
        raise ValueError("GPS matrix and dataset sizes differ")
    return WeightVector(weights=1.0 / g.observed(d.W))


def trim_weights(
    v: WeightVector, lower_pct: float = 0.05, upper_pct: float = 0.95
) -> WeightVector:
    """Cap weights at nearest-rank percentiles of the full weight vector."""
    if not (0.0 <= lower_pct < upper_pct <= 1.0):
        raise ValueError("need 0 <= lower_pct < upper_pct <= 1")
    lo = nearest_rank(v.weights, lower_pct)
    hi = nearest_rank(v.weights, upper_pct)
    return WeightVector(weights=np.clip(v.weights, lo, hi), trim_bounds=(lo, hi))


def weighted_group_mean(d: Dataset, v: WeightVector, w: int) -> float:
    """Hajek-weighted outcome mean for treatment group ``w``."""
    mask = d.W == w
    if not mask.any():
        raise ValueError(f"no units observed under treatment {w}")
    wts = v.weights[mask]
    return float(wts @ d.Y[mask] / wts.sum())


def estimate_ate_iptw(
    d: Dataset,
    v: WeightVector,
    k: int,
    l: int,
    estimand: str = RD,
    method: str = "iptw",
) -> CausalEstimate:
    """Pairwise weighted risk difference or risk ratio.

    Intervals are left unset here; the bootstrap machinery fills them in
    when requested.
    """
    if k == l:
        raise ValueError("pair must compare two distinct treatments")
    p_k = weighted_group_mean(d, v, k)
    p_l = weighted_group_mean(d, v, l)
    if estimand == RR:
        if p_l == 0.0:
            raise ZeroDivisionError(
                f"risk ratio undefined: weighted outcome mean of group {l} is 0"
            )
        point = p_k / p_l
    elif estimand == RD:
        point = p_k - p_l
    else:
        raise ValueError(f"estimand must be RD or RR, got {estimand!r}")
    return CausalEstimate(
        pair=(k, l),
        estimand=estimand,
        point=point,
        method=method,
        n_used=d.n,
    )
