"""Regression adjustment on a multivariate spline of the propensity scores.

The outcome model is a penalized logistic additive model: treatment
indicators (reference-coded against the last treatment) plus a
tensor-product cubic B-spline of the first two assignment-probability
columns.  A single isotropic second-difference penalty is tuned by
generalized cross-validation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit

from .core import RD, RR, CausalEstimate, Dataset, GpsMatrix


class _SeparationWarning(UserWarning):
    pass


RIDGE_FLOOR = 1e-4
DEFAULT_LAMBDA_GRID = np.logspace(-4.0, 6.0, 20)


@dataclass(frozen=True)
class SplineBasis:
    """Tensor-product B-spline basis over assignment-probability margins.

    ``matrix`` holds the evaluated basis for the data it was built from;
    ``evaluate`` re-evaluates the same knots at new probability values
    (clipped into the knot range), which is what counterfactual
    prediction and bootstrap refits need.
    """

    matrix: np.ndarray
    penalty: np.ndarray
    knots: tuple[np.ndarray, ...]
    degree: int
    margins: tuple[int, ...]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def evaluate(self, g: GpsMatrix) -> np.ndarray:
        parts = []
        for t, col in zip(self.knots, self.margins):
            x = np.clip(g.probs[:, col], t[self.degree], t[-self.degree - 1])
            parts.append(BSpline.design_matrix(x, t, self.degree).toarray())
        if len(parts) == 1:
            return parts[0]
        b1, b2 = parts
        return np.einsum("na,nb->nab", b1, b2).reshape(b1.shape[0], -1)


def _second_difference_penalty(width: int) -> np.ndarray:
    d = np.diff(np.eye(width), n=2, axis=0)
    return d.T @ d


def build_tensor_basis(
    g: GpsMatrix,
    knots_per_margin: int = 5,
    degree: int = 3,
    margins: tuple[int, ...] | None = None,
) -> SplineBasis:
    """B-spline basis on the first two GPS columns with quantile knots.

    Each margin gets ``knots_per_margin`` interior knots at empirical
    quantiles, giving ``knots_per_margin + degree + 1`` basis functions
    per margin; margins combine by a row-wise tensor product.  With two
    treatments only the first column carries information, so the basis
    is univariate.

    Raises
    ------
    ValueError
        If a margin column is constant; pass ``margins=(0,)`` (or the
        non-degenerate column) to fall back to a univariate basis.
    """
    if knots_per_margin < 2:
        raise ValueError("need at least 2 interior knots per margin")
    if margins is None:
        margins = (0, 1) if g.n_treatments >= 3 else (0,)
    knot_vectors = []
    bases = []
    for col in margins:
        x = g.probs[:, col]
        lo, hi = float(x.min()), float(x.max())
        if hi - lo <= 1e-12:
            raise ValueError(
                f"GPS column {col + 1} is degenerate (constant); "
                f"rebuild with a univariate basis on a non-constant column"
            )
        pad = 1e-9 * (hi - lo)
        interior = np.quantile(x, np.arange(1, knots_per_margin + 1) / (knots_per_margin + 1))
        t = np.concatenate(
            [np.full(degree + 1, lo - pad), interior, np.full(degree + 1, hi + pad)]
        )
        knot_vectors.append(t)
        bases.append(BSpline.design_matrix(x, t, degree).toarray())
    if len(bases) == 1:
        matrix = bases[0]
        penalty = _second_difference_penalty(matrix.shape[1])
    else:
        b1, b2 = bases
        matrix = np.einsum("na,nb->nab", b1, b2).reshape(g.n, -1)
        p1 = _second_difference_penalty(b1.shape[1])
        p2 = _second_difference_penalty(b2.shape[1])
        penalty = np.kron(p1, np.eye(b2.shape[1])) + np.kron(np.eye(b1.shape[1]), p2)
    return SplineBasis(
        matrix=matrix,
        penalty=penalty,
        knots=tuple(knot_vectors),
        degree=degree,
        margins=tuple(margins),
    )


@dataclass(frozen=True)
class RamsModel:
    """Fitted penalized logistic outcome model.

    ``beta`` has one entry per treatment with the last treatment pinned
    at zero; ``gamma`` are the spline coefficients.
    """

    beta: np.ndarray
    gamma: np.ndarray
    lam: float
    converged: bool
    deviance: float
    edf: float
    edf_spline: float
    basis: SplineBasis
    n_treatments: int
    gcv_lambdas: np.ndarray | None = None
    gcv_scores: np.ndarray | None = None
    gcv_edf_spline: np.ndarray | None = None


def _binomial_deviance(y, mu):
    mu = np.clip(mu, 1e-12, 1.0 - 1e-12)
    return float(-2.0 * (y @ np.log(mu) + (1 - y) @ np.log(1.0 - mu)))


def _penalized_irls(design, y, penalty, lam, ridge=0.0, max_iter=50, tol=1e-9):
    n, p = design.shape
    pen = lam * penalty + ridge * np.eye(p)
    coef = np.zeros(p)
    eta = design @ coef
    mu = expit(eta)
    pdev = _binomial_deviance(y, mu) + coef @ pen @ coef
    converged = False
    diverged = False
    xtwx = None
    for _ in range(max_iter):
        wgt = np.clip(mu * (1.0 - mu), 1e-10, None)
        xtw = design.T * wgt
        xtwx = xtw @ design
        rhs = design.T @ (y - mu) - pen @ coef
        try:
            delta = np.linalg.solve(xtwx + pen, rhs)
        except np.linalg.LinAlgError:
            diverged = True
            break
        scale = 1.0
        for _ in range(10):
            cand = coef + scale * delta
            cand_eta = design @ cand
            cand_mu = expit(cand_eta)
            cand_pdev = _binomial_deviance(y, cand_mu) + cand @ pen @ cand
            if np.isfinite(cand_pdev) and cand_pdev <= pdev + 1e-12:
                break
            scale *= 0.5
        else:
            converged = True  # no descent direction left: at the optimum
            break
        coef, eta, mu = cand, cand_eta, cand_mu
        rel = (pdev - cand_pdev) / max(abs(pdev), 1.0)
        pdev = cand_pdev
        if np.abs(eta).max() > 100.0:
            diverged = True
            break
        if rel < tol:
            converged = True
            break
    if xtwx is None or diverged:
        return coef, mu, converged, diverged, None
    wgt = np.clip(mu * (1.0 - mu), 1e-10, None)
    xtwx = (design.T * wgt) @ design
    hat = np.linalg.solve(xtwx + pen, xtwx)
    return coef, mu, converged, diverged, np.diag(hat)


def fit_rams(
    d: Dataset,
    g: GpsMatrix,
    basis: SplineBasis,
    lam: float | str = "auto",
) -> RamsModel:
    """Penalized IRLS fit of the treatment-plus-spline logistic model.

    ``lam="auto"`` picks the smoothing parameter over a 20-point log grid
    by generalized cross-validation, ``n * deviance / (n - edf)^2``.
    Complete separation (diverging linear predictor) triggers a ridge
    fallback with a floor of ``1e-4`` and a warning.

    Raises
    ------
    ValueError
        If no outcome events are present.
    """
    if d.Y.sum() < 1:
        raise ValueError("cannot fit an outcome model with no events")
    z = d.n_treatments
    indicators = np.column_stack([(d.W == w).astype(float) for w in range(1, z)])
    design = np.column_stack([indicators, basis.matrix])
    p_trt = z - 1
    penalty = np.zeros((design.shape[1], design.shape[1]))
    penalty[p_trt:, p_trt:] = basis.penalty

    def run(l_val):
        coef, mu, converged, diverged, hat_diag = _penalized_irls(
            design, d.Y.astype(float), penalty, l_val
        )
        if diverged or hat_diag is None:
            warnings.warn(
                "separation detected; refitting with a ridge floor",
                _SeparationWarning,
                stacklevel=3,
            )
            coef, mu, converged, diverged, hat_diag = _penalized_irls(
                design, d.Y.astype(float), penalty, max(l_val, RIDGE_FLOOR),
                ridge=RIDGE_FLOOR,
            )
            if hat_diag is None:
                raise np.linalg.LinAlgError("outcome model fit failed even with ridge")
        return coef, mu, converged, hat_diag

    gcv_info = None
    if lam == "auto":
        scores = np.empty(len(DEFAULT_LAMBDA_GRID))
        edf_spline = np.empty(len(DEFAULT_LAMBDA_GRID))
        fits = []
        for i, l_val in enumerate(DEFAULT_LAMBDA_GRID):
            coef, mu, converged, hat_diag = run(l_val)
            dev = _binomial_deviance(d.Y.astype(float), mu)
            edf = float(hat_diag.sum())
            scores[i] = d.n * dev / (d.n - edf) ** 2
            edf_spline[i] = float(hat_diag[p_trt:].sum())
            fits.append((coef, mu, converged, hat_diag))
        best = int(np.argmin(scores))
        lam_value = float(DEFAULT_LAMBDA_GRID[best])
        coef, mu, converged, hat_diag = fits[best]
        gcv_info = (DEFAULT_LAMBDA_GRID.copy(), scores, edf_spline)
    else:
        lam_value = float(lam)
        if lam_value < 0:
            raise ValueError("smoothing parameter must be non-negative")
        coef, mu, converged, hat_diag = run(lam_value)

    beta = np.zeros(z)
    beta[: z - 1] = coef[:p_trt]
    return RamsModel(
        beta=beta,
        gamma=coef[p_trt:].copy(),
        lam=lam_value,
        converged=converged,
        deviance=_binomial_deviance(d.Y.astype(float), mu),
        edf=float(hat_diag.sum()),
        edf_spline=float(hat_diag[p_trt:].sum()),
        basis=basis,
        n_treatments=z,
        gcv_lambdas=None if gcv_info is None else gcv_info[0],
        gcv_scores=None if gcv_info is None else gcv_info[1],
        gcv_edf_spline=None if gcv_info is None else gcv_info[2],
    )


def predict_counterfactual(m: RamsModel, g: GpsMatrix, w: int) -> np.ndarray:
    """Per-unit outcome probability with everyone toggled to treatment ``w``.

    The spline contribution is held fixed at each unit's own propensity
    values; only the treatment coefficient changes.
    """
    if not (1 <= w <= m.n_treatments):
        raise ValueError(f"treatment {w} outside 1..{m.n_treatments}")
    h = m.basis.evaluate(g) @ m.gamma
    return expit(m.beta[w - 1] + h)


def estimate_ate_rams(
    m: RamsModel,
    d: Dataset,
    g: GpsMatrix,
    k: int,
    l: int,
    estimand: str = RD,
    method: str = "rams",
) -> CausalEstimate:
    """Average counterfactual contrast over all units."""
    if k == l:
        raise ValueError("pair must compare two distinct treatments")
    mean_k = float(predict_counterfactual(m, g, k).mean())
    mean_l = float(predict_counterfactual(m, g, l).mean())
    if estimand == RR:
        if mean_l == 0.0:
            raise ZeroDivisionError("risk ratio undefined: denominator mean is 0")
        point = mean_k / mean_l
    elif estimand == RD:
        point = mean_k - mean_l
    else:
        raise ValueError(f"estimand must be RD or RR, got {estimand!r}")
    return CausalEstimate(
        pair=(k, l), estimand=estimand, point=point, method=method, n_used=d.n
    )
