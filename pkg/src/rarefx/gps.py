"""Generalized propensity score estimation.

Two fitters are provided: multinomial logistic regression solved by damped
Newton iteration, and one-vs-rest gradient-boosted trees whose normalized
per-treatment probabilities define the score at every boosting iteration.
Balance diagnostics (absolute standardized bias after weighting) drive the
boosting stopping rule and are exportable as CSV.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import (
    CONTINUOUS,
    Dataset,
    GpsMatrix,
    design_matrix,
    group_sizes,
    nearest_rank,
)


class SingularDesignError(ValueError):
    """Design matrix is rank deficient after reference coding."""


class ConvergenceWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Multinomial logistic regression
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlrModel:
    """Fitted multinomial logit with treatment Z as the reference class.

    ``coefficients`` has one row per non-reference treatment ``1..Z-1``
    and one column per design column (intercept first).
    """

    coefficients: np.ndarray
    converged: bool
    deviance: float
    deviance_trace: tuple[float, ...]
    design_labels: tuple[str, ...]
    n_treatments: int


def _mlr_design(d: Dataset):
    design, labels = design_matrix(d, intercept=True)
    return design, tuple(labels)


def _softmax_probs(design: np.ndarray, coef: np.ndarray) -> np.ndarray:
    # logits for treatments 1..Z-1; reference class Z has logit 0
    logits = np.column_stack([design @ coef.T, np.zeros(design.shape[0])])
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _multinomial_deviance(probs: np.ndarray, w: np.ndarray) -> float:
    obs = np.clip(probs[np.arange(len(w)), w - 1], 1e-300, None)
    return float(-2.0 * np.log(obs).sum())


def fit_mlr(d: Dataset, tol: float = 1e-8, max_iter: int = 100) -> MlrModel:
    """Maximize the multinomial log-likelihood by damped Newton iteration.

    The Newton step is halved (up to 10 times) whenever it would increase
    the deviance, so the recorded deviance trace is non-increasing.
    Non-convergence within ``max_iter`` returns a model flagged
    ``converged=False`` with a warning rather than raising.

    Raises
    ------
    SingularDesignError
        If the reference-coded design (with intercept) is rank deficient
        or has more columns than rows.
    """
    design, labels = _mlr_design(d)
    n, p = design.shape
    z = d.n_treatments
    if n <= p:
        raise SingularDesignError(f"need more units than design columns ({n} <= {p})")
    if np.linalg.matrix_rank(design) < p:
        raise SingularDesignError("design matrix is rank deficient")

    coef = np.zeros((z - 1, p))
    w = d.W
    onehot = np.zeros((n, z - 1))
    for c in range(z - 1):
        onehot[:, c] = (w == c + 1).astype(float)

    probs = _softmax_probs(design, coef)
    deviance = _multinomial_deviance(probs, w)
    trace = [deviance]
    converged = False
    for _ in range(max_iter):
        resid = onehot - probs[:, : z - 1]
        score = (design.T @ resid).T.ravel()  # (z-1)*p, class-major
        hessian = np.empty(((z - 1) * p, (z - 1) * p))
        for a in range(z - 1):
            for b in range(z - 1):
                pa = probs[:, a]
                ww = pa * ((1.0 if a == b else 0.0) - probs[:, b])
                hessian[a * p : (a + 1) * p, b * p : (b + 1) * p] = -design.T @ (
                    ww[:, None] * design
                )
        try:
            step = np.linalg.solve(-hessian, score).reshape(z - 1, p)
        except np.linalg.LinAlgError:
            # Hessian singular at boundary (separation); stop here.
            break
        scale = 1.0
        for _ in range(10):
            cand = coef + scale * step
            cand_probs = _softmax_probs(design, cand)
            cand_dev = _multinomial_deviance(cand_probs, w)
            if cand_dev <= deviance:
                break
            scale *= 0.5
        else:
            break  # no descent step found
        coef, probs = cand, cand_probs
        rel_change = (deviance - cand_dev) / max(abs(deviance), 1.0)
        deviance = cand_dev
        trace.append(deviance)
        if rel_change < tol:
            converged = True
            break
    if converged and np.abs(coef).max() > 15.0:
        # deviance plateaus near zero under complete separation while the
        # coefficients diverge; flag it rather than report a clean fit
        converged = False
    if not converged:
        warnings.warn(
            "multinomial logit did not converge; propensities remain clamped-valid",
            ConvergenceWarning,
            stacklevel=2,
        )
    return MlrModel(
        coefficients=coef,
        converged=converged,
        deviance=deviance,
        deviance_trace=tuple(trace),
        design_labels=labels,
        n_treatments=z,
    )


def predict_gps_mlr(m: MlrModel, d: Dataset) -> GpsMatrix:
    """Softmax assignment probabilities from a fitted multinomial logit."""
    design, labels = _mlr_design(d)
    if labels != m.design_labels:
        raise ValueError(
            f"dataset design {labels} does not match fitted design {m.design_labels}"
        )
    return GpsMatrix.from_raw(_softmax_probs(design, m.coefficients))


# ---------------------------------------------------------------------------
# Gradient-boosted trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbmConfig:
    max_iter: int = 10_000
    shrinkage: float = 0.01
    depth: int = 3
    subsample: float = 0.5
    eval_every: int = 100
    seed: int = 0


@dataclass(frozen=True)
class GbmModel:
    """One-vs-rest boosted probability trees for treatment assignment.

    ``trees[c]`` is the boosting sequence for treatment ``c+1``; each tree
    is a nested ``(col, threshold, left, right)`` / ``(value,)`` tuple
    over design-matrix columns.  ``balance_trace[t]`` is the max absolute
    standardized bias of inverse-probability weighting at boosting
    iteration ``balance_iterations[t]``.
    """

    trees: tuple[tuple, ...]
    base_logits: np.ndarray
    shrinkage: float
    balance_trace: np.ndarray
    balance_iterations: tuple[int, ...]
    selected_iteration: int
    design_labels: tuple[str, ...]
    n_treatments: int


_MIN_SPLIT = 10
_MIN_CHILD = 5
_MAX_LEAF_STEP = 4.0


def _tree_grids(design: np.ndarray, max_cuts: int = 100):
    grids = []
    for j in range(design.shape[1]):
        uniq = np.unique(design[:, j])
        if uniq.size < 2:
            grids.append(np.empty(0))  # constant column: never a split candidate
            continue
        # midpoints between consecutive observed values, thinned to a quantile grid
        mids = (uniq[:-1] + uniq[1:]) / 2.0
        if mids.size > max_cuts:
            idx = np.linspace(0, mids.size - 1, max_cuts).round().astype(int)
            mids = mids[np.unique(idx)]
        grids.append(mids)
    return grids


def _fit_gradient_tree(design, resid, hess, rows, depth, grids):
    """Greedy squared-error tree on gradients; Newton leaf values."""
    n = rows.size
    if depth == 0 or n < _MIN_SPLIT:
        return (_leaf_value(resid, hess, rows),)
    best = None  # (gain, col, thr, left_rows, right_rows)
    total = resid[rows].sum()
    base = total * total / n
    for j, grid in enumerate(grids):
        if grid.size == 0:
            continue
        x = design[rows, j]
        order = np.argsort(x, kind="stable")
        xs = x[order]
        rs = resid[rows][order]
        counts = np.searchsorted(xs, grid, side="right")
        valid = (counts >= _MIN_CHILD) & (n - counts >= _MIN_CHILD)
        if not valid.any():
            continue
        csum = np.concatenate([[0.0], np.cumsum(rs)])
        left_sum = csum[counts[valid]]
        left_n = counts[valid]
        gain = (
            left_sum**2 / left_n
            + (total - left_sum) ** 2 / (n - left_n)
            - base
        )
        k = int(np.argmax(gain))
        if best is None or gain[k] > best[0]:
            thr = grid[valid][k]
            mask = x <= thr
            best = (float(gain[k]), j, float(thr), rows[mask], rows[~mask])
    if best is None or best[0] <= 1e-12:
        return (_leaf_value(resid, hess, rows),)
    _, col, thr, left_rows, right_rows = best
    return (
        col,
        thr,
        _fit_gradient_tree(design, resid, hess, left_rows, depth - 1, grids),
        _fit_gradient_tree(design, resid, hess, right_rows, depth - 1, grids),
    )


def _leaf_value(resid, hess, rows):
    denom = max(hess[rows].sum(), 1e-12)
    return float(np.clip(resid[rows].sum() / denom, -_MAX_LEAF_STEP, _MAX_LEAF_STEP))


def _tree_predict(tree, design, out, rows):
    if len(tree) == 1:
        out[rows] = tree[0]
        return
    col, thr, left, right = tree
    mask = design[rows, col] <= thr
    _tree_predict(left, design, out, rows[mask])
    _tree_predict(right, design, out, rows[~mask])


def _eval_trees(trees, design, upto):
    pred = np.zeros(design.shape[0])
    buf = np.zeros(design.shape[0])
    rows = np.arange(design.shape[0])
    for tree in trees[:upto]:
        _tree_predict(tree, design, buf, rows)
        pred += buf
    return pred


def fit_gbm(d: Dataset, config: GbmConfig = GbmConfig()) -> GbmModel:
    """Boost one-vs-rest trees and track covariate balance.

    Every treatment gets its own logistic boosting sequence; the
    per-treatment probabilities are normalized across treatments to give
    the assignment-probability matrix at any iteration.  Balance (max
    absolute standardized bias under inverse-probability weights) is
    evaluated at iteration 1 and then every ``config.eval_every``
    iterations; ``selected_iteration`` minimizes it.
    """
    if d.n < 50:
        raise ValueError(f"too few units for boosting ({d.n} < 50)")
    design, labels = design_matrix(d, intercept=False)
    z = d.n_treatments
    rng = np.random.default_rng(config.seed)
    grids = _tree_grids(design)
    sizes = group_sizes(d).astype(float)
    base = np.log(sizes / (d.n - sizes))
    targets = [(d.W == c + 1).astype(float) for c in range(z)]
    scores = [np.full(d.n, base[c]) for c in range(z)]
    trees: list[list] = [[] for _ in range(z)]
    n_sub = max(int(np.floor(d.n * config.subsample)), _MIN_SPLIT)

    trace = []
    trace_iters = []

    def record_balance(iteration):
        probs = np.column_stack([expit(s) for s in scores])
        gps = GpsMatrix.from_raw(probs)
        weights = 1.0 / gps.observed(d.W)
        trace.append(standardized_bias(d, weights).max_abs)
        trace_iters.append(iteration)

    for it in range(1, config.max_iter + 1):
        for c in range(z):
            p = expit(scores[c])
            resid = targets[c] - p
            hess = p * (1.0 - p)
            rows = np.sort(rng.choice(d.n, size=n_sub, replace=False))
            tree = _fit_gradient_tree(design, resid, hess, rows, config.depth, grids)
            trees[c].append(tree)
            buf = np.zeros(d.n)
            _tree_predict(tree, design, buf, np.arange(d.n))
            scores[c] = scores[c] + config.shrinkage * buf
        if it == 1 or it % config.eval_every == 0 or it == config.max_iter:
            record_balance(it)

    selected = trace_iters[int(np.argmin(trace))]
    return GbmModel(
        trees=tuple(tuple(t) for t in trees),
        base_logits=base,
        shrinkage=config.shrinkage,
        balance_trace=np.array(trace),
        balance_iterations=tuple(trace_iters),
        selected_iteration=selected,
        design_labels=tuple(labels),
        n_treatments=z,
    )


def select_stopping_iteration(m: GbmModel) -> int:
    """Boosting iteration with the smallest recorded balance statistic.

    Ties break toward the earliest iteration.
    """
    if m.balance_trace.size == 0:
        raise ValueError("model has no balance trace")
    idx = int(np.argmin(m.balance_trace))  # argmin returns the first minimum
    if not m.balance_iterations:
        return idx + 1
    return m.balance_iterations[idx]


def predict_gps_gbm(m: GbmModel, d: Dataset, iteration: int | None = None) -> GpsMatrix:
    """Normalized one-vs-rest probabilities at a boosting iteration.

    Defaults to the balance-selected iteration.
    """
    design, labels = design_matrix(d, intercept=False)
    if tuple(labels) != m.design_labels:
        raise ValueError("dataset design does not match fitted design")
    upto = m.selected_iteration if iteration is None else iteration
    probs = np.column_stack(
        [
            expit(m.base_logits[c] + m.shrinkage * _eval_trees(m.trees[c], design, upto))
            for c in range(m.n_treatments)
        ]
    )
    return GpsMatrix.from_raw(probs)


# ---------------------------------------------------------------------------
# Balance diagnostics and trimming
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BalanceReport:
    """Absolute standardized bias per covariate and treatment pair.

    Categorical covariates are assessed per indicator level.  The
    denominator is the pooled unweighted standard deviation over all
    units, computed once; columns with zero pooled SD report bias 0 and
    are flagged.
    """

    labels: tuple[str, ...]
    pairs: tuple[tuple[int, int], ...]
    bias: np.ndarray
    zero_sd: tuple[bool, ...]

    @property
    def max_abs(self) -> float:
        return float(self.bias.max()) if self.bias.size else 0.0


def _balance_columns(d: Dataset):
    cols = []
    labels = []
    for j, kind in enumerate(d.kinds):
        x = d.X[:, j]
        if kind == CONTINUOUS:
            cols.append(x)
            labels.append(d.names[j])
        else:
            for level in np.unique(x):
                cols.append((x == level).astype(float))
                labels.append(f"{d.names[j]}={level:g}")
    return cols, labels


def standardized_bias(d: Dataset, weights: np.ndarray) -> BalanceReport:
    """Weighted-mean differences scaled by pooled unweighted SD."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (d.n,):
        raise ValueError("need one weight per unit")
    if not np.all(np.isfinite(weights)) or weights.min() <= 0:
        raise ValueError("weights must be finite and positive")
    cols, labels = _balance_columns(d)
    z = d.n_treatments
    pairs = [(k, l) for k in range(1, z + 1) for l in range(k + 1, z + 1)]
    bias = np.zeros((len(cols), len(pairs)))
    zero_sd = []
    masks = {w: d.W == w for w in range(1, z + 1)}
    wsums = {w: weights[masks[w]].sum() for w in range(1, z + 1)}
    for i, col in enumerate(cols):
        sd = float(np.std(col, ddof=1)) if d.n > 1 else 0.0
        zero_sd.append(sd == 0.0)
        if sd == 0.0:
            continue
        means = {
            w: float(weights[masks[w]] @ col[masks[w]] / wsums[w])
            for w in range(1, z + 1)
        }
        for q, (k, l) in enumerate(pairs):
            bias[i, q] = abs(means[k] - means[l]) / sd
    return BalanceReport(
        labels=tuple(labels),
        pairs=tuple(pairs),
        bias=bias,
        zero_sd=tuple(zero_sd),
    )


def export_balance_csv(report: BalanceReport, path) -> None:
    """Write the covariate-by-pair bias matrix plus the overall max."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["covariate"] + [f"pair_{k}_{l}" for k, l in report.pairs])
        for i, label in enumerate(report.labels):
            writer.writerow([label] + [repr(float(v)) for v in report.bias[i]])
        writer.writerow(["max_abs"] + [repr(report.max_abs)] * len(report.pairs))


def trim_gps(g: GpsMatrix, lower_pct: float = 0.05, upper_pct: float = 0.95) -> GpsMatrix:
    """Cap each column at its nearest-rank percentiles, renormalize rows.

    The capping stage alone is idempotent; row renormalization afterwards
    (required so the result is a valid probability matrix) re-disperses
    capped entries, so re-trimming the result is not an exact no-op.
    """
    if not (0.0 <= lower_pct < upper_pct <= 1.0):
        raise ValueError("need 0 <= lower_pct < upper_pct <= 1")
    probs = np.array(g.probs)
    lo = np.array([nearest_rank(probs[:, c], lower_pct) for c in range(probs.shape[1])])
    hi = np.array([nearest_rank(probs[:, c], upper_pct) for c in range(probs.shape[1])])
    capped = np.clip(probs, lo, hi)
    return GpsMatrix(capped / capped.sum(axis=1, keepdims=True))
