"""Named estimation pipelines: propensity model x estimator x trimming.

The closed set of method names couples a propensity-score model (``mlr``
or ``gbm``) with an estimator (``iptw`` or ``rams``) and optional
trimming, plus the tree-ensemble outcome model with and without the
common-support filter.  Every pipeline maps a dataset to one estimate per
treatment pair and estimand.
"""

from __future__ import annotations

from itertools import combinations

from . import bart, gps, iptw, rams
from .core import RD, CausalEstimate, Dataset, GpsMatrix

METHOD_NAMES = (
    "iptw-mlr",
    "iptw-mlr-trim",
    "iptw-gbm",
    "iptw-gbm-trim",
    "rams-mlr",
    "rams-mlr-trim",
    "rams-gbm",
    "rams-gbm-trim",
    "bart",
    "bart-discard",
)

DEFAULT_OPTIONS = {
    "trim_lower": 0.05,
    "trim_upper": 0.95,
    "rams_knots": 5,
    "rams_degree": 3,
    "rams_lambda": "auto",
    "gbm": {},
    "bart": {},
}


def pairs_for(z: int):
    return list(combinations(range(1, z + 1), 2))


def _merged_options(options):
    merged = dict(DEFAULT_OPTIONS)
    if options:
        merged.update(options)
    return merged


def _estimate_gps(d: Dataset, model: str, seed: int, opts) -> GpsMatrix:
    if model == "mlr":
        fitted = gps.fit_mlr(d)
        return gps.predict_gps_mlr(fitted, d)
    config = gps.GbmConfig(seed=seed, **opts["gbm"])
    fitted = gps.fit_gbm(d, config)
    return gps.predict_gps_gbm(fitted, d)


def run_method(
    name: str,
    d: Dataset,
    estimands=(RD,),
    seed: int = 0,
    options: dict | None = None,
) -> dict[tuple[int, int, str], CausalEstimate]:
    """Run one named pipeline over every treatment pair.

    Returns a mapping ``(k, l, estimand) -> CausalEstimate``.  Interval
    entries are filled only for the posterior-based methods; weighting and
    regression methods get intervals from the bootstrap machinery instead.
    """
    if name not in METHOD_NAMES:
        raise ValueError(f"unknown method {name!r}; choose from {METHOD_NAMES}")
    opts = _merged_options(options)
    trim = (opts["trim_lower"], opts["trim_upper"])
    z = d.n_treatments
    out: dict[tuple[int, int, str], CausalEstimate] = {}

    if name.startswith("iptw"):
        g = _estimate_gps(d, "gbm" if "gbm" in name else "mlr", seed, opts)
        weights = iptw.compute_weights(g, d)
        if name.endswith("-trim"):
            weights = iptw.trim_weights(weights, *trim)
        for k, l in pairs_for(z):
            for estimand in estimands:
                out[(k, l, estimand)] = iptw.estimate_ate_iptw(
                    d, weights, k, l, estimand, method=name
                )
        return out

    if name.startswith("rams"):
        g = _estimate_gps(d, "gbm" if "gbm" in name else "mlr", seed, opts)
        if name.endswith("-trim"):
            g = gps.trim_gps(g, *trim)
        basis = rams.build_tensor_basis(g, opts["rams_knots"], opts["rams_degree"])
        model = rams.fit_rams(d, g, basis, opts["rams_lambda"])
        for k, l in pairs_for(z):
            for estimand in estimands:
                out[(k, l, estimand)] = rams.estimate_ate_rams(
                    model, d, g, k, l, estimand, method=name
                )
        return out

    config = bart.BartConfig(seed=seed, **opts["bart"])
    posterior = bart.fit_probit_bart(d, config)
    keep = None
    if name == "bart-discard":
        keep = bart.discard_common_support(posterior, d)
    for k, l in pairs_for(z):
        for estimand in estimands:
            out[(k, l, estimand)] = bart.estimate_ate_bart(
                posterior, k, l, estimand, keep=keep, method=name
            )
    return out
