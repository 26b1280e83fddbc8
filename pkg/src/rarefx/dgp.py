"""Synthetic data generation for the three simulation designs.

Design I varies the treatment-group ratio and sample size, design II the
outcome prevalence, and design III the degree of covariate overlap.  All
designs share ten confounders (five standard-normal, five three-level
categorical) and logistic treatment/outcome models that are nonlinear and
nonadditive through a fixed list of transformed covariate terms.

The exact coefficient values are not canonical: one frozen
:class:`CoefficientSet` per scenario ships with the package (see
``assets/coeffs/``), produced by the calibration routines here and
carrying its own population-truth effects.  Estimator evaluations compare
against those stored truths.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .core import CATEGORICAL, CONTINUOUS, RD, RR, Dataset

N_COVARIATES = 10
N_CONTINUOUS = 5
CATEGORICAL_PROBS = (0.3, 0.3, 0.4)
KINDS = (CONTINUOUS,) * N_CONTINUOUS + (CATEGORICAL,) * (N_COVARIATES - N_CONTINUOUS)

SIM3_TREATMENT_PROBS = (0.05, 0.53, 0.42)

# Nonlinear / nonadditive terms entering both the treatment and outcome
# models: squares, pairwise products, a thresholded term and two
# level-by-continuous products.
DEFAULT_Q_TERMS = (
    ("square", 0),
    ("square", 1),
    ("product", 0, 1),
    ("product", 2, 3),
    ("threshold_product", 4, 0.5),
    ("level_product", 5, 2, 0),
    ("level_product", 6, 3, 1),
)


class CalibrationError(RuntimeError):
    """A calibration search failed to converge within its budget."""


def _as_seed(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def replication_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    """Independent child seed for one replication of a sweep.

    Splittable and order-free: the stream for ``rep`` does not depend on
    how many other replications run or on worker scheduling.
    """
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(rep,))


@dataclass(frozen=True)
class SimConfig:
    """One simulation scenario.

    ``design`` is ``"I"``, ``"II"`` or ``"III"``; ``overlap`` only applies
    to design III and ``prevalence_band`` to designs II/III (design I uses
    its fixed rare-outcome band).
    """

    design: str
    scenario: str
    n: int
    ratio: tuple[float, float, float]
    prevalence_band: tuple[float, float]
    overlap: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.design not in ("I", "II", "III"):
            raise ValueError(f"unknown design {self.design!r}")
        if self.n <= 0:
            raise ValueError("sample size must be positive")
        if any(r <= 0 for r in self.ratio):
            raise ValueError("ratio components must be positive")
        lo, hi = self.prevalence_band
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("prevalence band must satisfy 0 < lo < hi < 1")
        if self.design == "III" and self.overlap not in ("strong", "moderate", "weak"):
            raise ValueError("design III needs overlap strong/moderate/weak")


_SCENARIOS = {
    ("I", "1"): dict(n=1500, ratio=(1.0, 1.0, 1.0), prevalence_band=(0.02, 0.03)),
    ("I", "2"): dict(n=4000, ratio=(1.0, 4.0, 3.0), prevalence_band=(0.02, 0.03)),
    ("I", "3"): dict(n=9500, ratio=(1.0, 10.0, 8.0), prevalence_band=(0.02, 0.03)),
    ("II", "1"): dict(n=9500, ratio=(1.0, 10.0, 8.0), prevalence_band=(0.01, 0.05)),
    ("II", "2"): dict(n=9500, ratio=(1.0, 10.0, 8.0), prevalence_band=(0.05, 0.10)),
    ("III", "strong"): dict(
        n=9500, ratio=(0.05, 0.53, 0.42), prevalence_band=(0.01, 0.05), overlap="strong"
    ),
    ("III", "moderate"): dict(
        n=9500, ratio=(0.05, 0.53, 0.42), prevalence_band=(0.01, 0.05), overlap="moderate"
    ),
    ("III", "weak"): dict(
        n=9500, ratio=(0.05, 0.53, 0.42), prevalence_band=(0.01, 0.05), overlap="weak"
    ),
}


def scenario_config(design: str, scenario: str, seed: int = 0, n: int | None = None) -> SimConfig:
    """Canonical configuration for a shipped scenario.

    ``n`` overrides the scenario's sample size (for desk-scale runs).
    """
    key = (design, str(scenario))
    if key not in _SCENARIOS:
        raise KeyError(f"unknown scenario {design}/{scenario}")
    params = dict(_SCENARIOS[key])
    if n is not None:
        params["n"] = n
    return SimConfig(design=design, scenario=str(scenario), seed=seed, **params)


def list_scenarios() -> tuple[tuple[str, str], ...]:
    return tuple(_SCENARIOS)


@dataclass(frozen=True)
class CoefficientSet:
    """Frozen treatment-model and response-surface coefficients.

    ``alpha`` are the two treatment-model intercepts (third treatment is
    the reference), ``xi_*`` the treatment-model slopes, ``tau`` the three
    response-surface intercepts and ``eta_*`` the response-surface slopes.
    ``q_terms`` defines the transformed covariate vector shared by both
    models.  ``true_effects`` maps ``(k, l, estimand)`` to the stored
    population truth.
    """

    alpha: np.ndarray
    xi_lin: np.ndarray
    xi_nl: np.ndarray
    tau: np.ndarray
    eta_lin: np.ndarray
    eta_nl: np.ndarray
    q_terms: tuple = DEFAULT_Q_TERMS
    true_effects: dict | None = None
    meta: dict | None = None

    def __post_init__(self):
        for name in ("alpha", "xi_lin", "xi_nl", "tau", "eta_lin", "eta_nl"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.alpha.shape != (2,) or self.tau.shape != (3,):
            raise ValueError("need 2 treatment intercepts and 3 outcome intercepts")
        n_q = len(self.q_terms)
        if self.xi_lin.shape != (2, N_COVARIATES) or self.xi_nl.shape != (2, n_q):
            raise ValueError("treatment-model slope shapes do not match")
        if self.eta_lin.shape != (3, N_COVARIATES) or self.eta_nl.shape != (3, n_q):
            raise ValueError("response-surface slope shapes do not match")
        for term in self.q_terms:
            cols = [term[1]] if term[0] in ("square", "threshold_product") else [term[1], term[-1]]
            if term[0] == "level_product":
                cols = [term[1], term[3]]
            for c in cols:
                if not (0 <= c < N_COVARIATES):
                    raise ValueError(f"transform references invalid covariate column {c}")

    def true_effect(self, k: int, l: int, estimand: str = RD) -> float:
        if self.true_effects is None:
            raise KeyError("coefficient set carries no stored true effects")
        return self.true_effects[(k, l, estimand)]


def compute_q(X: np.ndarray, q_terms=DEFAULT_Q_TERMS) -> np.ndarray:
    """Evaluate the transformed covariate terms row-wise."""
    cols = []
    for term in q_terms:
        kind = term[0]
        if kind == "square":
            cols.append(X[:, term[1]] ** 2)
        elif kind == "product":
            cols.append(X[:, term[1]] * X[:, term[2]])
        elif kind == "threshold_product":
            j, thr = term[1], term[2]
            cols.append((X[:, j] > thr) * X[:, j])
        elif kind == "level_product":
            j, level, k = term[1], term[2], term[3]
            cols.append((X[:, j] == level) * X[:, k])
        else:
            raise ValueError(f"unknown transform {kind!r}")
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Covariates and treatment
# ---------------------------------------------------------------------------


def generate_covariates_sim12(n: int, seed) -> np.ndarray:
    """Five standard-normal plus five categorical (0.3/0.3/0.4) columns."""
    if n < 1:
        raise ValueError("need at least one unit")
    rng = np.random.default_rng(_as_seed(seed))
    cont = rng.standard_normal((n, N_CONTINUOUS))
    cat = 1 + rng.choice(3, size=(n, N_COVARIATES - N_CONTINUOUS), p=CATEGORICAL_PROBS)
    return np.column_stack([cont, cat.astype(float)])


def treatment_probabilities(X: np.ndarray, coeffs: CoefficientSet) -> np.ndarray:
    """True assignment probabilities (N x 3) under the treatment model."""
    q = compute_q(X, coeffs.q_terms)
    logits = np.column_stack(
        [
            coeffs.alpha[0] + X @ coeffs.xi_lin[0] + q @ coeffs.xi_nl[0],
            coeffs.alpha[1] + X @ coeffs.xi_lin[1] + q @ coeffs.xi_nl[1],
            np.zeros(X.shape[0]),
        ]
    )
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _draw_categorical(rng, probs: np.ndarray) -> np.ndarray:
    u = rng.random(probs.shape[0])
    return 1 + (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)


def assign_treatment(X: np.ndarray, coeffs: CoefficientSet, seed) -> np.ndarray:
    """Draw treatment labels from the multinomial-logit assignment model."""
    rng = np.random.default_rng(_as_seed(seed))
    return _draw_categorical(rng, treatment_probabilities(X, coeffs)).astype(np.int64)


def calibrate_intercepts(
    coeffs: CoefficientSet,
    target_ratio: tuple[float, float, float],
    n_cal: int = 100_000,
    seed: int = 20_000,
    tol: float = 0.005,
    max_evals: int = 100,
) -> tuple[float, float]:
    """Intercepts that hit a target group-share ratio.

    Matches the expected group shares on a fixed calibration population
    of ``n_cal`` units to within ``tol / 2`` per group (margin left for
    sampling noise in fresh draws).
    """
    if any(r <= 0 for r in target_ratio):
        raise ValueError("ratio components must be positive")
    target = np.asarray(target_ratio, dtype=float)
    target = target / target.sum()
    X = generate_covariates_sim12(n_cal, seed)
    alpha = np.array(coeffs.alpha, dtype=float)
    for _ in range(max_evals):
        shares = treatment_probabilities(X, replace(coeffs, alpha=alpha)).mean(axis=0)
        if np.abs(shares - target).max() < tol / 2.0:
            return float(alpha[0]), float(alpha[1])
        adjust = np.log(target) - np.log(shares)
        alpha[0] += adjust[0] - adjust[2]
        alpha[1] += adjust[1] - adjust[2]
    raise CalibrationError(
        f"group-share calibration did not reach tolerance {tol / 2.0} "
        f"within {max_evals} evaluations"
    )


# ---------------------------------------------------------------------------
# Outcomes
# ---------------------------------------------------------------------------


def potential_outcome_probabilities(X: np.ndarray, coeffs: CoefficientSet) -> np.ndarray:
    """True response surfaces: N x 3 matrix of outcome probabilities."""
    q = compute_q(X, coeffs.q_terms)
    return expit(
        np.column_stack(
            [
                coeffs.tau[w] + X @ coeffs.eta_lin[w] + q @ coeffs.eta_nl[w]
                for w in range(3)
            ]
        )
    )


def generate_outcomes(X: np.ndarray, W: np.ndarray, coeffs: CoefficientSet, seed):
    """Bernoulli outcomes at each unit's observed treatment.

    Returns ``(Y, truth)`` where ``truth`` holds the full N x 3 matrix of
    potential-outcome probabilities.
    """
    rng = np.random.default_rng(_as_seed(seed))
    truth = potential_outcome_probabilities(X, coeffs)
    observed = truth[np.arange(X.shape[0]), np.asarray(W, dtype=int) - 1]
    y = (rng.random(X.shape[0]) < observed).astype(np.int64)
    return y, truth


def calibrate_prevalence(
    coeffs: CoefficientSet,
    band: tuple[float, float],
    X: np.ndarray,
    W: np.ndarray,
    max_evals: int = 100,
) -> np.ndarray:
    """Outcome intercepts putting each group's prevalence at the band midpoint.

    Solves, per treatment group, for the intercept shift that makes the
    expected observed prevalence among that group's units equal the
    midpoint of ``band`` to within ``(hi - lo) / 8``.
    """
    lo, hi = band
    if not (0.0 < lo < hi < 1.0):
        raise ValueError("prevalence band must satisfy 0 < lo < hi < 1")
    target = (lo + hi) / 2.0
    tol = (hi - lo) / 8.0
    q = compute_q(X, coeffs.q_terms)
    W = np.asarray(W, dtype=int)
    tau = np.array(coeffs.tau, dtype=float)
    for w in range(3):
        mask = W == w + 1
        base = X[mask] @ coeffs.eta_lin[w] + q[mask] @ coeffs.eta_nl[w]
        shift = tau[w]
        for _ in range(max_evals):
            prev = float(expit(shift + base).mean())
            if abs(prev - target) < tol:
                break
            shift += logit(target) - logit(prev)
        else:
            raise CalibrationError(
                f"prevalence calibration for group {w + 1} did not converge"
            )
        tau[w] = shift
    return tau


# ---------------------------------------------------------------------------
# Design III: covariates conditional on treatment
# ---------------------------------------------------------------------------


def generate_sim3_treatment(n: int, seed) -> np.ndarray:
    """Marginal treatment draw for the overlap design."""
    rng = np.random.default_rng(_as_seed(seed))
    probs = np.tile(SIM3_TREATMENT_PROBS, (n, 1))
    return _draw_categorical(rng, probs).astype(np.int64)


def generate_sim3_covariates(n: int, W: np.ndarray, level: str, seed) -> np.ndarray:
    """Covariates drawn conditional on treatment to set the overlap level.

    strong:   continuous ``N(0, 1 - 0.01 w)``, categorical (0.3, 0.3, 0.4)
    moderate: continuous ``N(0.05 w, 1 - 0.05 w)``,
              categorical (0.3 - 0.01 w, 0.3 + 0.01 w, 0.4)
    weak:     continuous ``N(-0.5, 1)`` / ``N(1, 1)`` / ``N(2, 1)`` by group,
              categorical (0.3 - 0.001 w, 0.3 + 0.001 w, 0.4)

    Normal parameters are (mean, variance).
    """
    W = np.asarray(W, dtype=int)
    if W.shape != (n,):
        raise ValueError("need one treatment label per unit")
    rng = np.random.default_rng(_as_seed(seed))
    wf = W.astype(float)
    if level == "strong":
        mean = np.zeros(n)
        var = 1.0 - 0.01 * wf
        cat_probs = np.tile(CATEGORICAL_PROBS, (n, 1))
    elif level == "moderate":
        mean = 0.05 * wf
        var = 1.0 - 0.05 * wf
        cat_probs = np.column_stack(
            [0.3 - 0.01 * wf, 0.3 + 0.01 * wf, np.full(n, 0.4)]
        )
    elif level == "weak":
        group_mean = np.array([-0.5, 1.0, 2.0])
        mean = group_mean[W - 1]
        var = np.ones(n)
        cat_probs = np.column_stack(
            [0.3 - 0.001 * wf, 0.3 + 0.001 * wf, np.full(n, 0.4)]
        )
    else:
        raise ValueError(f"unknown overlap level {level!r}")
    sd = np.sqrt(var)
    cont = mean[:, None] + sd[:, None] * rng.standard_normal((n, N_CONTINUOUS))
    cat = np.column_stack(
        [_draw_categorical(rng, cat_probs) for _ in range(N_COVARIATES - N_CONTINUOUS)]
    )
    return np.column_stack([cont, cat.astype(float)])


# ---------------------------------------------------------------------------
# Full pipelines
# ---------------------------------------------------------------------------

_COVARIATE_NAMES = tuple(f"x{j}" for j in range(1, N_CONTINUOUS + 1)) + tuple(
    f"c{j}" for j in range(1, N_COVARIATES - N_CONTINUOUS + 1)
)


def generate_dataset(config: SimConfig, coeffs: CoefficientSet) -> Dataset:
    """One full dataset (with truth matrix) for a scenario."""
    ss = _as_seed(config.seed)
    s_first, s_second, s_outcome = ss.spawn(3)
    if config.design in ("I", "II"):
        X = generate_covariates_sim12(config.n, s_first)
        W = assign_treatment(X, coeffs, s_second)
    else:
        W = generate_sim3_treatment(config.n, s_first)
        X = generate_sim3_covariates(config.n, W, config.overlap, s_second)
    Y, truth = generate_outcomes(X, W, coeffs, s_outcome)
    return Dataset(X=X, kinds=KINDS, W=W, Y=Y, truth=truth, names=_COVARIATE_NAMES)


def true_gps(d: Dataset, config: SimConfig, coeffs: CoefficientSet) -> np.ndarray:
    """True assignment probabilities for a design I/II dataset.

    Design III draws covariates conditional on treatment, so its
    conditional assignment probabilities are not those of the logit model
    and are not exposed here.
    """
    if config.design not in ("I", "II"):
        raise ValueError("true assignment probabilities are only defined for designs I/II")
    return treatment_probabilities(d.X, coeffs)


def true_ate(
    config: SimConfig,
    coeffs: CoefficientSet,
    k: int,
    l: int,
    estimand: str = RD,
    n_pop: int = 100_000,
    seed: int = 77_000,
) -> float:
    """Population-level pairwise effect from a fresh simulated population."""
    if k == l:
        return 0.0 if estimand == RD else 1.0
    pop = generate_dataset(replace(config, n=n_pop, seed=seed), coeffs)
    mean_k = float(pop.truth[:, k - 1].mean())
    mean_l = float(pop.truth[:, l - 1].mean())
    if estimand == RR:
        return mean_k / mean_l
    if estimand == RD:
        return mean_k - mean_l
    raise ValueError(f"estimand must be RD or RR, got {estimand!r}")


# ---------------------------------------------------------------------------
# Coefficient-file serialization
# ---------------------------------------------------------------------------

_PAIRS = ((1, 2), (1, 3), (2, 3))


def _encode_term(term) -> str:
    return term[0] + ":" + ",".join(repr(v) if isinstance(v, float) else str(v) for v in term[1:])


def _decode_term(text):
    kind, _, rest = text.partition(":")
    parts = rest.split(",") if rest else []
    if kind in ("square",):
        return (kind, int(parts[0]))
    if kind == "product":
        return (kind, int(parts[0]), int(parts[1]))
    if kind == "threshold_product":
        return (kind, int(parts[0]), float(parts[1]))
    if kind == "level_product":
        return (kind, int(parts[0]), int(parts[1]), int(parts[2]))
    raise ValueError(f"unknown transform {kind!r}")


def save_coefficients(coeffs: CoefficientSet, path) -> None:
    """Write a coefficient set as a versioned plain-text key-value file."""
    lines = ["format_version=1"]
    lines.append("alpha=" + ",".join(repr(float(v)) for v in coeffs.alpha))
    for row in range(2):
        lines.append(f"xi_lin_{row + 1}=" + ",".join(repr(float(v)) for v in coeffs.xi_lin[row]))
        lines.append(f"xi_nl_{row + 1}=" + ",".join(repr(float(v)) for v in coeffs.xi_nl[row]))
    lines.append("tau=" + ",".join(repr(float(v)) for v in coeffs.tau))
    for row in range(3):
        lines.append(f"eta_lin_{row + 1}=" + ",".join(repr(float(v)) for v in coeffs.eta_lin[row]))
        lines.append(f"eta_nl_{row + 1}=" + ",".join(repr(float(v)) for v in coeffs.eta_nl[row]))
    lines.append("q_terms=" + "|".join(_encode_term(t) for t in coeffs.q_terms))
    if coeffs.true_effects:
        for (k, l, estimand), value in sorted(coeffs.true_effects.items()):
            lines.append(f"true_{estimand.lower()}_{k}_{l}={float(value)!r}")
    if coeffs.meta:
        for key, value in sorted(coeffs.meta.items()):
            lines.append(f"meta_{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_coefficients(text: str) -> CoefficientSet:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key] = value
    if fields.get("format_version") != "1":
        raise ValueError("unsupported coefficient file version")

    def vec(key):
        return np.array([float(v) for v in fields[key].split(",")])

    true_effects = {}
    meta = {}
    for key, value in fields.items():
        if key.startswith("true_"):
            _, estimand, k, l = key.split("_")
            true_effects[(int(k), int(l), estimand.upper())] = float(value)
        elif key.startswith("meta_"):
            meta[key[5:]] = value
    return CoefficientSet(
        alpha=vec("alpha"),
        xi_lin=np.vstack([vec("xi_lin_1"), vec("xi_lin_2")]),
        xi_nl=np.vstack([vec("xi_nl_1"), vec("xi_nl_2")]),
        tau=vec("tau"),
        eta_lin=np.vstack([vec("eta_lin_1"), vec("eta_lin_2"), vec("eta_lin_3")]),
        eta_nl=np.vstack([vec("eta_nl_1"), vec("eta_nl_2"), vec("eta_nl_3")]),
        q_terms=tuple(_decode_term(t) for t in fields["q_terms"].split("|")),
        true_effects=true_effects or None,
        meta=meta or None,
    )


def load_coefficients_file(path) -> CoefficientSet:
    return _parse_coefficients(Path(path).read_text())


def coefficients_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def packaged_coefficients_path(design: str, scenario: str) -> Path:
    """Filesystem path of a shipped coefficient file."""
    name = {"I": "sim1", "II": "sim2", "III": "sim3"}[design] + f"_{scenario}.txt"
    with resources.as_file(resources.files("rarefx") / "assets" / "coeffs" / name) as p:
        return Path(p)


def load_coefficients(design: str, scenario: str) -> CoefficientSet:
    """Load the frozen coefficient set shipped for a scenario."""
    return load_coefficients_file(packaged_coefficients_path(design, str(scenario)))
