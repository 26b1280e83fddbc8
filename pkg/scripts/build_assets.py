#!/usr/bin/env python3
"""Build the frozen per-scenario coefficient files and the demo dataset.

Run from the repository root:

    python scripts/build_assets.py

Outputs land in src/rarefx/assets/.  Everything is deterministic: the
base coefficients are drawn once from a fixed seed and each scenario
calibrates its intercepts/prevalence on fixed calibration populations,
then stores its own population-truth effects (n=100,000).
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np

import rarefx.dgp as dgp
from rarefx.cli import _save_schema
from rarefx.core import group_sizes, save_dataset

ASSETS = Path(__file__).resolve().parent.parent / "src" / "rarefx" / "assets"

BASE_SEED = 2024
CAL_X_SEED = 5
CAL_W_SEED = 6
TRUTH_SEED = 77_000
TRUTH_N = 100_000

PAIRS = ((1, 2), (1, 3), (2, 3))


def draw_base_coefficients() -> dgp.CoefficientSet:
    """One base draw shared by every scenario.

    Linear slopes ~ U(-0.4, 0.4).  The nonlinear-term slopes share a
    signed base in (0.3, 0.6) between the treatment and outcome models
    (plus per-model U(-0.1, 0.1) noise) so that the transformed terms act
    as strong common confounders.
    """
    rng = np.random.default_rng(BASE_SEED)
    nq = len(dgp.DEFAULT_Q_TERMS)
    xi_lin = rng.uniform(-0.4, 0.4, size=(2, 10))
    eta_lin = rng.uniform(-0.4, 0.4, size=(3, 10))
    signs = rng.choice([-1.0, 1.0], size=nq)
    base_q = signs * rng.uniform(0.3, 0.6, size=nq)
    xi_nl = base_q + rng.uniform(-0.1, 0.1, size=(2, nq))
    eta_nl = base_q + rng.uniform(-0.1, 0.1, size=(3, nq))
    return dgp.CoefficientSet(
        alpha=np.zeros(2),
        xi_lin=xi_lin,
        xi_nl=xi_nl,
        tau=np.full(3, -3.5),
        eta_lin=eta_lin,
        eta_nl=eta_nl,
    )


def calibrate_scenario(base: dgp.CoefficientSet, config: dgp.SimConfig) -> dgp.CoefficientSet:
    if config.design in ("I", "II"):
        a1, a2 = dgp.calibrate_intercepts(base, config.ratio, seed=CAL_X_SEED)
        coeffs = replace(base, alpha=np.array([a1, a2]))
        x_cal = dgp.generate_covariates_sim12(100_000, CAL_X_SEED)
        w_cal = dgp.assign_treatment(x_cal, coeffs, CAL_W_SEED)
    else:
        coeffs = base
        w_cal = dgp.generate_sim3_treatment(100_000, CAL_W_SEED)
        x_cal = dgp.generate_sim3_covariates(100_000, w_cal, config.overlap, CAL_X_SEED)
    tau = dgp.calibrate_prevalence(coeffs, config.prevalence_band, x_cal, w_cal)
    coeffs = replace(coeffs, tau=tau)
    truths = {}
    for k, l in PAIRS:
        for estimand in ("RD", "RR"):
            truths[(k, l, estimand)] = dgp.true_ate(
                config, coeffs, k, l, estimand, n_pop=TRUTH_N, seed=TRUTH_SEED
            )
    meta = {
        "design": config.design,
        "scenario": config.scenario,
        "ratio": ":".join(f"{r:g}" for r in config.ratio),
        "prevalence_band": f"{config.prevalence_band[0]:g}-{config.prevalence_band[1]:g}",
        "base_seed": BASE_SEED,
        "truth_seed": TRUTH_SEED,
        "truth_n": TRUTH_N,
    }
    if config.overlap:
        meta["overlap"] = config.overlap
    return replace(coeffs, true_effects=truths, meta=meta)


DEMO_SEED = 11_980
DEMO_RATIO = (396.0, 6582.0, 5002.0)


def build_demo(base: dgp.CoefficientSet, coeff_dir: Path, demo_dir: Path) -> None:
    config = dgp.SimConfig(
        design="I",
        scenario="demo",
        n=11_980,
        ratio=DEMO_RATIO,
        prevalence_band=(0.02, 0.03),
        seed=DEMO_SEED,
    )
    a1, a2 = dgp.calibrate_intercepts(base, DEMO_RATIO, seed=CAL_X_SEED)
    coeffs = replace(base, alpha=np.array([a1, a2]))
    x_cal = dgp.generate_covariates_sim12(100_000, CAL_X_SEED)
    w_cal = dgp.assign_treatment(x_cal, coeffs, CAL_W_SEED)
    coeffs = replace(
        coeffs, tau=dgp.calibrate_prevalence(coeffs, config.prevalence_band, x_cal, w_cal)
    )
    truths = {}
    for k, l in PAIRS:
        for estimand in ("RD", "RR"):
            truths[(k, l, estimand)] = dgp.true_ate(
                config, coeffs, k, l, estimand, n_pop=TRUTH_N, seed=TRUTH_SEED
            )
    coeffs = replace(
        coeffs,
        true_effects=truths,
        meta={"design": "I", "scenario": "demo", "base_seed": BASE_SEED, "seed": DEMO_SEED},
    )
    dgp.save_coefficients(coeffs, coeff_dir / "demo.txt")
    data = dgp.generate_dataset(config, coeffs)
    save_dataset(data, demo_dir / "dataset.csv", demo_dir / "truth.csv")
    _save_schema(data, demo_dir / "schema.txt")
    sizes = group_sizes(data)
    lines = [
        "scenario=demo",
        f"n={data.n}",
        f"seed={DEMO_SEED}",
        "ratio_target=396:6582:5002",
        "group_sizes=" + ":".join(str(int(s)) for s in sizes),
        "coefficients_file=demo.txt",
        f"events={int(data.Y.sum())}",
    ]
    (demo_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"demo: groups {sizes.tolist()}, events {int(data.Y.sum())}")


def main() -> None:
    coeff_dir = ASSETS / "coeffs"
    demo_dir = ASSETS / "demo"
    coeff_dir.mkdir(parents=True, exist_ok=True)
    demo_dir.mkdir(parents=True, exist_ok=True)
    base = draw_base_coefficients()
    names = {"I": "sim1", "II": "sim2", "III": "sim3"}
    for design, scenario in dgp.list_scenarios():
        config = dgp.scenario_config(design, scenario)
        coeffs = calibrate_scenario(base, config)
        path = coeff_dir / f"{names[design]}_{scenario}.txt"
        dgp.save_coefficients(coeffs, path)
        rds = {f"{k}{l}": round(100 * coeffs.true_effects[(k, l, 'RD')], 3) for k, l in PAIRS}
        print(f"{path.name}: tau={np.round(coeffs.tau, 3).tolist()} true RD% {rds}")
    build_demo(base, coeff_dir, demo_dir)


if __name__ == "__main__":
    main()
