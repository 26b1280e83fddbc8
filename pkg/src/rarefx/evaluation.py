"""Replication sweeps, performance metrics and interval machinery.

A sweep regenerates data under a scenario with per-replication derived
seeds, runs each requested method, and records every pairwise estimate
together with its bias against the scenario's stored population truth.
Results are identical for any worker count at a fixed master seed because
each replication's random stream depends only on the replication index.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import RD, CausalEstimate, Dataset, nearest_rank
from .dgp import CoefficientSet, SimConfig, generate_dataset, replication_seed
from .methods import pairs_for, run_method


@dataclass(frozen=True)
class ReplicationRow:
    rep: int
    method: str
    k: int
    l: int
    estimand: str
    estimate: float
    bias: float
    failed: bool
    error: str = ""


@dataclass(frozen=True)
class ReplicationTable:
    """Per-replication estimates and biases for a sweep."""

    rows: tuple[ReplicationRow, ...]
    n_replications: int

    def biases(self, method: str, k: int, l: int, estimand: str = RD) -> np.ndarray:
        return np.array(
            [
                r.bias
                for r in self.rows
                if r.method == method
                and (r.k, r.l, r.estimand) == (k, l, estimand)
                and not r.failed
            ]
        )

    def failure_count(self, method: str | None = None) -> int:
        return sum(
            1 for r in self.rows if r.failed and (method is None or r.method == method)
        )


@dataclass(frozen=True)
class SummaryRow:
    method: str
    k: int
    l: int
    estimand: str
    mab: float
    rmse: float
    mcse: float
    n_used: int
    n_failed: int


@dataclass(frozen=True)
class MetricSummary:
    rows: tuple[SummaryRow, ...]

    def get(self, method: str, k: int, l: int, estimand: str = RD) -> SummaryRow:
        for row in self.rows:
            if (row.method, row.k, row.l, row.estimand) == (method, k, l, estimand):
                return row
        raise KeyError((method, k, l, estimand))


def mab(biases) -> float:
    """Mean absolute bias."""
    biases = np.asarray(biases, dtype=float)
    if biases.size == 0:
        raise ValueError("no biases to summarize")
    return float(np.abs(biases).mean())


def rmse(biases) -> float:
    """Root mean squared error of the bias sample."""
    biases = np.asarray(biases, dtype=float)
    if biases.size == 0:
        raise ValueError("no biases to summarize")
    return float(np.sqrt((biases**2).mean()))


def mcse(biases) -> float:
    """Monte Carlo standard error: sample SD of the biases over sqrt(R)."""
    biases = np.asarray(biases, dtype=float)
    if biases.size < 2:
        raise ValueError("need at least two biases for a Monte Carlo SE")
    return float(np.std(biases, ddof=1) / np.sqrt(biases.size))


def _run_one_replication(args):
    (config, coeffs, methods, rep, estimands, options) = args
    ss = replication_seed(config.seed, rep)
    data_state, method_state = ss.generate_state(2)
    data = generate_dataset(replace(config, seed=int(data_state)), coeffs)
    rows = []
    z = data.n_treatments
    for method in methods:
        name = method if isinstance(method, str) else getattr(method, "__name__", "custom")
        try:
            if callable(method):
                estimates = method(data, estimands, int(method_state), options)
            else:
                estimates = run_method(
                    method, data, estimands, seed=int(method_state), options=options
                )
            for (k, l, estimand), est in sorted(estimates.items()):
                truth = coeffs.true_effect(k, l, estimand)
                rows.append(
                    ReplicationRow(
                        rep=rep,
                        method=name,
                        k=k,
                        l=l,
                        estimand=estimand,
                        estimate=est.point,
                        bias=est.point - truth,
                        failed=False,
                    )
                )
        except Exception as exc:  # failures never abort the sweep
            for k, l in pairs_for(z):
                for estimand in estimands:
                    rows.append(
                        ReplicationRow(
                            rep=rep,
                            method=name,
                            k=k,
                            l=l,
                            estimand=estimand,
                            estimate=float("nan"),
                            bias=float("nan"),
                            failed=True,
                            error=f"{type(exc).__name__}: {exc}",
                        )
                    )
    return rep, rows


def run_replications(
    config: SimConfig,
    coeffs: CoefficientSet,
    methods,
    n_replications: int,
    workers: int = 1,
    estimands=(RD,),
    options: dict | None = None,
) -> ReplicationTable:
    """Monte Carlo sweep over regenerated datasets.

    ``methods`` holds registry names or callables with the signature
    ``(dataset, estimands, seed, options) -> {(k, l, estimand): estimate}``.
    Per-method failures are recorded (flagged rows) and never abort the
    sweep.  The master seed is ``config.seed``.
    """
    if not methods:
        raise ValueError("need at least one method")
    if n_replications < 1:
        raise ValueError("need at least one replication")
    tasks = [
        (config, coeffs, tuple(methods), rep, tuple(estimands), options)
        for rep in range(n_replications)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_replication, tasks))
    else:
        results = [_run_one_replication(t) for t in tasks]
    results.sort(key=lambda item: item[0])
    rows = tuple(row for _, chunk in results for row in chunk)
    return ReplicationTable(rows=rows, n_replications=n_replications)


def summarize(table: ReplicationTable) -> MetricSummary:
    """MAB / RMSE / MCSE per (method, pair, estimand), failures excluded."""
    keys = []
    seen = set()
    for row in table.rows:
        key = (row.method, row.k, row.l, row.estimand)
        if key not in seen:
            seen.add(key)
            keys.append(key)
    out = []
    for method, k, l, estimand in keys:
        biases = table.biases(method, k, l, estimand)
        n_failed = sum(
            1
            for r in table.rows
            if r.failed and (r.method, r.k, r.l, r.estimand) == (method, k, l, estimand)
        )
        if biases.size == 0:
            out.append(
                SummaryRow(method, k, l, estimand, float("nan"), float("nan"),
                           float("nan"), 0, n_failed)
            )
            continue
        out.append(
            SummaryRow(
                method=method,
                k=k,
                l=l,
                estimand=estimand,
                mab=mab(biases),
                rmse=rmse(biases),
                mcse=mcse(biases) if biases.size >= 2 else float("nan"),
                n_used=int(biases.size),
                n_failed=n_failed,
            )
        )
    return MetricSummary(rows=tuple(out))


# ---------------------------------------------------------------------------
# Bootstrap intervals
# ---------------------------------------------------------------------------


def stratified_resample(d: Dataset, rng) -> Dataset:
    """Resample units with replacement within each treatment group.

    Stratification keeps every treatment group populated, which matters
    when the smallest group is only a few hundred units.
    """
    idx_parts = []
    for w in range(1, d.n_treatments + 1):
        group = np.nonzero(d.W == w)[0]
        idx_parts.append(rng.choice(group, size=group.size, replace=True))
    idx = np.concatenate(idx_parts)
    return Dataset(
        X=d.X[idx],
        kinds=d.kinds,
        W=d.W[idx],
        Y=d.Y[idx],
        truth=None if d.truth is None else d.truth[idx],
        names=d.names,
    )


def bootstrap_ci(
    estimator,
    d: Dataset,
    n_resamples: int = 1000,
    seed: int = 0,
    lower_pct: float = 0.025,
    upper_pct: float = 0.975,
) -> tuple[float, float]:
    """Percentile interval from stratified nonparametric resampling.

    ``estimator`` maps a Dataset to a CausalEstimate (or a float) and is
    expected to refit its whole pipeline, propensity model included, on
    each resample.  Failing resamples are skipped; more than 10% skipped
    aborts with an error.
    """
    if n_resamples < 100:
        raise ValueError("need at least 100 bootstrap resamples")
    rng = np.random.default_rng(seed)
    points = []
    skipped = 0
    for _ in range(n_resamples):
        sample = stratified_resample(d, rng)
        try:
            result = estimator(sample)
        except Exception:
            skipped += 1
            continue
        points.append(result.point if isinstance(result, CausalEstimate) else float(result))
    if skipped > 0.1 * n_resamples:
        raise RuntimeError(
            f"bootstrap unstable: {skipped}/{n_resamples} resamples failed"
        )
    points = np.array(points)
    return nearest_rank(points, lower_pct), nearest_rank(points, upper_pct)


# ---------------------------------------------------------------------------
# CSV and plot output
# ---------------------------------------------------------------------------


def save_replication_table(table: ReplicationTable, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["rep", "method", "k", "l", "estimand", "estimate", "bias", "failed", "error"]
        )
        for r in table.rows:
            writer.writerow(
                [
                    r.rep,
                    r.method,
                    r.k,
                    r.l,
                    r.estimand,
                    repr(r.estimate),
                    repr(r.bias),
                    int(r.failed),
                    r.error,
                ]
            )


def load_replication_table(path) -> ReplicationTable:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                ReplicationRow(
                    rep=int(rec["rep"]),
                    method=rec["method"],
                    k=int(rec["k"]),
                    l=int(rec["l"]),
                    estimand=rec["estimand"],
                    estimate=float(rec["estimate"]),
                    bias=float(rec["bias"]),
                    failed=bool(int(rec["failed"])),
                    error=rec["error"],
                )
            )
    n_reps = max((r.rep for r in rows), default=-1) + 1
    return ReplicationTable(rows=tuple(rows), n_replications=n_reps)


def save_metric_summary(summary: MetricSummary, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "k", "l", "estimand", "mab", "rmse", "mcse", "n_used", "n_failed"]
        )
        for r in summary.rows:
            writer.writerow(
                [r.method, r.k, r.l, r.estimand, repr(r.mab), repr(r.rmse),
                 repr(r.mcse), r.n_used, r.n_failed]
            )


def bias_boxplots(table: ReplicationTable, out_dir, estimand: str = RD) -> list[Path]:
    """One bias boxplot SVG per treatment pair, methods side by side."""
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "rarefx"
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    methods = []
    for row in table.rows:
        if row.method not in methods:
            methods.append(row.method)
    pairs = sorted({(r.k, r.l) for r in table.rows})
    written = []
    for k, l in pairs:
        data = [table.biases(m, k, l, estimand) for m in methods]
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(methods), 4.0))
        ax.boxplot([d if d.size else [0.0] for d in data], tick_labels=methods)
        ax.axhline(0.0, color="grey", linewidth=0.8, linestyle="--")
        ax.set_ylabel(f"bias ({estimand})")
        ax.set_title(f"treatment {k} vs {l}")
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        path = out_dir / f"bias_{estimand.lower()}_{k}_{l}.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
