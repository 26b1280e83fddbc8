"""Command-line interface: ``simulate``, ``estimate`` and ``report``.

Every run writes a plain-text manifest (seed, resolved configuration hash,
coefficient-file hash, library versions) sufficient to reproduce its
outputs byte-for-byte.  Exit codes: 0 full success, 2 partial success
(some methods failed), 1 hard error (including usage errors).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .core import (
    RD,
    RR,
    CATEGORICAL,
    CONTINUOUS,
    ColumnSchema,
    Dataset,
    group_sizes,
    load_dataset,
    nearest_rank,
    save_dataset,
)
from .dgp import (
    coefficients_hash,
    generate_dataset,
    load_coefficients_file,
    packaged_coefficients_path,
    scenario_config,
)
from .evaluation import (
    bias_boxplots,
    load_replication_table,
    run_replications,
    save_metric_summary,
    save_replication_table,
    stratified_resample,
    summarize,
)
from .methods import METHOD_NAMES, pairs_for, run_method


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # exit code 2 is reserved for partial success, so usage errors must
    # not use argparse's default exit(2)
    def error(self, message):
        raise UsageError(message)


def _parse_config_file(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"malformed config line {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _write_manifest(out_dir: Path, items: dict) -> None:
    lines = [f"{key}={value}" for key, value in sorted(items.items())]
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    (out_dir / "manifest.txt").write_text(body + f"config_sha256={digest}\n")


def _version_items() -> dict:
    return {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
    }


def _load_coefficients(args):
    if args.coefficients:
        path = Path(args.coefficients)
    else:
        path = packaged_coefficients_path(args.design, args.scenario)
    return load_coefficients_file(path), path


def _method_options(args) -> dict:
    options = {}
    if getattr(args, "trim", None):
        lo, hi = (float(v) for v in args.trim.split("/"))
        options["trim_lower"] = lo
        options["trim_upper"] = hi
    if getattr(args, "bart_trees", None):
        options.setdefault("bart", {})["n_trees"] = args.bart_trees
    if getattr(args, "bart_iter", None):
        options.setdefault("bart", {})["n_iter"] = args.bart_iter
    if getattr(args, "bart_burn_in", None):
        options.setdefault("bart", {})["burn_in"] = args.bart_burn_in
    if getattr(args, "gbm_iter", None):
        options.setdefault("gbm", {})["max_iter"] = args.gbm_iter
    return options


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _save_schema(d: Dataset, path: Path) -> None:
    categorical = [n for n, kind in zip(d.names, d.kinds) if kind == CATEGORICAL]
    lines = [
        "treatment=w",
        "outcome=y",
        "covariates=" + ",".join(d.names),
        "categorical=" + ",".join(categorical),
    ]
    path.write_text("\n".join(lines) + "\n")


def _read_schema(path) -> ColumnSchema:
    fields = _parse_config_file(path)
    covariates = fields["covariates"].split(",") if fields.get("covariates") else []
    categorical = set(fields["categorical"].split(",")) if fields.get("categorical") else set()
    return ColumnSchema(
        treatment=fields.get("treatment", "w"),
        outcome=fields.get("outcome", "y"),
        covariates=tuple(
            (name, CATEGORICAL if name in categorical else CONTINUOUS)
            for name in covariates
        ),
    )


def cmd_simulate(args) -> int:
    config = scenario_config(args.design, args.scenario, seed=args.seed, n=args.n)
    coeffs, coeff_path = _load_coefficients(args)
    data = generate_dataset(config, coeffs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out_dir / "dataset.csv", out_dir / "truth.csv")
    _save_schema(data, out_dir / "schema.txt")
    sizes = group_sizes(data)
    items = {
        "command": "simulate",
        "design": config.design,
        "scenario": config.scenario,
        "n": config.n,
        "ratio_target": ":".join(f"{r:g}" for r in config.ratio),
        "prevalence_band": f"{config.prevalence_band[0]:g}-{config.prevalence_band[1]:g}",
        "seed": config.seed,
        "group_sizes": ":".join(str(int(s)) for s in sizes),
        "coefficients_file": coeff_path.name,
        "coefficients_sha256": coefficients_hash(coeff_path),
    }
    if config.overlap:
        items["overlap"] = config.overlap
    if coeffs.true_effects:
        for (k, l, estimand), value in sorted(coeffs.true_effects.items()):
            items[f"true_{estimand.lower()}_{k}_{l}"] = repr(value)
    items.update(_version_items())
    _write_manifest(out_dir, items)
    print(f"wrote dataset ({data.n} units, groups {items['group_sizes']}) to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# estimate
# ---------------------------------------------------------------------------


def _bootstrap_all_pairs(name, d, estimands, n_resamples, seed, options):
    """One stratified bootstrap loop per method covering all pairs."""
    rng = np.random.default_rng(seed)
    points: dict[tuple, list] = {}
    skipped = 0
    for _ in range(n_resamples):
        sample = stratified_resample(d, rng)
        try:
            estimates = run_method(name, sample, estimands, seed=seed, options=options)
        except Exception:
            skipped += 1
            continue
        for key, est in estimates.items():
            points.setdefault(key, []).append(est.point)
    if skipped > 0.1 * n_resamples:
        raise RuntimeError(f"bootstrap unstable: {skipped}/{n_resamples} resamples failed")
    return {
        key: (nearest_rank(np.array(vals), 0.025), nearest_rank(np.array(vals), 0.975))
        for key, vals in points.items()
    }


def _format_estimate_table(rows, estimand) -> str:
    """Method-by-pair grid of point estimates and 95% intervals."""
    pairs = sorted({(r["k"], r["l"]) for r in rows if r["estimand"] == estimand})
    methods = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    scale = 100.0 if estimand == RD else 1.0
    unit = "percent risk difference" if estimand == RD else "risk ratio"
    head = ["method"] + [f"ate_{k}_{l}" for k, l in pairs]
    lines = [f"# estimand: {unit}", "\t".join(head)]
    for m in methods:
        cells = [m]
        for k, l in pairs:
            match = [
                r
                for r in rows
                if r["method"] == m and (r["k"], r["l"]) == (k, l) and r["estimand"] == estimand
            ]
            if not match or match[0]["failed"]:
                cells.append("failed")
                continue
            r = match[0]
            if r["lower"] is None:
                cells.append(f"{r['point'] * scale:.2f}")
            else:
                cells.append(
                    f"{r['point'] * scale:.2f} ({r['lower'] * scale:.2f}, {r['upper'] * scale:.2f})"
                )
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    data_path = Path(args.data)
    schema_path = Path(args.schema) if args.schema else data_path.parent / "schema.txt"
    if not schema_path.exists():
        raise UsageError(f"no schema file at {schema_path}; pass --schema")
    schema = _read_schema(schema_path)
    d = load_dataset(data_path, schema)
    method_list = args.methods.split(",")
    for m in method_list:
        if m not in METHOD_NAMES:
            raise UsageError(f"unknown method {m!r}; choose from {','.join(METHOD_NAMES)}")
    estimands = tuple(e.upper() for e in args.estimands.split(","))
    for e in estimands:
        if e not in (RD, RR):
            raise UsageError(f"unknown estimand {e!r}")
    options = _method_options(args)

    rows = []
    any_failed = False
    for name in method_list:
        try:
            estimates = run_method(name, d, estimands, seed=args.seed, options=options)
            intervals = {}
            if not name.startswith("bart"):
                intervals = _bootstrap_all_pairs(
                    name, d, estimands, args.bootstrap_B, args.seed, options
                )
            for (k, l, estimand), est in sorted(estimates.items()):
                lower, upper = est.interval if est.interval else (None, None)
                if (k, l, estimand) in intervals:
                    lower, upper = intervals[(k, l, estimand)]
                rows.append(
                    dict(
                        method=name, k=k, l=l, estimand=estimand, point=est.point,
                        lower=lower, upper=upper, n_used=est.n_used, failed=False,
                        error="",
                    )
                )
        except Exception as exc:
            any_failed = True
            for k, l in pairs_for(d.n_treatments):
                for estimand in estimands:
                    rows.append(
                        dict(
                            method=name, k=k, l=l, estimand=estimand,
                            point=float("nan"), lower=None, upper=None, n_used=0,
                            failed=True, error=f"{type(exc).__name__}: {exc}",
                        )
                    )

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "estimates.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["method", "k", "l", "estimand", "point", "lower", "upper", "n_used",
             "failed", "error"]
        )
        for r in rows:
            writer.writerow(
                [
                    r["method"], r["k"], r["l"], r["estimand"], repr(r["point"]),
                    "" if r["lower"] is None else repr(r["lower"]),
                    "" if r["upper"] is None else repr(r["upper"]),
                    r["n_used"], int(r["failed"]), r["error"],
                ]
            )
    tables = [_format_estimate_table(rows, e) for e in estimands]
    (out_dir / "estimates_table.txt").write_text("\n".join(tables))
    items = {
        "command": "estimate",
        "data": data_path.name,
        "data_sha256": hashlib.sha256(data_path.read_bytes()).hexdigest(),
        "methods": ",".join(method_list),
        "estimands": ",".join(estimands),
        "seed": args.seed,
        "bootstrap_resamples": args.bootstrap_B,
    }
    items.update(_version_items())
    _write_manifest(out_dir, items)
    for line in (out_dir / "estimates_table.txt").read_text().splitlines():
        print(line)
    return 2 if any_failed else 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    items = {"command": "report", "seed": args.seed}
    if args.table:
        table = load_replication_table(args.table)
        if not table.rows:
            raise UsageError(f"replication table {args.table} is empty")
        items["table"] = Path(args.table).name
    else:
        if not args.design or not args.scenario:
            raise UsageError("report needs --table or --design/--scenario sweep settings")
        config = scenario_config(args.design, args.scenario, seed=args.seed, n=args.n)
        coeffs, coeff_path = _load_coefficients(args)
        method_list = args.methods.split(",")
        for m in method_list:
            if m not in METHOD_NAMES:
                raise UsageError(
                    f"unknown method {m!r}; choose from {','.join(METHOD_NAMES)}"
                )
        estimands = tuple(e.upper() for e in args.estimands.split(","))
        table = run_replications(
            config,
            coeffs,
            method_list,
            args.replications,
            workers=args.workers,
            estimands=estimands,
            options=_method_options(args),
        )
        save_replication_table(table, out_dir / "replications.csv")
        items.update(
            design=config.design,
            scenario=config.scenario,
            n=config.n,
            replications=args.replications,
            methods=",".join(method_list),
            coefficients_sha256=coefficients_hash(coeff_path),
        )
    summary = summarize(table)
    save_metric_summary(summary, out_dir / "metrics.csv")
    bias_boxplots(table, out_dir)
    excluded = table.failure_count()
    print(f"replications: {table.n_replications}, failed cells excluded: {excluded}")
    for row in summary.rows:
        print(
            f"{row.method} ate_{row.k}_{row.l} {row.estimand}: "
            f"MAB={row.mab:.5f} RMSE={row.rmse:.5f} MCSE={row.mcse:.5f} "
            f"(R={row.n_used}, failed={row.n_failed})"
        )
    _print_ordering_checks(table, summary)
    items.update(_version_items())
    _write_manifest(out_dir, items)
    return 0


def _print_ordering_checks(table, summary) -> None:
    """When the three reference pipelines ran, print the MAB ordering."""
    present = {r.method for r in table.rows}
    if not {"bart", "rams-mlr", "iptw-mlr"} <= present:
        return
    pairs = sorted({(r.k, r.l) for r in table.rows})
    estimand = table.rows[0].estimand
    for k, l in pairs:
        b = summary.get("bart", k, l, estimand).mab
        r = summary.get("rams-mlr", k, l, estimand).mab
        i = summary.get("iptw-mlr", k, l, estimand).mab
        verdict = "ok" if b < r < i else "violated"
        print(
            f"ordering ate_{k}_{l}: MAB bart {b:.5f} < rams-mlr {r:.5f} "
            f"< iptw-mlr {i:.5f} -> {verdict}"
        )
        if "iptw-mlr-trim" in present:
            t = summary.get("iptw-mlr-trim", k, l, estimand).mab
            trim_verdict = "ok" if t <= i else "violated"
            print(
                f"trimming ate_{k}_{l}: MAB iptw-mlr-trim {t:.5f} "
                f"<= iptw-mlr {i:.5f} -> {trim_verdict}"
            )


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


_INT_KEYS = {
    "seed", "n", "replications", "workers", "bootstrap_B",
    "bart_trees", "bart_iter", "bart_burn_in", "gbm_iter",
}

_REQUIRED = {
    "simulate": ("design", "scenario", "out"),
    "estimate": ("data", "out"),
    "report": ("out",),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="rarefx", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a scenario dataset with truth sidecar")
    sim.add_argument("--config", help="flat key=value config file; flags override it")
    sim.add_argument("--design", choices=["I", "II", "III"])
    sim.add_argument("--scenario")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--n", type=int, default=None, help="override scenario sample size")
    sim.add_argument("--coefficients", help="coefficient file (default: packaged)")
    sim.add_argument("--out")

    est = sub.add_parser("estimate", help="estimate pairwise effects on a dataset")
    est.add_argument("--config", help="flat key=value config file; flags override it")
    est.add_argument("--data")
    est.add_argument("--schema", help="schema file (default: schema.txt next to the data)")
    est.add_argument("--methods", default="bart")
    est.add_argument("--estimands", default="rd")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--bootstrap-B", dest="bootstrap_B", type=int, default=1000)
    est.add_argument("--trim", help="trim percentiles as lo/hi, e.g. 0.05/0.95")
    est.add_argument("--bart-trees", type=int)
    est.add_argument("--bart-iter", type=int)
    est.add_argument("--bart-burn-in", type=int)
    est.add_argument("--gbm-iter", type=int)
    est.add_argument("--out")

    rep = sub.add_parser("report", help="summarize a sweep into metrics and plots")
    rep.add_argument("--config", help="flat key=value config file; flags override it")
    rep.add_argument("--table", help="existing replications.csv to summarize")
    rep.add_argument("--design", choices=["I", "II", "III"])
    rep.add_argument("--scenario")
    rep.add_argument("--n", type=int, default=None)
    rep.add_argument("--replications", type=int, default=200)
    rep.add_argument("--methods", default="bart,rams-mlr,iptw-mlr")
    rep.add_argument("--estimands", default="rd")
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--workers", type=int, default=1)
    rep.add_argument("--coefficients")
    rep.add_argument("--trim")
    rep.add_argument("--bart-trees", type=int)
    rep.add_argument("--bart-iter", type=int)
    rep.add_argument("--bart-burn-in", type=int)
    rep.add_argument("--gbm-iter", type=int)
    rep.add_argument("--out")
    return parser


_HANDLERS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "report": cmd_report}


def _flag_not_given(key: str, argv) -> bool:
    flag = "--" + key.replace("_", "-")
    return flag not in argv


def main(argv=None) -> int:
    parser = build_parser()
    try:
        argv = list(sys.argv[1:] if argv is None else argv)
        args = parser.parse_args(argv)
        if args.config:
            for key, value in _parse_config_file(args.config).items():
                if key == "command":
                    continue
                if not hasattr(args, key):
                    raise UsageError(f"unknown config key {key!r} for {args.command}")
                if _flag_not_given(key, argv):
                    setattr(args, key, int(value) if key in _INT_KEYS else value)
        for key in _REQUIRED[args.command]:
            if getattr(args, key) is None:
                raise UsageError(f"--{key} is required for {args.command}")
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
