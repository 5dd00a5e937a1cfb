"""Command-line interface.

Exit codes: 0 on success, 2 on configuration/usage errors, 3 when the
replication-failure threshold aborts a run.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np

from . import harness, presets
from .dataset import generate_cohort, load_csv, load_dgp_config, save_csv
from .mmr import KernelSpec, build_witness, run_test
from .nuisance import TrimConfig, fit_nuisances, trim
from .signals import SignalKind, compute_signals


def _load_experiment(config_path, preset):
    if (config_path is None) == (preset is None):
        raise click.UsageError("provide exactly one of --config or --preset")
    try:
        if preset is not None:
            return presets.get_preset(preset)
        return harness.load_experiment_config(config_path)
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"bad configuration: {exc}") from None


@click.group()
def main():
    """Falsification tests for observational studies under right-censoring."""


@main.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--preset", default=None, help="bundled configuration name (see `falsify presets`)")
@click.option("--jobs", default=1, show_default=True, help="parallel replication workers")
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--replications", default=None, type=int, help="override the configured count")
def run_cmd(config_path, preset, jobs, out_path, fmt, replications):
    """Run replicated experiments and report rejection rates."""
    config = _load_experiment(config_path, preset)
    if replications is not None:
        from dataclasses import replace

        config = replace(config, replications=replications)
    try:
        table = harness.run_replications(
            config,
            jobs=jobs,
            progress=lambda done, total: click.echo(f"\r{done}/{total} replications", nl=False, err=True),
        )
    except harness.ReplicationFailureThreshold as exc:
        click.echo(f"\naborted: {exc}", err=True)
        sys.exit(3)
    click.echo("", err=True)
    for row in table.rows:
        click.echo(
            f"{row.label:24s} {row.kind.value:11s} reject={row.rejection_rate:6.3f} "
            f"mean_p={row.mean_p_value:6.3f} reps={row.replications} failures={row.failures}"
        )
    out = out_path or config.output_path
    if out:
        harness.emit_report(table, fmt, out)
        click.echo(f"wrote {out}")


@main.command("presets")
@click.option("--name", default=None, help="dump this preset's JSON config")
def presets_cmd(name):
    """List bundled configurations, or dump one as JSON."""
    if name is None:
        for n in presets.preset_names():
            click.echo(n)
        return
    try:
        config = presets.get_preset(name)
    except KeyError as exc:
        raise click.UsageError(str(exc)) from None
    click.echo(json.dumps(config.to_json(), indent=2, sort_keys=True))


@main.command("oracle-prop2")
@click.option("--draws", default=1_000_000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def oracle_prop2_cmd(draws, seed):
    """Check the exact discrete-world oracle means."""
    try:
        report = harness.prop2_oracle_check(draws, seed)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    for line in report.format_lines():
        click.echo(line)
    if not report.all_pass:
        sys.exit(3)


@main.command("simulate")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
def simulate_cmd(config_path, out_path, seed):
    """Draw one cohort from a generator config and write it as CSV."""
    try:
        dgp = load_dgp_config(config_path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"bad generator config: {exc}") from None
    cohort, _ = generate_cohort(dgp, seed)
    save_csv(cohort, out_path)
    n0, n1 = cohort.study_sizes()
    click.echo(f"wrote {out_path}: {len(cohort)} records (trial {n0}, observational {n1})")


@main.command("test")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), required=True)
@click.option("--signal", default="cdr", show_default=True)
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--bootstrap", "bootstrap_b", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--bandwidth", default=None, type=float, help="RBF bandwidth (default: median heuristic)")
@click.option("--trim-lower", default=0.05, show_default=True)
@click.option("--trim-upper", default=0.95, show_default=True)
def test_cmd(cohort_path, signal, alpha, bootstrap_b, seed, bandwidth, trim_lower, trim_upper):
    """Fit nuisances on a cohort CSV and run one falsification test."""
    try:
        kind = SignalKind.parse(signal)
        trim_config = TrimConfig(trim_lower, trim_upper)
        cohort = load_csv(cohort_path)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    try:
        nuisances = fit_nuisances(cohort)
        trimmed = trim(cohort, nuisances, trim_config)
        vector = compute_signals(trimmed, nuisances, kind)
        kernel = KernelSpec(bandwidth=bandwidth if bandwidth else "median_heuristic")
        result = run_test(vector, kernel, B=bootstrap_b, alpha=alpha, seed=seed)
    except Exception as exc:
        click.echo(f"test failed: {type(exc).__name__}: {exc}", err=True)
        sys.exit(3)
    click.echo(result.dumps())


@main.command("witness")
@click.option("--cohort", "cohort_path", type=click.Path(exists=True), required=True)
@click.option("--signal", default="cdr", show_default=True)
@click.option("--grid", default=None, help="dim=<col>[:lo=<..>][:hi=<..>][:num=<..>]")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--unnormalized", is_flag=True, default=False)
def witness_cmd(cohort_path, signal, grid, out_path, seed, unnormalized):
    """Evaluate the witness function along one covariate and dump it as CSV."""
    import csv as _csv

    try:
        kind = SignalKind.parse(signal)
        cohort = load_csv(cohort_path)
        spec = _parse_grid(grid, cohort.covariate_names)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None
    try:
        nuisances = fit_nuisances(cohort)
        trimmed = trim(cohort, nuisances)
        vector = compute_signals(trimmed, nuisances, kind)
        evaluator = build_witness(vector, normalize=not unnormalized, seed=seed)
    except Exception as exc:
        click.echo(f"witness construction failed: {type(exc).__name__}: {exc}", err=True)
        sys.exit(3)
    dim, lo, hi, num = spec
    X = vector.x_rows
    lo = X[:, dim].min() if lo is None else lo
    hi = X[:, dim].max() if hi is None else hi
    grid_vals = np.linspace(lo, hi, num)
    base = X.mean(axis=0)
    queries = np.tile(base, (num, 1))
    queries[:, dim] = grid_vals
    values = evaluator.evaluate(queries)
    with open(out_path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([cohort.covariate_names[dim], "witness"])
        for g, v in zip(grid_vals, values):
            writer.writerow([f"{g:.17g}", f"{v:.17g}"])
    click.echo(f"wrote {out_path}: {num} grid points over {cohort.covariate_names[dim]}")


def _parse_grid(grid, names):
    if grid is None:
        raise ValueError("--grid is required, e.g. dim=x9:num=101")
    parts = dict(p.split("=", 1) for p in grid.split(":"))
    if "dim" not in parts:
        raise ValueError("grid spec needs dim=<covariate name or index>")
    raw = parts["dim"]
    if raw in names:
        dim = names.index(raw)
    else:
        try:
            dim = int(raw)
        except ValueError:
            raise ValueError(f"unknown covariate {raw!r}") from None
        if not 0 <= dim < len(names):
            raise ValueError(f"covariate index {dim} out of range")
    lo = float(parts["lo"]) if "lo" in parts else None
    hi = float(parts["hi"]) if "hi" in parts else None
    num = int(parts.get("num", 101))
    if num < 2:
        raise ValueError("grid needs at least 2 points")
    return dim, lo, hi, num


if __name__ == "__main__":
    main()
