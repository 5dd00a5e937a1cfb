"""Config-driven experiment pipeline: replicated runs, aggregation, and exact oracles.

One replication draws a cohort, builds nuisances in the configured mode,
trims, computes each requested signal kind, and runs the kernel test, reusing
one Gram matrix across the signal kinds that share covariate rows.
Replications are seeded as base_seed + index so results are independent of
execution order and worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .dataset import Cohort, DGPConfig, generate_cohort
from .mmr import KernelSpec, TestResult, gram, run_test, standardize_columns
from .nuisance import (
    NuisanceSet,
    TrimConfig,
    fit_nuisances,
    fit_selection_propensity,
    misspecify,
    oracle_nuisances,
    trim_indices,
)
from .signals import (
    SignalKind,
    SignalVector,
    UNCENSORED_ONLY,
    cdr_batch,
    delta1_nuisances,
    dr_ytilde_batch,
    fit_outcome_regressors,
    ipcw_batch,
    ipw_ytilde_batch,
)

NUISANCE_MODES = ("fitted", "oracle", "miss_f", "miss_gp")


@dataclass(frozen=True)
class ExperimentConfig:
    dgp: DGPConfig
    signal_kinds: tuple = (SignalKind.CDR,)
    nuisance_mode: str = "fitted"
    trim: TrimConfig = field(default_factory=TrimConfig)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    bootstrap_b: int = 100
    alpha: float = 0.05
    replications: int = 40
    base_seed: int = 0
    cross_fit_folds: int = 0
    output_path: str | None = None
    label: str = "experiment"

    def __post_init__(self):
        kinds = tuple(SignalKind.parse(k) for k in self.signal_kinds)
        if not kinds:
            raise ValueError("signal_kinds must be nonempty")
        object.__setattr__(self, "signal_kinds", kinds)
        if self.nuisance_mode not in NUISANCE_MODES:
            raise ValueError(f"nuisance_mode must be one of {NUISANCE_MODES}")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.cross_fit_folds < 0 or self.cross_fit_folds == 1:
            raise ValueError("cross_fit_folds must be 0 (off) or >= 2")
        if self.cross_fit_folds and self.nuisance_mode != "fitted":
            raise ValueError("cross-fitting only applies to fitted nuisances")

    def to_json(self):
        return {
            "label": self.label,
            "dgp": self.dgp.to_json(),
            "signal_kinds": [k.value for k in self.signal_kinds],
            "nuisance_mode": self.nuisance_mode,
            "trim": {"lower": self.trim.lower, "upper": self.trim.upper},
            "kernel": self.kernel.to_json(),
            "bootstrap_b": self.bootstrap_b,
            "alpha": self.alpha,
            "replications": self.replications,
            "base_seed": self.base_seed,
            "cross_fit_folds": self.cross_fit_folds,
            "output_path": self.output_path,
        }

    @staticmethod
    def from_json(obj):
        trim_obj = obj.get("trim", {})
        kernel_obj = obj.get("kernel", {})
        return ExperimentConfig(
            dgp=DGPConfig.from_json(obj["dgp"]),
            signal_kinds=tuple(obj.get("signal_kinds", ["cdr"])),
            nuisance_mode=obj.get("nuisance_mode", "fitted"),
            trim=TrimConfig(trim_obj.get("lower", 0.05), trim_obj.get("upper", 0.95)),
            kernel=KernelSpec(
                kernel_obj.get("family", "gaussian_rbf"),
                kernel_obj.get("bandwidth", "median_heuristic"),
            ),
            bootstrap_b=obj.get("bootstrap_b", 100),
            alpha=obj.get("alpha", 0.05),
            replications=obj.get("replications", 40),
            base_seed=obj.get("base_seed", 0),
            cross_fit_folds=obj.get("cross_fit_folds", 0),
            output_path=obj.get("output_path"),
            label=obj.get("label", "experiment"),
        )

    def config_hash(self):
        payload = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def load_experiment_config(path):
    with open(path) as fh:
        return ExperimentConfig.from_json(json.load(fh))


@dataclass(frozen=True)
class FailureRecord:
    kind: SignalKind | None
    stage: str
    reason: str


def _kind_seed(seed, kind):
    idx = list(SignalKind).index(kind)
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


def _build_nuisances(config: ExperimentConfig, cohort: Cohort, latents=None):
    if config.nuisance_mode == "fitted":
        return fit_nuisances(cohort)
    oracle = oracle_nuisances(config.dgp)
    if config.nuisance_mode == "oracle":
        return oracle
    return misspecify(oracle, config.nuisance_mode, cohort, latents=latents)


def run_single(config: ExperimentConfig, replication_index: int):
    """One replication: map from signal kind to TestResult or FailureRecord."""
    seed = config.base_seed + replication_index
    kinds = config.signal_kinds
    try:
        cohort, latents = generate_cohort(config.dgp, seed)
        if config.cross_fit_folds:
            signals = _crossfit_signals(config, cohort, seed)
        else:
            nuisances = _build_nuisances(config, cohort, latents)
            kept = trim_indices(cohort, nuisances, config.trim)
            if kept.size == 0:
                raise ValueError("trimming removed every record")
            trimmed = Cohort([cohort.records[i] for i in kept], list(cohort.covariate_names))
            signals = _plain_signals(config, trimmed, nuisances)
    except Exception as exc:  # cohort- or nuisance-stage failure hits every kind
        failure = FailureRecord(None, "cohort/nuisance", f"{type(exc).__name__}: {exc}")
        return {kind: failure for kind in kinds}

    results = {}
    full_gram = None
    sub_gram = None
    for kind in kinds:
        entry = signals.get(kind)
        if isinstance(entry, FailureRecord):
            results[kind] = entry
            continue
        try:
            if kind in UNCENSORED_ONLY:
                if sub_gram is None:
                    sub_gram = gram(standardize_columns(entry.x_rows), config.kernel)
                pre = sub_gram
            else:
                if full_gram is None:
                    full_gram = gram(standardize_columns(entry.x_rows), config.kernel)
                pre = full_gram
            results[kind] = run_test(
                entry,
                config.kernel,
                B=config.bootstrap_b,
                alpha=config.alpha,
                seed=_kind_seed(seed, kind),
                precomputed=pre,
            )
        except Exception as exc:
            results[kind] = FailureRecord(kind, "test", f"{type(exc).__name__}: {exc}")
    return results


def _plain_signals(config: ExperimentConfig, trimmed: Cohort, nuisances: NuisanceSet):
    """Per-kind SignalVector (or FailureRecord) on one trimmed cohort."""
    kinds = config.signal_kinds
    X, a, s, y, delta = trimmed.arrays()
    out = {}
    regressors = None
    nuis1 = None
    regressors1 = None
    for kind in kinds:
        try:
            if kind is SignalKind.CDR:
                psi = cdr_batch(nuisances, X, a, s, y, delta)
            elif kind is SignalKind.IPCW:
                psi = ipcw_batch(nuisances, X, a, s, y, delta)
            elif kind is SignalKind.IPW_YTILDE:
                psi = ipw_ytilde_batch(nuisances, X, a, s, y)
            elif kind is SignalKind.DR_YTILDE:
                if regressors is None:
                    regressors = fit_outcome_regressors(trimmed)
                psi = dr_ytilde_batch(nuisances, regressors, X, a, s, y)
            else:  # uncensored-only kinds share refit scores and their own regressors
                rows = np.flatnonzero(delta == 1)
                if nuis1 is None:
                    nuis1 = delta1_nuisances(trimmed, nuisances)
                if kind is SignalKind.IPW_Y:
                    psi = ipw_ytilde_batch(nuis1, X[rows], a[rows], s[rows], y[rows])
                else:
                    if regressors1 is None:
                        regressors1 = fit_outcome_regressors(trimmed, subset=rows)
                    psi = dr_ytilde_batch(nuis1, regressors1, X[rows], a[rows], s[rows], y[rows])
                out[kind] = SignalVector(psi, X[rows], kind, rows)
                continue
            out[kind] = SignalVector(psi, X, kind, np.arange(len(trimmed)))
        except Exception as exc:
            out[kind] = FailureRecord(kind, "signal", f"{type(exc).__name__}: {exc}")
    return out


def _crossfit_signals(config: ExperimentConfig, cohort: Cohort, seed):
    """Fold-wise nuisances: fit on the complement, evaluate signals on the fold.

    Records are trimmed on their own fold's scores; per-kind signals from all
    folds are pooled into a single vector for one test.
    """
    K = config.cross_fit_folds
    X, a, s, y, delta = cohort.arrays()
    n = len(cohort)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    folds = rng.permutation(np.arange(n) % K)
    kinds = config.signal_kinds
    psi_parts = {kind: [] for kind in kinds}
    idx_parts = {kind: [] for kind in kinds}
    failed = {}
    for k in range(K):
        test_rows = np.flatnonzero(folds == k)
        train_rows = np.flatnonzero(folds != k)
        train = Cohort([cohort.records[i] for i in train_rows], list(cohort.covariate_names))
        nuisances = fit_nuisances(train)
        fold_cohort = Cohort([cohort.records[i] for i in test_rows], list(cohort.covariate_names))
        kept_local = trim_indices(fold_cohort, nuisances, config.trim)
        kept = test_rows[kept_local]
        if kept.size == 0:
            continue
        Xk, ak, sk, yk, dk = X[kept], a[kept], s[kept], y[kept], delta[kept]
        regressors = None
        nuis1 = None
        regressors1 = None
        for kind in kinds:
            if kind in failed:
                continue
            try:
                if kind is SignalKind.CDR:
                    psi = cdr_batch(nuisances, Xk, ak, sk, yk, dk)
                    rows = kept
                elif kind is SignalKind.IPCW:
                    psi = ipcw_batch(nuisances, Xk, ak, sk, yk, dk)
                    rows = kept
                elif kind is SignalKind.IPW_YTILDE:
                    psi = ipw_ytilde_batch(nuisances, Xk, ak, sk, yk)
                    rows = kept
                elif kind is SignalKind.DR_YTILDE:
                    if regressors is None:
                        regressors = fit_outcome_regressors(train)
                    psi = dr_ytilde_batch(nuisances, regressors, Xk, ak, sk, yk)
                    rows = kept
                else:
                    sub = np.flatnonzero(dk == 1)
                    if sub.size == 0:
                        continue
                    if nuis1 is None:
                        nuis1 = delta1_nuisances(train, nuisances)
                    if kind is SignalKind.IPW_Y:
                        psi = ipw_ytilde_batch(nuis1, Xk[sub], ak[sub], sk[sub], yk[sub])
                    else:
                        if regressors1 is None:
                            train_delta1 = np.flatnonzero(train.arrays()[4] == 1)
                            regressors1 = fit_outcome_regressors(train, subset=train_delta1)
                        psi = dr_ytilde_batch(nuis1, regressors1, Xk[sub], ak[sub], sk[sub], yk[sub])
                    rows = kept[sub]
                psi_parts[kind].append(psi)
                idx_parts[kind].append(rows)
            except Exception as exc:
                failed[kind] = FailureRecord(kind, "signal", f"{type(exc).__name__}: {exc}")
    out = {}
    for kind in kinds:
        if kind in failed:
            out[kind] = failed[kind]
            continue
        if not psi_parts[kind]:
            out[kind] = FailureRecord(kind, "signal", "no records survived cross-fitting")
            continue
        idx = np.concatenate(idx_parts[kind])
        order = np.argsort(idx)
        out[kind] = SignalVector(
            np.concatenate(psi_parts[kind])[order], X[idx[order]], kind, idx[order]
        )
    return out


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class RejectionRow:
    label: str
    kind: SignalKind
    replications: int  # successful replications the rate is computed over
    failures: int
    rejection_rate: float
    mean_p_value: float
    mean_statistic: float

    def to_json(self):
        return {
            "label": self.label,
            "kind": self.kind.value,
            "replications": self.replications,
            "failures": self.failures,
            "rejection_rate": self.rejection_rate,
            "mean_p_value": self.mean_p_value,
            "mean_statistic": self.mean_statistic,
        }


@dataclass(frozen=True)
class RejectionTable:
    rows: tuple
    alpha: float
    bootstrap_b: int
    base_seed: int
    config_hash: str
    failure_reasons: tuple = ()

    def rate(self, kind):
        kind = SignalKind.parse(kind)
        for row in self.rows:
            if row.kind is kind:
                return row.rejection_rate
        raise KeyError(kind)

    def to_json(self):
        return {
            "alpha": self.alpha,
            "bootstrap_b": self.bootstrap_b,
            "base_seed": self.base_seed,
            "config_hash": self.config_hash,
            "rows": [r.to_json() for r in self.rows],
            "failure_reasons": list(self.failure_reasons),
        }

    @staticmethod
    def from_json(obj):
        rows = tuple(
            RejectionRow(
                r["label"],
                SignalKind(r["kind"]),
                r["replications"],
                r["failures"],
                r["rejection_rate"],
                r["mean_p_value"],
                r["mean_statistic"],
            )
            for r in obj["rows"]
        )
        return RejectionTable(
            rows,
            obj["alpha"],
            obj["bootstrap_b"],
            obj["base_seed"],
            obj["config_hash"],
            tuple(obj.get("failure_reasons", ())),
        )


class ReplicationFailureThreshold(RuntimeError):
    pass


def _run_single_star(args):
    return run_single(*args)


def run_replications(config: ExperimentConfig, *, jobs: int = 1, progress=None):
    """Execute all replications and aggregate per-kind rejection rates.

    Failed replications are excluded from the rates and carried in the
    table's failure_reasons; more than 20% failures for any kind aborts.
    """
    tasks = [(config, i) for i in range(config.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            all_results = list(pool.map(_run_single_star, tasks, chunksize=1))
    else:
        all_results = []
        for t in tasks:
            all_results.append(_run_single_star(t))
            if progress:
                progress(len(all_results), len(tasks))

    rows = []
    reasons = []
    for kind in config.signal_kinds:
        oks = [r[kind] for r in all_results if isinstance(r[kind], TestResult)]
        fails = [r[kind] for r in all_results if isinstance(r[kind], FailureRecord)]
        reasons.extend(f"rep kind={kind.value} stage={f.stage}: {f.reason}" for f in fails)
        if len(fails) > 0.2 * config.replications:
            raise ReplicationFailureThreshold(
                f"{len(fails)}/{config.replications} replications failed for "
                f"kind={kind.value}; first reason: {fails[0].reason}"
            )
        n_ok = len(oks)
        rows.append(
            RejectionRow(
                label=config.label,
                kind=kind,
                replications=n_ok,
                failures=len(fails),
                rejection_rate=(sum(r.reject for r in oks) / n_ok) if n_ok else float("nan"),
                mean_p_value=(sum(r.p_value for r in oks) / n_ok) if n_ok else float("nan"),
                mean_statistic=(sum(r.statistic for r in oks) / n_ok) if n_ok else float("nan"),
            )
        )
    return RejectionTable(
        tuple(rows),
        config.alpha,
        config.bootstrap_b,
        config.base_seed,
        config.config_hash(),
        tuple(reasons),
    )


CSV_COLUMNS = (
    "label",
    "kind",
    "replications",
    "failures",
    "rejection_rate",
    "mean_p_value",
    "mean_statistic",
    "alpha",
    "bootstrap_b",
    "base_seed",
    "config_hash",
)


def emit_report(table: RejectionTable, format: str, path):
    """Write the rejection table as CSV or JSON with a stable column order."""
    if format == "json":
        with open(path, "w") as fh:
            json.dump(table.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in table.rows:
            writer.writerow(
                [
                    row.label,
                    row.kind.value,
                    row.replications,
                    row.failures,
                    f"{row.rejection_rate:.17g}",
                    f"{row.mean_p_value:.17g}",
                    f"{row.mean_statistic:.17g}",
                    f"{table.alpha:.17g}",
                    table.bootstrap_b,
                    table.base_seed,
                    table.config_hash,
                ]
            )


# ---------------------------------------------------------------------------
# exact discrete-world oracle check


@dataclass(frozen=True)
class Prop2Report:
    draws: int
    ipw_stratum_means: dict
    ipw_stratum_targets: dict
    ipw_mean: float
    ipw_se: float
    ipw_target: float
    cdr_mean: float
    cdr_se: float
    cdr_target: float
    tolerances: dict
    passes: dict

    @property
    def all_pass(self):
        return all(self.passes.values())

    def to_json(self):
        return {
            "draws": self.draws,
            "ipw_stratum_means": {f"s{s}a{a}": v for (s, a), v in self.ipw_stratum_means.items()},
            "ipw_stratum_targets": {f"s{s}a{a}": v for (s, a), v in self.ipw_stratum_targets.items()},
            "ipw_mean": self.ipw_mean,
            "ipw_se": self.ipw_se,
            "ipw_target": self.ipw_target,
            "cdr_mean": self.cdr_mean,
            "cdr_se": self.cdr_se,
            "cdr_target": self.cdr_target,
            "tolerances": self.tolerances,
            "passes": self.passes,
            "all_pass": self.all_pass,
        }

    def format_lines(self):
        lines = [f"discrete-world oracle check, {self.draws} draws"]
        for key, target in self.ipw_stratum_targets.items():
            got = self.ipw_stratum_means[key]
            ok = self.passes[f"ipw_stratum_s{key[0]}a{key[1]}"]
            lines.append(
                f"  observed-time stratum mean (s={key[0]},a={key[1]}): "
                f"{got:+.4f} vs {target:+.4f} [{'pass' if ok else 'FAIL'}]"
            )
        lines.append(
            f"  ipw_ytilde mean: {self.ipw_mean:+.5f} vs {self.ipw_target:+.5f} "
            f"(se {self.ipw_se:.5f}) [{'pass' if self.passes['ipw_mean'] else 'FAIL'}]"
        )
        lines.append(
            f"  cdr mean:        {self.cdr_mean:+.5f} vs {self.cdr_target:+.5f} "
            f"(se {self.cdr_se:.5f}) [{'pass' if self.passes['cdr_mean'] else 'FAIL'}]"
        )
        lines.append(f"  overall: {'pass' if self.all_pass else 'FAIL'}")
        return lines


def _censor_by_threshold(y):
    return np.where(y < 3.5, 10.0, 0.5)


def prop2_oracle_check(draws: int, seed: int = 0):
    """Monte Carlo means of the observed-time and censoring-augmented signals
    in the two discrete counterexample worlds, against their exact targets.

    World one has point-free five-point outcome laws per stratum and a
    threshold censoring rule shared across studies; world two degenerates the
    outcome laws so the augmented signal's bias is exactly -2.
    """
    from .nuisance import ConstantScore
    from .survival import CoxModel, StepBaseline

    if draws < 10**5:
        raise ValueError("use at least 1e5 draws for the oracle check")
    rng = np.random.default_rng(seed)
    n = int(draws)
    s = (rng.uniform(size=n) < 0.5).astype(int)
    a = (rng.uniform(size=n) < 0.5).astype(int)
    X = np.ones((n, 1))
    scores = {0: ConstantScore(0.5), 1: ConstantScore(0.5)}

    # world one: five-point outcome laws
    supports = {
        (0, 0): ([1, 2, 3, 4, 5], [0.2] * 5),
        (0, 1): ([2, 3, 4, 5, 6], [0.2] * 5),
        (1, 0): ([2, 3, 4], [1 / 3] * 3),
        (1, 1): ([2, 4, 5], [1 / 6, 1 / 2, 1 / 3]),
    }
    y = np.empty(n)
    for (s_val, a_val), (vals, probs) in supports.items():
        rows = (s == s_val) & (a == a_val)
        y[rows] = rng.choice(vals, size=int(rows.sum()), p=probs)
    c = _censor_by_threshold(y)
    y_tilde = np.minimum(y, c)
    nuis = NuisanceSet(ConstantScore(0.5), scores, None, None, provenance="oracle")
    psi_ipw = ipw_ytilde_batch(nuis, X, a, s, y_tilde)
    ipw_mean = float(psi_ipw.mean())
    ipw_se = float(psi_ipw.std(ddof=1) / np.sqrt(n))
    stratum_means = {}
    for s_val, a_val in supports:
        rows = (s == s_val) & (a == a_val)
        stratum_means[(s_val, a_val)] = float(y_tilde[rows].mean())
    stratum_targets = {(0, 0): 7 / 5, (0, 1): 13 / 10, (1, 0): 11 / 6, (1, 1): 3 / 4}

    # world two: degenerate outcome laws; censoring rule unchanged
    y2 = np.zeros(n)
    y2[(s == 0) & (a == 1)] = 2.0
    rows11 = (s == 1) & (a == 1)
    y2[rows11] = np.where(rng.uniform(size=int(rows11.sum())) < 0.5, 0.0, 4.0)
    c2 = _censor_by_threshold(y2)
    delta2 = (y2 <= c2).astype(int)
    y2_tilde = np.minimum(y2, c2)

    point = lambda t: CoxModel(StepBaseline(np.asarray([t]), np.asarray([0.0])), np.zeros(1))
    f_bar = {
        (0, 0): point(0.0),
        (0, 1): point(2.0),
        (1, 0): point(0.0),
        (1, 1): CoxModel(StepBaseline(np.asarray([0.0, 4.0]), np.asarray([0.5, 0.0])), np.zeros(1)),
    }
    g_point = point(10.0)
    g_bar = {
        (0, 0): g_point,
        (0, 1): g_point,
        (1, 0): g_point,
        (1, 1): CoxModel(StepBaseline(np.asarray([0.5, 10.0]), np.asarray([0.5, 0.0])), np.zeros(1)),
    }
    nuis2 = NuisanceSet(ConstantScore(0.5), scores, f_bar, g_bar, provenance="oracle")
    psi_cdr = cdr_batch(nuis2, X, a, s, y2_tilde, delta2)
    cdr_mean = float(psi_cdr.mean())
    cdr_se = float(psi_cdr.std(ddof=1) / np.sqrt(n))

    tol = {"ipw_stratum": 0.01, "ipw_mean": 0.01, "cdr_mean": 0.02}
    passes = {
        f"ipw_stratum_s{s_val}a{a_val}": abs(stratum_means[(s_val, a_val)] - stratum_targets[(s_val, a_val)])
        <= tol["ipw_stratum"]
        for s_val, a_val in stratum_targets
    }
    passes["ipw_mean"] = abs(ipw_mean - (-59 / 60)) <= tol["ipw_mean"]
    passes["cdr_mean"] = abs(cdr_mean - (-2.0)) <= tol["cdr_mean"]
    return Prop2Report(
        draws=n,
        ipw_stratum_means=stratum_means,
        ipw_stratum_targets=stratum_targets,
        ipw_mean=ipw_mean,
        ipw_se=ipw_se,
        ipw_target=-59 / 60,
        cdr_mean=cdr_mean,
        cdr_se=cdr_se,
        cdr_target=-2.0,
        tolerances=tol,
        passes=passes,
    )
