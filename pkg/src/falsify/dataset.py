"""Cohort data model, CSV persistence, and the synthetic data-generating processes.

A cohort pools a trial stratum (s=0) and an observational stratum (s=1).
Subjects carry covariates, a binary treatment, the observed follow-up time
(minimum of event and censoring time) and an event indicator.  Generators
draw covariates as independent Gaussians plus optional Bernoulli columns,
assign treatment from a per-study propensity, and draw event and censoring
times by exact inverse-transform sampling from Weibull-baseline
proportional-hazards models.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .survival import CoxModel, WeibullBaseline, sample_event_time

OUTCOME_COLUMNS = ("A", "S", "Y_OBS", "DELTA")


@dataclass
class SubjectRecord:
    """One observed unit: covariates, treatment, study, follow-up time, event flag."""

    x: np.ndarray
    a: int
    s: int
    y_obs: float
    delta: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.y_obs < 0:
            raise ValueError("y_obs must be nonnegative")
        for name, v in (("a", self.a), ("s", self.s), ("delta", self.delta)):
            if v not in (0, 1):
                raise ValueError(f"{name} must be 0 or 1, got {v!r}")


@dataclass
class LatentRecord:
    """One unit before observation: true event time y and censoring time c."""

    x: np.ndarray
    a: int
    s: int
    y: float
    c: float

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)


def observe(latent: LatentRecord, conceal=()) -> SubjectRecord:
    """Collapse a latent record to what is observed: min(y, c) and the event flag."""
    x = latent.x
    if len(conceal):
        x = np.delete(x, list(conceal))
    return SubjectRecord(
        x=x,
        a=latent.a,
        s=latent.s,
        y_obs=min(latent.y, latent.c),
        delta=1 if latent.y <= latent.c else 0,
    )


@dataclass
class Cohort:
    records: list
    covariate_names: list

    def __len__(self):
        return len(self.records)

    def arrays(self):
        """(X, a, s, y_obs, delta) as numpy arrays."""
        X = np.asarray([r.x for r in self.records], dtype=float)
        a = np.asarray([r.a for r in self.records], dtype=int)
        s = np.asarray([r.s for r in self.records], dtype=int)
        y = np.asarray([r.y_obs for r in self.records], dtype=float)
        d = np.asarray([r.delta for r in self.records], dtype=int)
        return X, a, s, y, d

    def covariate_matrix(self):
        return np.asarray([r.x for r in self.records], dtype=float)

    def study_sizes(self):
        s = np.asarray([r.s for r in self.records])
        return int(np.sum(s == 0)), int(np.sum(s == 1))


# ---------------------------------------------------------------------------
# generator configuration


@dataclass(frozen=True)
class CovariateGroupSpec:
    """Independent Gaussian columns plus independent Bernoulli columns."""

    normal_means: np.ndarray
    normal_vars: np.ndarray
    bernoulli_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("normal_means", "normal_vars", "bernoulli_rates"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.normal_means.shape != self.normal_vars.shape:
            raise ValueError("normal means and variances must have equal length")
        if np.any(self.normal_vars <= 0):
            raise ValueError("normal variances must be positive")
        if np.any((self.bernoulli_rates <= 0) | (self.bernoulli_rates >= 1)):
            raise ValueError("bernoulli rates must lie in (0, 1)")


@dataclass(frozen=True)
class PropensitySpec:
    """P(A=1 | x): a constant, or sigmoid(x . beta + offset)."""

    kind: str
    p: float = 0.5
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if self.kind not in ("constant", "sigmoid"):
            raise ValueError(f"unknown propensity kind {self.kind!r}")
        if self.kind == "constant" and not 0 < self.p < 1:
            raise ValueError("constant propensity must lie in (0, 1)")
        if not math.isfinite(self.offset):
            raise ValueError("propensity offset must be finite")

    def probabilities(self, X):
        if self.kind == "constant":
            return np.full(X.shape[0], self.p)
        z = X @ self.beta + self.offset
        return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class CoxSpec:
    """Weibull-baseline proportional-hazards law: survival exp(-(lam t)^p)^(exp(x.beta))."""

    lam: float
    p: float
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if not (self.lam > 0 and self.p > 0):
            raise ValueError("Cox spec requires lam > 0 and p > 0")

    def model(self):
        return CoxModel(WeibullBaseline(self.lam, self.p), self.beta)


@dataclass(frozen=True)
class CensorRule:
    """Sub-threshold censoring-time rule for global censoring.

    uniform_fraction: c = u * tau with u ~ Uniform(lo, hi);
    fixed_fraction:   c = frac * tau deterministically.
    """

    kind: str = "uniform_fraction"
    lo: float = 0.25
    hi: float = 0.75
    frac: float = 0.5

    def __post_init__(self):
        if self.kind not in ("uniform_fraction", "fixed_fraction"):
            raise ValueError(f"unknown censor rule {self.kind!r}")
        if self.kind == "uniform_fraction" and not 0 <= self.lo < self.hi < 1:
            raise ValueError("uniform_fraction requires 0 <= lo < hi < 1")
        if self.kind == "fixed_fraction" and not 0 < self.frac < 1:
            raise ValueError("fixed_fraction requires frac in (0, 1)")

    def draw(self, tau, size, rng):
        if self.kind == "uniform_fraction":
            return tau * rng.uniform(self.lo, self.hi, size=size)
        return np.full(size, self.frac * tau)


@dataclass(frozen=True)
class GlobalCensoringSpec:
    tau: float
    rule: CensorRule = field(default_factory=CensorRule)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class DGPConfig:
    """Full recipe for one paired trial/observational cohort."""

    covariates: dict  # study -> CovariateGroupSpec
    propensity: dict  # study -> PropensitySpec
    event_time: dict  # (study, arm) -> CoxSpec
    censoring_time: dict  # (study, arm) -> CoxSpec or None (no censoring)
    n_rct: int
    n_os: int
    intercept: bool = True
    concealed: tuple = ()
    global_censoring: GlobalCensoringSpec | None = None
    selection_bias_f: float = 0.0
    covariate_names: tuple = ()

    def __post_init__(self):
        if not (self.n_rct > 0 and self.n_os > 0):
            raise ValueError("both study sizes must be positive")
        if not 0 <= self.selection_bias_f < 1:
            raise ValueError("selection-bias fraction must lie in [0, 1)")
        for s in (0, 1):
            if s not in self.covariates or s not in self.propensity:
                raise ValueError(f"missing covariate or propensity spec for study {s}")
        for key in ((0, 0), (0, 1), (1, 0), (1, 1)):
            if key not in self.event_time:
                raise ValueError(f"missing event-time spec for stratum {key}")
            if key not in self.censoring_time:
                raise ValueError(f"missing censoring-time spec for stratum {key}")
        d = self.covariate_dim()
        for key, spec in list(self.event_time.items()) + list(self.censoring_time.items()):
            if spec is not None and spec.beta.size != d:
                raise ValueError(f"beta dimension mismatch in Cox spec for stratum {key}")
        names = self.covariate_names or tuple(self.default_names())
        if len(names) != d:
            raise ValueError("covariate_names length must match covariate dimension")
        object.__setattr__(self, "covariate_names", tuple(names))
        object.__setattr__(self, "concealed", tuple(self.concealed))
        if any(not 0 <= i < d for i in self.concealed):
            raise ValueError("concealed index out of range")

    def covariate_dim(self):
        spec = self.covariates[0]
        return int(self.intercept) + spec.normal_means.size + spec.bernoulli_rates.size

    def default_names(self):
        spec = self.covariates[0]
        names = ["intercept"] if self.intercept else []
        names += [f"x{i + 1}" for i in range(spec.normal_means.size)]
        names += [f"b{i + 1}" for i in range(spec.bernoulli_rates.size)]
        return names

    def observed_names(self):
        return [n for i, n in enumerate(self.covariate_names) if i not in self.concealed]

    def to_json(self):
        def cox(spec):
            if spec is None:
                return None
            return {"lam": spec.lam, "p": spec.p, "beta": spec.beta.tolist()}

        def prop(spec):
            out = {"kind": spec.kind}
            if spec.kind == "constant":
                out["p"] = spec.p
            else:
                out["beta"] = spec.beta.tolist()
                out["offset"] = spec.offset
            return out

        def cov(spec):
            return {
                "normal_means": spec.normal_means.tolist(),
                "normal_vars": spec.normal_vars.tolist(),
                "bernoulli_rates": spec.bernoulli_rates.tolist(),
            }

        gc = None
        if self.global_censoring is not None:
            rule = self.global_censoring.rule
            gc = {
                "tau": self.global_censoring.tau,
                "rule": {"kind": rule.kind, "lo": rule.lo, "hi": rule.hi, "frac": rule.frac},
            }
        study = {0: "rct", 1: "os"}
        arm = {0: "a0", 1: "a1"}
        return {
            "intercept": self.intercept,
            "covariates": {study[s]: cov(self.covariates[s]) for s in (0, 1)},
            "propensity": {study[s]: prop(self.propensity[s]) for s in (0, 1)},
            "event_time": {study[s]: {arm[a]: cox(self.event_time[(s, a)]) for a in (0, 1)} for s in (0, 1)},
            "censoring_time": {
                study[s]: {arm[a]: cox(self.censoring_time[(s, a)]) for a in (0, 1)} for s in (0, 1)
            },
            "concealed": list(self.concealed),
            "global_censoring": gc,
            "selection_bias_f": self.selection_bias_f,
            "n_rct": self.n_rct,
            "n_os": self.n_os,
            "covariate_names": list(self.covariate_names),
        }

    @staticmethod
    def from_json(obj):
        def cox(o):
            return None if o is None else CoxSpec(o["lam"], o["p"], np.asarray(o["beta"]))

        def prop(o):
            if o["kind"] == "constant":
                return PropensitySpec("constant", p=o["p"])
            return PropensitySpec("sigmoid", beta=np.asarray(o["beta"]), offset=o.get("offset", 0.0))

        def cov(o):
            return CovariateGroupSpec(
                np.asarray(o["normal_means"]),
                np.asarray(o["normal_vars"]),
                np.asarray(o.get("bernoulli_rates", [])),
            )

        gc = None
        if obj.get("global_censoring"):
            r = obj["global_censoring"].get("rule", {})
            gc = GlobalCensoringSpec(
                obj["global_censoring"]["tau"],
                CensorRule(
                    r.get("kind", "uniform_fraction"),
                    r.get("lo", 0.25),
                    r.get("hi", 0.75),
                    r.get("frac", 0.5),
                ),
            )
        study = {"rct": 0, "os": 1}
        arm = {"a0": 0, "a1": 1}
        return DGPConfig(
            covariates={study[k]: cov(v) for k, v in obj["covariates"].items()},
            propensity={study[k]: prop(v) for k, v in obj["propensity"].items()},
            event_time={
                (study[sk], arm[ak]): cox(av)
                for sk, sv in obj["event_time"].items()
                for ak, av in sv.items()
            },
            censoring_time={
                (study[sk], arm[ak]): cox(av)
                for sk, sv in obj["censoring_time"].items()
                for ak, av in sv.items()
            },
            n_rct=obj["n_rct"],
            n_os=obj["n_os"],
            intercept=obj.get("intercept", True),
            concealed=tuple(obj.get("concealed", [])),
            global_censoring=gc,
            selection_bias_f=obj.get("selection_bias_f", 0.0),
            covariate_names=tuple(obj.get("covariate_names", ())),
        )


def load_dgp_config(path):
    with open(path) as fh:
        obj = json.load(fh)
    if "dgp" in obj:  # allow passing a full experiment config
        obj = obj["dgp"]
    return DGPConfig.from_json(obj)


# ---------------------------------------------------------------------------
# generation


def _draw_covariates(spec: CovariateGroupSpec, n, intercept, rng):
    cols = []
    if intercept:
        cols.append(np.ones((n, 1)))
    if spec.normal_means.size:
        z = rng.standard_normal((n, spec.normal_means.size))
        cols.append(spec.normal_means[None, :] + np.sqrt(spec.normal_vars)[None, :] * z)
    if spec.bernoulli_rates.size:
        cols.append((rng.uniform(size=(n, spec.bernoulli_rates.size)) < spec.bernoulli_rates[None, :]).astype(float))
    return np.hstack(cols)


def generate_cohort(config: DGPConfig, seed):
    """Draw a paired cohort; returns (observed Cohort, latent records).

    Covariates, treatment, event and censoring times are drawn per study; the
    observed cohort has concealed columns removed and selection bias applied,
    while latent records keep the full covariate vector and both times.
    """
    rng = np.random.default_rng(seed)
    latents = []
    for s, n in ((0, config.n_rct), (1, config.n_os)):
        X = _draw_covariates(config.covariates[s], n, config.intercept, rng)
        p_a = config.propensity[s].probabilities(X)
        a = (rng.uniform(size=n) < p_a).astype(int)
        y = np.empty(n)
        c = np.empty(n)
        for arm in (0, 1):
            rows = np.flatnonzero(a == arm)
            if rows.size == 0:
                continue
            ev = config.event_time[(s, arm)].model()
            u = rng.uniform(size=rows.size)
            y[rows] = sample_event_time(ev, X[rows], u)
            cen_spec = config.censoring_time[(s, arm)]
            if cen_spec is None:
                c[rows] = np.inf
            else:
                u = rng.uniform(size=rows.size)
                c[rows] = sample_event_time(cen_spec.model(), X[rows], u)
        latents.extend(
            LatentRecord(X[i], int(a[i]), s, float(y[i]), float(c[i])) for i in range(n)
        )
    cohort = Cohort(
        [observe(l, config.concealed) for l in latents], list(config.observed_names())
    )
    if config.global_censoring is not None:
        gc = config.global_censoring
        cohort = apply_global_censoring(
            latents,
            gc.tau,
            gc.rule,
            rng.integers(2**32),
            conceal=config.concealed,
            covariate_names=config.observed_names(),
        )
    if config.selection_bias_f > 0:
        cohort = apply_selection_bias(cohort, config.selection_bias_f, rng.integers(2**32))
    return cohort, latents


def apply_global_censoring(latents, tau, rule: CensorRule, seed, *, conceal=(), covariate_names=None):
    """Censor every subject whose event time exceeds tau.

    Subjects with y <= tau get censoring time tau + 1 (never censors); the
    rest get a censoring time below tau drawn by `rule`, which depends only on
    tau so the mechanism is identical in both studies.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    rng = np.random.default_rng(seed)
    y = np.asarray([l.y for l in latents])
    over = y > tau
    c = np.full(len(latents), tau + 1.0)
    c[over] = rule.draw(tau, int(over.sum()), rng)
    if np.any(c[over] >= tau):
        raise RuntimeError("censoring rule produced a value at or above tau")
    recs = [
        observe(replace(l, c=float(ci)), conceal)
        for l, ci in zip(latents, c)
    ]
    if covariate_names is None:
        d = recs[0].x.size if recs else 0
        covariate_names = [f"x{i + 1}" for i in range(d)]
    return Cohort(recs, list(covariate_names))


def apply_selection_bias(cohort: Cohort, f, seed):
    """Drop floor(f * m) of the m control-arm trial records that had an event."""
    if not 0 <= f < 1:
        raise ValueError("f must lie in [0, 1)")
    if f == 0:
        return cohort
    rng = np.random.default_rng(seed)
    eligible = [
        i for i, r in enumerate(cohort.records) if r.s == 0 and r.a == 0 and r.delta == 1
    ]
    k = int(math.floor(f * len(eligible)))
    if k == 0:
        return Cohort(list(cohort.records), list(cohort.covariate_names))
    drop = set(rng.choice(eligible, size=k, replace=False).tolist())
    kept = [r for i, r in enumerate(cohort.records) if i not in drop]
    return Cohort(kept, list(cohort.covariate_names))


# ---------------------------------------------------------------------------
# CSV persistence


class CohortFormatError(ValueError):
    pass


def save_csv(cohort: Cohort, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(cohort.covariate_names) + list(OUTCOME_COLUMNS))
        for r in cohort.records:
            writer.writerow(
                [f"{v:.17g}" for v in r.x] + [r.a, r.s, f"{r.y_obs:.17g}", r.delta]
            )


def load_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError("empty file") from None
        if len(header) < 5 or tuple(header[-4:]) != OUTCOME_COLUMNS:
            raise CohortFormatError(
                f"header must end with {','.join(OUTCOME_COLUMNS)}; got {header!r}"
            )
        names = header[:-4]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CohortFormatError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                x = np.asarray([float(v) for v in row[: len(names)]])
                a, s = int(row[-4]), int(row[-3])
                y_obs = float(row[-2])
                delta = int(row[-1])
            except ValueError as exc:
                raise CohortFormatError(f"row {lineno}: {exc}") from None
            for col, v in (("A", a), ("S", s), ("DELTA", delta)):
                if v not in (0, 1):
                    raise CohortFormatError(f"row {lineno}: {col} must be 0 or 1, got {v}")
            if y_obs < 0:
                raise CohortFormatError(f"row {lineno}: Y_OBS must be nonnegative")
            records.append(SubjectRecord(x, a, s, y_obs, delta))
    return Cohort(records, names)
