"""Selection scores, propensity scores, and the assembled nuisance bundle.

A `NuisanceSet` collects everything the instance-wise signals need: the
study-membership score P(S=1|x), one treatment-propensity model per study,
and one conditional survival model per (study, arm) stratum for the event
time and for the censoring time.  Bundles are either fitted (logistic
regression + proportional-hazards partial likelihood), taken as oracles from
a generator config, or deliberately misspecified for robustness checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

import numpy as np
from scipy.stats import norm

from .dataset import Cohort, DGPConfig
from .survival import ConvergenceError, CoxModel, UniformBaseline, fit_cox

STRATA = ((0, 0), (0, 1), (1, 0), (1, 1))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class LogisticModel:
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.beta.size:
            raise ValueError("covariate dimension does not match logistic coefficients")
        return _sigmoid(X @ self.beta)

    def to_json(self):
        return {"kind": "logistic", "beta": self.beta.tolist()}


@dataclass(frozen=True)
class ConstantScore:
    p: float

    def predict(self, X):
        return np.full(np.atleast_2d(X).shape[0], self.p)

    def to_json(self):
        return {"kind": "constant", "p": self.p}


@dataclass(frozen=True)
class SigmoidScore:
    beta: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return _sigmoid(X @ self.beta + self.offset)

    def to_json(self):
        return {"kind": "sigmoid", "beta": self.beta.tolist(), "offset": self.offset}


@dataclass(frozen=True)
class BayesSelectionScore:
    """P(S=1 | x) implied by per-study covariate densities and the size prior.

    Covariate columns are laid out as [intercept?] + Gaussians + Bernoullis;
    the intercept contributes nothing to the likelihood ratio.
    """

    config: DGPConfig

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cfg = self.config
        off = 1 if cfg.intercept else 0
        log_odds = np.full(X.shape[0], np.log(cfg.n_os / cfg.n_rct))
        g0, g1 = cfg.covariates[0], cfg.covariates[1]
        k = g0.normal_means.size
        for j in range(k):
            col = X[:, off + j]
            log_odds += norm.logpdf(col, g1.normal_means[j], np.sqrt(g1.normal_vars[j]))
            log_odds -= norm.logpdf(col, g0.normal_means[j], np.sqrt(g0.normal_vars[j]))
        for j in range(g0.bernoulli_rates.size):
            col = X[:, off + k + j]
            r0, r1 = g0.bernoulli_rates[j], g1.bernoulli_rates[j]
            log_odds += np.where(col > 0.5, np.log(r1) - np.log(r0), np.log(1 - r1) - np.log(1 - r0))
        return _sigmoid(log_odds)

    def to_json(self):
        return {"kind": "bayes_selection"}


def fit_logistic(features, labels, *, max_iter=100, tol=1e-8, ridge=0.0):
    """Maximum-likelihood logistic regression by Newton iteration.

    The caller supplies the design matrix as-is (include an intercept column
    if one is wanted).  Raises on perfect separation once the coefficient
    norm exceeds 50, and suggests the ridge option.
    """
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=float)
    if y.min() == y.max():
        raise ValueError("labels must include at least one example of each class")
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        p = _sigmoid(X @ beta)
        grad = X.T @ (y - p) - ridge * beta
        if np.max(np.abs(grad)) < tol:
            return LogisticModel(beta)
        w = p * (1.0 - p)
        hess = X.T @ (X * w[:, None]) + ridge * np.eye(X.shape[1])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError(
                "singular Hessian in logistic fit; consider the ridge option"
            ) from None
        beta = beta + step
        if np.max(np.abs(beta)) > 50.0:
            raise ConvergenceError(
                "logistic coefficients exceeded 50: data look separable; consider the ridge option"
            )
    raise ConvergenceError(
        f"logistic Newton did not converge; last gradient norm {np.max(np.abs(grad)):.3e}"
    )


def logistic_log_likelihood(beta, features, labels):
    X = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=float)
    z = X @ np.asarray(beta, dtype=float)
    return float(np.sum(y * z - np.logaddexp(0.0, z)))


@dataclass(frozen=True)
class TrimConfig:
    lower: float = 0.05
    upper: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.lower < self.upper <= 1.0:
            raise ValueError("trim bounds must satisfy 0 <= lower < upper <= 1")


@dataclass(frozen=True)
class NuisanceSet:
    """Everything the signals need, over one shared covariate layout."""

    selection: object  # .predict(X) -> P(S=1 | x)
    propensity: dict  # study -> .predict(X) -> P(A=1 | x, S=s)
    f_bar: dict | None  # (s, a) -> event-time survival model
    g_bar: dict | None  # (s, a) -> censoring-time survival model
    provenance: str = "fitted"

    def prob_study(self, X, s):
        p1 = self.selection.predict(X)
        return p1 if s == 1 else 1.0 - p1

    def prob_arm(self, X, s, a):
        p1 = self.propensity[s].predict(X)
        return p1 if a == 1 else 1.0 - p1

    def to_json(self):
        def surv(d):
            if d is None:
                return None
            return {f"s{s}a{a}": m.to_json() for (s, a), m in d.items()}

        return {
            "provenance": self.provenance,
            "selection": self.selection.to_json(),
            "propensity": {str(s): m.to_json() for s, m in self.propensity.items()},
            "f_bar": surv(self.f_bar),
            "g_bar": surv(self.g_bar),
        }


def fit_selection_propensity(cohort: Cohort, *, ridge=0.0):
    """Logistic study-membership and per-study treatment models."""
    X, a, s, _, _ = cohort.arrays()
    selection = fit_logistic(X, s, ridge=ridge)
    propensity = {}
    for study in (0, 1):
        rows = s == study
        if not rows.any():
            raise ValueError(f"cohort has no records for study {study}")
        propensity[study] = fit_logistic(X[rows], a[rows], ridge=ridge)
    return selection, propensity


def fit_nuisances(cohort: Cohort, *, ridge_logistic=0.0, ridge_cox=0.0):
    """Fit the full nuisance bundle on one cohort.

    Event-time models treat delta=1 as the event; censoring-time models treat
    delta=0 as the event.  Every stratum must contain at least two of each.
    """
    X, a, s, y, delta = cohort.arrays()
    selection, propensity = fit_selection_propensity(cohort, ridge=ridge_logistic)
    f_bar, g_bar = {}, {}
    for s_val, a_val in STRATA:
        rows = (s == s_val) & (a == a_val)
        if not rows.any():
            raise ValueError(f"stratum (s={s_val}, a={a_val}) is empty")
        n_event = int(delta[rows].sum())
        n_cens = int(rows.sum()) - n_event
        if n_event < 2:
            raise ValueError(
                f"cannot fit event-time model for stratum (s={s_val}, a={a_val}): "
                f"{n_event} event record(s)"
            )
        if n_cens < 2:
            raise ValueError(
                f"cannot fit censoring-time model for stratum (s={s_val}, a={a_val}): "
                f"{n_cens} censored record(s)"
            )
        f_bar[(s_val, a_val)] = fit_cox((X[rows], y[rows], delta[rows]), ridge=ridge_cox)
        g_bar[(s_val, a_val)] = fit_cox((X[rows], y[rows], 1 - delta[rows]), ridge=ridge_cox)
    return NuisanceSet(selection, propensity, f_bar, g_bar, provenance="fitted")


def oracle_nuisances(config: DGPConfig):
    """The true generator functions, packaged as a nuisance bundle.

    Only available when no covariate is concealed: with concealment the true
    scores on the observed covariates are mixtures the bundle does not model.
    """
    if config.concealed:
        raise ValueError("oracle nuisances are undefined once covariates are concealed")
    if config.global_censoring is not None:
        raise ValueError(
            "oracle censoring survival is not available under threshold censoring"
        )
    selection = BayesSelectionScore(config)
    propensity = {}
    for s in (0, 1):
        spec = config.propensity[s]
        if spec.kind == "constant":
            propensity[s] = ConstantScore(spec.p)
        else:
            propensity[s] = SigmoidScore(spec.beta, spec.offset)
    d = config.covariate_dim()
    f_bar = {k: config.event_time[k].model() for k in STRATA}
    g_bar = {}
    for k in STRATA:
        spec = config.censoring_time[k]
        if spec is None:
            g_bar[k] = _never_censoring_model(d)
        else:
            g_bar[k] = spec.model()
    return NuisanceSet(selection, propensity, f_bar, g_bar, provenance="oracle")


def _never_censoring_model(dim):
    from .survival import StepBaseline

    return CoxModel(StepBaseline(np.asarray([1e12]), np.asarray([0.0])), np.zeros(dim))


def misspecify(nuisances: NuisanceSet, mode, cohort: Cohort, latents=None):
    """Swap in deliberately wrong components.

    miss_f replaces every event-time survival with the law of a uniform
    variable between the smallest and largest event times (flat covariate
    effect); miss_gp does the analogous replacement for the censoring-time
    survival and additionally sets the observational-study propensity to a
    constant 0.5.

    The event-side bounds come from the observed event times.  The
    censoring-side bounds use the simulated censoring times when the latent
    records are supplied: the largest *observed* censoring time is itself an
    observed follow-up time, so a uniform law cut off there assigns that
    record zero censoring survival and its correction integral degenerates.
    """
    if mode not in ("miss_f", "miss_gp"):
        raise ValueError(f"unknown misspecification mode {mode!r}")
    _, _, _, y, delta = cohort.arrays()
    d = cohort.covariate_matrix().shape[1]
    if mode == "miss_f":
        times = y[delta == 1]
    elif latents is not None:
        pool = np.asarray([l.c for l in latents], dtype=float)
        times = pool[np.isfinite(pool)]
    else:
        times = y[delta == 0]
    label = "event" if mode == "miss_f" else "censoring"
    if times.size < 2 or times.min() == times.max():
        raise ValueError(f"need at least two distinct {label} times to misspecify")
    flat = CoxModel(UniformBaseline(float(times.min()), float(times.max())), np.zeros(d))
    if mode == "miss_f":
        return dc_replace(
            nuisances, f_bar={k: flat for k in STRATA}, provenance="miss_f"
        )
    propensity = dict(nuisances.propensity)
    propensity[1] = ConstantScore(0.5)
    return dc_replace(
        nuisances, g_bar={k: flat for k in STRATA}, propensity=propensity, provenance="miss_gp"
    )


def trim_indices(cohort: Cohort, nuisances: NuisanceSet, config: TrimConfig = TrimConfig()):
    """Row indices whose selection and own-study treatment scores are inside the bounds."""
    X, _, s, _, _ = cohort.arrays()
    sel = nuisances.selection.predict(X)
    keep = (sel >= config.lower) & (sel <= config.upper)
    for study in (0, 1):
        rows = s == study
        if rows.any():
            p1 = nuisances.propensity[study].predict(X[rows])
            keep[rows] &= (p1 >= config.lower) & (p1 <= config.upper)
    return np.flatnonzero(keep)


def trim(cohort: Cohort, nuisances: NuisanceSet, config: TrimConfig = TrimConfig()):
    """Drop records with extreme selection or treatment scores, preserving order."""
    kept = trim_indices(cohort, nuisances, config)
    if kept.size == 0:
        raise ValueError("trimming removed every record")
    if kept.size == len(cohort):
        return Cohort(list(cohort.records), list(cohort.covariate_names))
    return Cohort([cohort.records[i] for i in kept], list(cohort.covariate_names))
