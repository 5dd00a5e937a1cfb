"""Instance-wise signals whose conditional mean is zero when the cohorts agree.

Every signal maps one record to a real number such that, under the validity
assumptions being probed, E[psi | X] = 0.  The censoring-aware default
("cdr") augments each record's outcome with censoring-survival weights, a
conditional tail mean for censored records, and a compensating integral
against the censoring law, then combines the four (study, arm) components
into a between-study contrast of within-study treatment contrasts.  The
remaining kinds are progressively simpler contrasts used as ablations:
inverse-censoring weighting only, observed-time imputation, and
uncensored-only variants with their own refit scores.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dataset import Cohort, SubjectRecord
from .nuisance import NuisanceSet, STRATA, fit_selection_propensity
from .survival import EPS_SURV, correction_integral_batch, _floored


class SignalKind(enum.Enum):
    CDR = "cdr"
    IPCW = "ipcw"
    IPW_YTILDE = "ipw_ytilde"
    DR_YTILDE = "dr_ytilde"
    IPW_Y = "ipw_y"
    DR_Y = "dr_y"

    @staticmethod
    def parse(name):
        if isinstance(name, SignalKind):
            return name
        try:
            return SignalKind(str(name).lower())
        except ValueError:
            raise ValueError(
                f"unknown signal kind {name!r}; expected one of "
                + ", ".join(k.value for k in SignalKind)
            ) from None


UNCENSORED_ONLY = (SignalKind.IPW_Y, SignalKind.DR_Y)


@dataclass
class SignalVector:
    """Per-record signal values aligned with their covariate rows."""

    psi: np.ndarray
    x_rows: np.ndarray
    kind: SignalKind
    kept_indices: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=float)
        self.x_rows = np.atleast_2d(np.asarray(self.x_rows, dtype=float))
        self.kept_indices = np.asarray(self.kept_indices, dtype=int)
        if self.psi.size != self.x_rows.shape[0] or self.psi.size != self.kept_indices.size:
            raise ValueError("psi, x_rows and kept_indices must be aligned")
        bad = np.flatnonzero(~np.isfinite(self.psi))
        if bad.size:
            raise ValueError(f"non-finite signal value at record index {int(self.kept_indices[bad[0]])}")

    def __len__(self):
        return self.psi.size

    def to_csv(self, path, covariate_names=None):
        import csv

        names = covariate_names or [f"x{i + 1}" for i in range(self.x_rows.shape[1])]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "psi"] + list(names))
            for i in range(len(self)):
                writer.writerow(
                    [int(self.kept_indices[i]), f"{self.psi[i]:.17g}"]
                    + [f"{v:.17g}" for v in self.x_rows[i]]
                )


# ---------------------------------------------------------------------------
# outcome regressors for the doubly-robust ablations


class TreeEnsembleRegressor:
    """Gradient-boosted least-squares trees (deterministic for fixed data)."""

    def __init__(self, **params):
        from sklearn.ensemble import HistGradientBoostingRegressor

        params.setdefault("random_state", 0)
        params.setdefault("max_iter", 50)
        params.setdefault("max_leaf_nodes", 8)
        params.setdefault("early_stopping", False)
        self._model = HistGradientBoostingRegressor(**params)
        self._fitted = False

    def fit(self, X, y):
        self._model.fit(np.atleast_2d(X), np.asarray(y, dtype=float))
        self._fitted = True
        return self

    def predict(self, X):
        if not self._fitted:
            raise RuntimeError("regressor has not been trained")
        return self._model.predict(np.atleast_2d(X))


class LinearRegressor:
    """Ordinary least squares on the raw covariates."""

    def __init__(self):
        self._coef = None

    def fit(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._coef, *_ = np.linalg.lstsq(X, np.asarray(y, dtype=float), rcond=None)
        return self

    def predict(self, X):
        if self._coef is None:
            raise RuntimeError("regressor has not been trained")
        return np.atleast_2d(np.asarray(X, dtype=float)) @ self._coef


def fit_outcome_regressors(cohort: Cohort, *, subset=None, model="tree"):
    """Train one observed-time regressor per (study, arm) stratum."""
    X, a, s, y, _ = cohort.arrays()
    if subset is not None:
        X, a, s, y = X[subset], a[subset], s[subset], y[subset]
    factory = TreeEnsembleRegressor if model == "tree" else LinearRegressor
    out = {}
    for s_val, a_val in STRATA:
        rows = (s == s_val) & (a == a_val)
        if not rows.any():
            raise ValueError(f"no records to train outcome regressor for stratum (s={s_val}, a={a_val})")
        out[(s_val, a_val)] = factory().fit(X[rows], y[rows])
    return out


# ---------------------------------------------------------------------------
# batch signal computations on raw arrays


def _check_scores(p, what):
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError(f"{what} score outside (0, 1); such records should have been trimmed")


def _signs(a, s):
    return 2.0 * np.asarray(a) - 1.0, 2.0 * np.asarray(s) - 1.0


def rubin_batch(nuisances: NuisanceSet, X, y, delta, s_val, a_val):
    """Censoring-unbiased transformed outcome for records of one stratum.

    delta=1 records contribute their event time over the censoring survival at
    it; censored records contribute the conditional tail mean of the event
    model at their censoring time, over the censoring survival there; both are
    offset by the integral of that tail mean against the censoring law below
    the observed time.  Denominators are floored at EPS_SURV.
    """
    g = nuisances.g_bar[(s_val, a_val)]
    f = nuisances.f_bar[(s_val, a_val)]
    X = np.atleast_2d(X)
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta)
    numer = y.astype(float).copy()
    cens = delta == 0
    if cens.any():
        numer[cens] = f.tail_mean(y[cens], X[cens])
    sg = _floored(g.survival(y, X))
    corr = correction_integral_batch(g, f, X, y)
    return numer / sg - corr


def cdr_batch(nuisances: NuisanceSet, X, a, s, y, delta):
    """Between-study contrast of augmented within-study treatment contrasts.

    Per record, only its own stratum's transformed outcome fires, but the
    event-model means of both arms of its own study always contribute.
    """
    X = np.atleast_2d(X)
    n = X.shape[0]
    sign_a, sign_s = _signs(a, s)
    p_s = nuisances.prob_study(X, 1)
    _check_scores(p_s, "selection")
    p_s_own = np.where(s == 1, p_s, 1.0 - p_s)

    psi = np.zeros(n)
    for s_val in (0, 1):
        in_study = s == s_val
        if not in_study.any():
            continue
        Xs = X[in_study]
        p_a1 = nuisances.propensity[s_val].predict(Xs)
        _check_scores(p_a1, "propensity")
        zeros = np.zeros(Xs.shape[0])
        mu1 = nuisances.f_bar[(s_val, 1)].tail_integral(zeros, Xs)
        mu0 = nuisances.f_bar[(s_val, 0)].tail_integral(zeros, Xs)
        a_study = np.asarray(a)[in_study]
        mu_own = np.where(a_study == 1, mu1, mu0)
        p_a_own = np.where(a_study == 1, p_a1, 1.0 - p_a1)

        psi_star = np.zeros(Xs.shape[0])
        for a_val in (0, 1):
            in_arm = a_study == a_val
            if not in_arm.any():
                continue
            psi_star[in_arm] = rubin_batch(
                nuisances, Xs[in_arm], np.asarray(y)[in_study][in_arm],
                np.asarray(delta)[in_study][in_arm], s_val, a_val,
            )
        sgn_s = sign_s[in_study]
        sgn_a = sign_a[in_study]
        p_study = p_s_own[in_study]
        psi[in_study] = sgn_s * (
            sgn_a * (psi_star - mu_own) / (p_study * p_a_own) + (mu1 - mu0) / p_study
        )
    return psi


def ipcw_batch(nuisances: NuisanceSet, X, a, s, y, delta):
    """Inverse selection, propensity and censoring-survival weighting of observed events."""
    X = np.atleast_2d(X)
    sign_a, sign_s = _signs(a, s)
    p_s_own = _own_study_score(nuisances, X, s)
    p_a_own = _own_arm_score(nuisances, X, a, s)
    sg = np.ones(X.shape[0])
    for s_val, a_val in STRATA:
        rows = (np.asarray(s) == s_val) & (np.asarray(a) == a_val)
        if rows.any():
            g = nuisances.g_bar[(s_val, a_val)]
            sg[rows] = _floored(g.survival(np.asarray(y, dtype=float)[rows], X[rows]))
    return sign_s * sign_a * np.asarray(delta) * np.asarray(y, dtype=float) / (p_s_own * p_a_own * sg)


def ipw_ytilde_batch(nuisances: NuisanceSet, X, a, s, y):
    """Observed-time contrast weighted by inverse stratum-membership probability."""
    X = np.atleast_2d(X)
    sign_a, sign_s = _signs(a, s)
    p_s_own = _own_study_score(nuisances, X, s)
    p_a_own = _own_arm_score(nuisances, X, a, s)
    return sign_s * sign_a * np.asarray(y, dtype=float) / (p_s_own * p_a_own)


def dr_ytilde_batch(nuisances: NuisanceSet, regressors, X, a, s, y):
    """Augmented observed-time contrast: residual reweighting plus regression terms."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    sign_a, sign_s = _signs(a, s)
    p_s_own = _own_study_score(nuisances, X, s)
    psi = np.zeros(n)
    for s_val in (0, 1):
        in_study = np.asarray(s) == s_val
        if not in_study.any():
            continue
        Xs = X[in_study]
        p_a1 = nuisances.propensity[s_val].predict(Xs)
        _check_scores(p_a1, "propensity")
        mt1 = np.asarray(regressors[(s_val, 1)].predict(Xs), dtype=float)
        mt0 = np.asarray(regressors[(s_val, 0)].predict(Xs), dtype=float)
        a_study = np.asarray(a)[in_study]
        mt_own = np.where(a_study == 1, mt1, mt0)
        p_a_own = np.where(a_study == 1, p_a1, 1.0 - p_a1)
        psi[in_study] = sign_s[in_study] * (
            sign_a[in_study] * (np.asarray(y, dtype=float)[in_study] - mt_own)
            / (p_s_own[in_study] * p_a_own)
            + (mt1 - mt0) / p_s_own[in_study]
        )
    return psi


def _own_study_score(nuisances, X, s):
    p_s = nuisances.prob_study(X, 1)
    _check_scores(p_s, "selection")
    return np.where(np.asarray(s) == 1, p_s, 1.0 - p_s)


def _own_arm_score(nuisances, X, a, s):
    out = np.empty(np.atleast_2d(X).shape[0])
    for s_val in (0, 1):
        rows = np.asarray(s) == s_val
        if rows.any():
            p_a1 = nuisances.propensity[s_val].predict(np.atleast_2d(X)[rows])
            _check_scores(p_a1, "propensity")
            out[rows] = np.where(np.asarray(a)[rows] == 1, p_a1, 1.0 - p_a1)
    return out


# ---------------------------------------------------------------------------
# per-record operations


def _one(record: SubjectRecord):
    return (
        record.x[None, :],
        np.asarray([record.a]),
        np.asarray([record.s]),
        np.asarray([record.y_obs]),
        np.asarray([record.delta]),
    )


def rubin_signal(record: SubjectRecord, nuisances: NuisanceSet, s, a):
    """Censoring-unbiased transformed outcome for a record of stratum (s, a)."""
    if record.s != s or record.a != a:
        raise ValueError(f"record belongs to stratum (s={record.s}, a={record.a}), not (s={s}, a={a})")
    X, _, _, y, delta = _one(record)
    return float(rubin_batch(nuisances, X, y, delta, s, a)[0])


def cdr_signal(record: SubjectRecord, nuisances: NuisanceSet):
    X, a, s, y, delta = _one(record)
    return float(cdr_batch(nuisances, X, a, s, y, delta)[0])


def ipcw_signal(record: SubjectRecord, nuisances: NuisanceSet):
    X, a, s, y, delta = _one(record)
    return float(ipcw_batch(nuisances, X, a, s, y, delta)[0])


def ipw_ytilde_signal(record: SubjectRecord, nuisances: NuisanceSet):
    X, a, s, y, _ = _one(record)
    return float(ipw_ytilde_batch(nuisances, X, a, s, y)[0])


def dr_ytilde_signal(record: SubjectRecord, nuisances: NuisanceSet, regressors):
    X, a, s, y, _ = _one(record)
    return float(dr_ytilde_batch(nuisances, regressors, X, a, s, y)[0])


# ---------------------------------------------------------------------------
# cohort-level entry points


def uncensored_only_signals(cohort: Cohort, nuisances_delta1: NuisanceSet, kind, regressors=None):
    """Observed-event-only signals with scores refit on the uncensored subset.

    kept_indices point at the delta=1 rows of the cohort that was passed in.
    """
    kind = SignalKind.parse(kind)
    if kind not in UNCENSORED_ONLY:
        raise ValueError(f"kind must be one of {[k.value for k in UNCENSORED_ONLY]}")
    X, a, s, y, delta = cohort.arrays()
    rows = np.flatnonzero(delta == 1)
    if rows.size == 0:
        raise ValueError("cohort has no uncensored records")
    for s_val, a_val in STRATA:
        if not np.any((s[rows] == s_val) & (a[rows] == a_val)):
            raise ValueError(f"uncensored subset is empty in stratum (s={s_val}, a={a_val})")
    Xr, ar, sr, yr = X[rows], a[rows], s[rows], y[rows]
    if kind is SignalKind.IPW_Y:
        psi = ipw_ytilde_batch(nuisances_delta1, Xr, ar, sr, yr)
    else:
        if regressors is None:
            regressors = fit_outcome_regressors(cohort, subset=rows)
        psi = dr_ytilde_batch(nuisances_delta1, regressors, Xr, ar, sr, yr)
    return SignalVector(psi, Xr, kind, rows)


def delta1_nuisances(cohort: Cohort, base: NuisanceSet | None = None, *, ridge=0.0):
    """Selection and propensity scores refit on the uncensored subset.

    Survival models are irrelevant for the uncensored-only signals; the ones
    from `base` are carried through unchanged when provided.
    """
    _, _, _, _, delta = cohort.arrays()
    rows = np.flatnonzero(delta == 1)
    sub = Cohort([cohort.records[i] for i in rows], list(cohort.covariate_names))
    selection, propensity = fit_selection_propensity(sub, ridge=ridge)
    return NuisanceSet(
        selection,
        propensity,
        base.f_bar if base is not None else None,
        base.g_bar if base is not None else None,
        provenance="delta1",
    )


def compute_signals(cohort: Cohort, nuisances: NuisanceSet, kind, extras=None):
    """Evaluate one signal kind across a (trimmed) cohort.

    extras may carry "regressors" (for dr_ytilde), "delta1_nuisances" and
    "delta1_regressors" (for the uncensored-only kinds); missing pieces are
    fit on the cohort itself.  Any non-finite value is a hard error naming
    the record.
    """
    kind = SignalKind.parse(kind)
    extras = extras or {}
    if len(cohort) == 0:
        raise ValueError("cohort is empty")
    X, a, s, y, delta = cohort.arrays()
    n0, n1 = cohort.study_sizes()
    if n0 == 0 or n1 == 0:
        raise ValueError("both studies must be represented before testing")
    if kind in UNCENSORED_ONLY:
        nuis1 = extras.get("delta1_nuisances")
        if nuis1 is None:
            nuis1 = delta1_nuisances(cohort, nuisances)
        return uncensored_only_signals(
            cohort, nuis1, kind, regressors=extras.get("delta1_regressors")
        )
    if kind is SignalKind.CDR:
        psi = cdr_batch(nuisances, X, a, s, y, delta)
    elif kind is SignalKind.IPCW:
        psi = ipcw_batch(nuisances, X, a, s, y, delta)
    elif kind is SignalKind.IPW_YTILDE:
        psi = ipw_ytilde_batch(nuisances, X, a, s, y)
    else:  # DR_YTILDE
        regressors = extras.get("regressors")
        if regressors is None:
            regressors = fit_outcome_regressors(cohort)
        psi = dr_ytilde_batch(nuisances, regressors, X, a, s, y)
    return SignalVector(psi, X, kind, np.arange(len(cohort)))
