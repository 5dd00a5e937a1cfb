"""Bundled experiment configurations.

The catalog covers: the five independent-censoring setups (null, two
external-validity violations, two hidden-confounding strengths at trial size
985 and observational sizes 985/2955), threshold-censoring variants of the
null and the violations, the misspecified-nuisance robustness runs, and the
selection-bias sweep.  Covariates are one intercept, ten unit-variance
Gaussians whose means differ between the studies, and one Bernoulli(0.5)
column that acts as the concealable confounder.
"""

from __future__ import annotations

import numpy as np

from .dataset import (
    CensorRule,
    CovariateGroupSpec,
    CoxSpec,
    DGPConfig,
    GlobalCensoringSpec,
    PropensitySpec,
)
from .harness import ExperimentConfig
from .signals import SignalKind

ALL_KINDS = tuple(SignalKind)

MU_RCT = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
MU_OS = np.array([0.0, -0.07, 0.28, 0.0, -0.21, 0.1, 0.0, 0.28, 1.0, -0.28])

# layout: [intercept, x1..x10, b1]; b1 is the confounder column
PROP_OS = 0.4 * np.array([-0.7, 0.4, -0.2, 0.3, -0.1, -0.4, 0.2, 0.1, 0.4, -0.8, -0.75, 0.0])

BETA_EVENT_A0 = np.array([0.0, 0.15, -0.12, 0.12, 0.0, -0.15, 0.12, 0.0, 0.12, -0.18, 0.12, 0.8])
BETA_EVENT_A1 = np.array([0.0, 0.12, -0.12, 0.18, 0.09, -0.12, 0.15, -0.09, 0.12, -0.27, -0.15, 0.8])
EVV_INDEX = 9  # coefficient of x9 (unit mean in both studies) in the treated-arm event model

LAM_EVENT = {0: 0.5, 1: 0.37}
SHAPE = 2.0
# Censoring is concentrated early (smaller Weibull shape than the events) so
# the inverse censoring-survival weights keep all moments finite.  Its scale
# is light and arm-balanced in the trial but heavy and arm-skewed in the
# observational cohort, which is what defeats the censoring-blind ablation
# signals while leaving the censoring-aware ones calibrated.
LAM_CENS = {(0, 0): 0.10, (0, 1): 0.10, (1, 0): 0.15, (1, 1): 0.33}
SHAPE_CENS = 1.1
CONFOUNDER_INDEX = 11
GC_TAU = 2.0


def _covariates():
    var = np.ones(10)
    bern = np.array([0.5])
    return {
        0: CovariateGroupSpec(MU_RCT, var, bern),
        1: CovariateGroupSpec(MU_OS, var, bern),
    }


def _event_specs(delta_beta_cox=0.0):
    specs = {}
    for s in (0, 1):
        for a, beta in ((0, BETA_EVENT_A0), (1, BETA_EVENT_A1)):
            b = beta.copy()
            if s == 1 and a == 1 and delta_beta_cox:
                b[EVV_INDEX] += delta_beta_cox
            specs[(s, a)] = CoxSpec(LAM_EVENT[a], SHAPE, b)
    return specs


def _censoring_specs():
    # same coefficients as the event models so the censoring support tracks
    # the event support per covariate profile
    return {
        (s, a): CoxSpec(LAM_CENS[(s, a)], SHAPE_CENS, beta.copy())
        for s in (0, 1)
        for a, beta in ((0, BETA_EVENT_A0), (1, BETA_EVENT_A1))
    }


def _no_censoring_specs():
    return {(s, a): None for s in (0, 1) for a in (0, 1)}


def _propensity(confounding=None):
    if confounding is None:
        return {
            0: PropensitySpec("constant", p=0.5),
            1: PropensitySpec("sigmoid", beta=PROP_OS),
        }
    beta = np.zeros(12)
    beta[CONFOUNDER_INDEX] = confounding
    # offset centers the score so both confounder levels keep good overlap
    return {
        0: PropensitySpec("constant", p=0.5),
        1: PropensitySpec("sigmoid", beta=beta, offset=-confounding / 2.0),
    }


def make_dgp(
    *,
    n_os=2955,
    delta_beta_cox=0.0,
    confounding=None,
    global_censoring=False,
    selection_bias_f=0.0,
):
    """One generator config; keyword knobs select the violation being induced."""
    conceal = (CONFOUNDER_INDEX,) if confounding is not None else ()
    return DGPConfig(
        covariates=_covariates(),
        propensity=_propensity(confounding),
        event_time=_event_specs(delta_beta_cox),
        censoring_time=_no_censoring_specs() if global_censoring else _censoring_specs(),
        n_rct=985,
        n_os=n_os,
        concealed=conceal,
        global_censoring=GlobalCensoringSpec(GC_TAU, CensorRule()) if global_censoring else None,
        selection_bias_f=selection_bias_f,
    )


def _experiment(label, dgp, kinds=ALL_KINDS, nuisance_mode="fitted", replications=40, base_seed=0):
    return ExperimentConfig(
        dgp=dgp,
        signal_kinds=kinds,
        nuisance_mode=nuisance_mode,
        replications=replications,
        base_seed=base_seed,
        label=label,
    )


def _setup_dgp(number, n_os):
    if number == 1:
        return make_dgp(n_os=n_os)
    if number == 2:
        return make_dgp(n_os=n_os, delta_beta_cox=0.2)
    if number == 3:
        return make_dgp(n_os=n_os, delta_beta_cox=1.0)
    if number == 4:
        return make_dgp(n_os=n_os, confounding=1.0)
    if number == 5:
        return make_dgp(n_os=n_os, confounding=2.5)
    raise ValueError(f"no setup {number}")


def _build_catalog():
    cat = {}
    for number in (1, 2, 3, 4, 5):
        cat[f"setup{number}"] = lambda number=number: _experiment(
            f"setup{number}", _setup_dgp(number, 2955)
        )
        cat[f"setup{number}-os985"] = lambda number=number: _experiment(
            f"setup{number}-os985", _setup_dgp(number, 985)
        )
    cat["gc-null"] = lambda: _experiment("gc-null", make_dgp(global_censoring=True))
    for delta in (0.2, 1.0):
        cat[f"gc-evv-{delta:g}"] = lambda delta=delta: _experiment(
            f"gc-evv-{delta:g}", make_dgp(delta_beta_cox=delta, global_censoring=True)
        )
    for conf in (1.0, 2.5):
        cat[f"gc-uc-{conf:g}"] = lambda conf=conf: _experiment(
            f"gc-uc-{conf:g}", make_dgp(confounding=conf, global_censoring=True)
        )
    for setup in (1, 2, 3):
        for mode in ("miss_f", "miss_gp"):
            tag = mode.replace("_", "")
            cat[f"cdr-{tag}-setup{setup}"] = lambda setup=setup, mode=mode: _experiment(
                f"cdr-{mode}-setup{setup}",
                _setup_dgp(setup, 2955),
                kinds=(SignalKind.CDR,),
                nuisance_mode=mode,
            )
    for f in (0.0, 0.1, 0.25):
        cat[f"selection-bias-f{f:g}"] = lambda f=f: _experiment(
            f"selection-bias-f{f:g}",
            make_dgp(selection_bias_f=f),
            kinds=(SignalKind.IPW_YTILDE, SignalKind.DR_YTILDE, SignalKind.IPCW, SignalKind.CDR),
        )
    return cat


_CATALOG = _build_catalog()


def preset_names():
    return sorted(_CATALOG)


def get_preset(name) -> ExperimentConfig:
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}"
        ) from None
    return factory()
