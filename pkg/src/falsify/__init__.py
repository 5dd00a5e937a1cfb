"""Falsification tests for observational studies benchmarked against randomized
trials when outcomes are right-censored time-to-event measurements."""

from .dataset import (
    Cohort,
    DGPConfig,
    LatentRecord,
    SubjectRecord,
    apply_global_censoring,
    apply_selection_bias,
    generate_cohort,
    load_csv,
    observe,
    save_csv,
)
from .harness import (
    ExperimentConfig,
    RejectionTable,
    emit_report,
    prop2_oracle_check,
    run_replications,
    run_single,
)
from .mmr import (
    KernelSpec,
    TestResult,
    WitnessEvaluator,
    bootstrap_null,
    build_witness,
    gram,
    mmr_statistic,
    run_test,
    witness,
)
from .nuisance import (
    LogisticModel,
    NuisanceSet,
    TrimConfig,
    fit_logistic,
    fit_nuisances,
    misspecify,
    oracle_nuisances,
    trim,
)
from .signals import SignalKind, SignalVector, compute_signals, uncensored_only_signals
from .survival import (
    CoxModel,
    StepBaseline,
    UniformBaseline,
    WeibullBaseline,
    conditional_tail_mean,
    correction_integral,
    cox_survival,
    fit_cox,
    restricted_mean,
    sample_event_time,
)

__version__ = "0.1.0"
