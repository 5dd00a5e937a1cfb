"""Kernel maximum-moment test: Gram matrices, the U-statistic, and its bootstrap null.

The statistic is the off-diagonal average of psi_i k(x_i, x_j) psi_j.  Its
null distribution is simulated by multinomial-weight perturbations of the
same quadratic form, and the p-value is the add-one-smoothed fraction of
bootstrap draws at or above the statistic.  A witness evaluator exposes the
kernel-weighted signal average that locates where the two cohorts disagree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .signals import SignalKind, SignalVector


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian RBF kernel with an explicit or median-heuristic bandwidth."""

    family: str = "gaussian_rbf"
    bandwidth: object = "median_heuristic"

    def __post_init__(self):
        if self.family != "gaussian_rbf":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        bw = self.bandwidth
        if bw != "median_heuristic" and not (np.isscalar(bw) and float(bw) > 0):
            raise ValueError("bandwidth must be a positive number or 'median_heuristic'")

    def resolved(self):
        return self.bandwidth != "median_heuristic"

    def to_json(self):
        return {"family": self.family, "bandwidth": self.bandwidth}


def standardize_columns(X):
    """Per-column z-scores; constant columns map to zero."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (X - mean) / std


def _sq_distances(X):
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _median_positive_distance(d2):
    # every off-diagonal pair appears twice in the full matrix, which leaves
    # the median of the positive entries unchanged
    vals = d2[d2 > 0]
    if vals.size == 0:
        raise ValueError("all pairwise distances are zero; pass an explicit bandwidth")
    return float(np.sqrt(np.median(vals)))


def median_heuristic_bandwidth(X):
    """Median pairwise Euclidean distance over the positive-distance pairs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 rows")
    return _median_positive_distance(_sq_distances(X))


def gram(x_rows, kernel: KernelSpec):
    """Symmetric unit-diagonal RBF Gram matrix; resolves the bandwidth if needed."""
    X = np.atleast_2d(np.asarray(x_rows, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("gram needs at least 2 rows")
    d2 = _sq_distances(X)
    if kernel.resolved():
        sigma = float(kernel.bandwidth)
    else:
        sigma = _median_positive_distance(d2)
    K = np.exp(d2 * (-0.5 / (sigma * sigma)))
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return K, dc_replace(kernel, bandwidth=sigma)


def mmr_statistic(psi, K):
    """Off-diagonal mean of psi_i K_ij psi_j: sum over i != j over n(n-1)."""
    psi = np.asarray(psi, dtype=float)
    K = np.asarray(K, dtype=float)
    n = psi.size
    if K.shape != (n, n):
        raise ValueError("psi length and Gram dimension do not match")
    if n < 2:
        raise ValueError("statistic needs at least 2 records")
    total = psi @ K @ psi - np.sum(psi * psi * np.diag(K))
    return float(total / (n * (n - 1)))


def _null_stats(psi, K, weights):
    """Bootstrap quadratic forms for rows of multinomial weights (minus one)."""
    psi = np.asarray(psi, dtype=float)
    n = psi.size
    V = (np.asarray(weights, dtype=float) - 1.0) * psi[None, :]
    diag = np.diag(K)
    quad = np.einsum("bi,bi->b", V @ K, V) - np.sum(V * V * diag[None, :], axis=1)
    return quad / (n * n)


def bootstrap_null(psi, K, B, seed):
    """B multinomial-bootstrap samples of the null statistic, reusing the Gram matrix."""
    if B < 1:
        raise ValueError("B must be at least 1")
    psi = np.asarray(psi, dtype=float)
    n = psi.size
    rng = np.random.default_rng(seed)
    W = rng.multinomial(n, np.full(n, 1.0 / n), size=B)
    return _null_stats(psi, K, W)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    null_samples: np.ndarray
    p_value: float
    alpha: float
    reject: bool
    n: int
    kernel: KernelSpec
    seed: int
    kind: SignalKind | None = None

    def to_json(self):
        return {
            "statistic": self.statistic,
            "null_samples": np.asarray(self.null_samples).tolist(),
            "p_value": self.p_value,
            "alpha": self.alpha,
            "reject": self.reject,
            "n": self.n,
            "kernel": self.kernel.to_json(),
            "seed": self.seed,
            "kind": self.kind.value if self.kind else None,
        }

    @staticmethod
    def from_json(obj):
        return TestResult(
            statistic=obj["statistic"],
            null_samples=np.asarray(obj["null_samples"]),
            p_value=obj["p_value"],
            alpha=obj["alpha"],
            reject=obj["reject"],
            n=obj["n"],
            kernel=KernelSpec(obj["kernel"]["family"], obj["kernel"]["bandwidth"]),
            seed=obj["seed"],
            kind=SignalKind(obj["kind"]) if obj.get("kind") else None,
        )

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def run_test(
    signal: SignalVector,
    kernel: KernelSpec = KernelSpec(),
    B: int = 100,
    alpha: float = 0.05,
    seed: int = 0,
    *,
    standardize: bool = True,
    precomputed=None,
):
    """Full test on one signal vector.

    Covariates are z-scored per column before the Gram computation unless
    `standardize` is off or a `(K, resolved_kernel)` pair is supplied.  The
    p-value is (#{statistic <= null sample} + 1) / (B + 1); reject iff it is
    below alpha.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if precomputed is not None:
        K, resolved = precomputed
        if K.shape[0] != len(signal):
            raise ValueError("precomputed Gram does not match signal length")
    else:
        rows = standardize_columns(signal.x_rows) if standardize else signal.x_rows
        K, resolved = gram(rows, kernel)
    stat = mmr_statistic(signal.psi, K)
    null = bootstrap_null(signal.psi, K, B, seed)
    p = (int(np.sum(stat <= null)) + 1) / (B + 1)
    return TestResult(
        statistic=stat,
        null_samples=null,
        p_value=p,
        alpha=alpha,
        reject=bool(p < alpha),
        n=len(signal),
        kernel=resolved,
        seed=seed,
        kind=signal.kind,
    )


# ---------------------------------------------------------------------------
# witness function


@dataclass(frozen=True)
class WitnessEvaluator:
    """Kernel-weighted signal average, optionally normalized to unit integral.

    The normalization constant is estimated by Monte Carlo over the bounding
    box of the reference covariates inflated by 10% (5% on each side).
    """

    psi: np.ndarray
    x_rows: np.ndarray
    kernel: KernelSpec
    constant: float = 1.0
    box: tuple | None = None

    def evaluate(self, x_query):
        Xq = np.atleast_2d(np.asarray(x_query, dtype=float))
        sigma = float(self.kernel.bandwidth)
        d2 = (
            np.sum(Xq * Xq, axis=1)[:, None]
            + np.sum(self.x_rows * self.x_rows, axis=1)[None, :]
            - 2.0 * Xq @ self.x_rows.T
        )
        np.maximum(d2, 0.0, out=d2)
        k = np.exp(-d2 / (2.0 * sigma * sigma))
        vals = self.constant * (k @ self.psi) / self.psi.size
        return vals if np.asarray(x_query).ndim > 1 else float(vals[0])


def build_witness(
    signal: SignalVector,
    kernel: KernelSpec = KernelSpec(),
    *,
    normalize: bool = True,
    box_inflation: float = 0.1,
    mc_draws: int = 100_000,
    seed: int = 0,
):
    """Construct the witness evaluator from a signal vector."""
    X = signal.x_rows
    if kernel.resolved():
        resolved = kernel
    else:
        resolved = dc_replace(kernel, bandwidth=median_heuristic_bandwidth(X))
    ev = WitnessEvaluator(signal.psi.copy(), X.copy(), resolved)
    if not normalize:
        return ev
    lo = X.min(axis=0)
    hi = X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    lo = lo - 0.5 * box_inflation * span
    hi = hi + 0.5 * box_inflation * span
    rng = np.random.default_rng(seed)
    draws = rng.uniform(lo, hi, size=(int(mc_draws), X.shape[1]))
    volume = float(np.prod(hi - lo))
    integral = volume * float(np.mean(ev.evaluate(draws)))
    if not np.isfinite(integral) or integral == 0.0:
        raise ValueError("witness integral over the evaluation box is zero; cannot normalize")
    return WitnessEvaluator(ev.psi, ev.x_rows, resolved, constant=1.0 / integral, box=(lo, hi))


def witness(evaluator: WitnessEvaluator, x_query):
    """Evaluate the witness at one point or a batch of points."""
    return evaluator.evaluate(x_query)
