"""Conditional survival models and the integrals built on top of them.

Three baseline families share one proportional-hazards wrapper (`CoxModel`):

* `WeibullBaseline` -- parametric, used by the simulators and oracle models;
  tail integrals reduce to upper incomplete gamma functions.
* `StepBaseline` -- right-continuous step survival, produced by `fit_cox`
  (partial likelihood + Breslow cumulative hazard) or written by hand for
  discrete laws in tests.
* `UniformBaseline` -- survival of a uniform random variable, used to build
  deliberately misspecified models.

All heavy evaluations are vectorized: `t` may be a scalar, a vector aligned
with the rows of `X`, or a (q, n) matrix of per-row evaluation points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import gammaincc

# Floor applied to survival values that enter denominators.  Positivity is
# assumed in theory; the floor keeps violations by estimated models bounded.
EPS_SURV = 1e-4

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)


class SupportError(ValueError):
    """A survival evaluation violated the positivity floor where a ratio needs it."""


class ConvergenceError(RuntimeError):
    """An iterative fit failed to converge."""


def _floored(s):
    return np.maximum(s, EPS_SURV)


# ---------------------------------------------------------------------------
# baselines


@dataclass(frozen=True)
class WeibullBaseline:
    """Baseline survival exp(-(lam*t)^p)."""

    lam: float
    p: float

    def __post_init__(self):
        if not (self.lam > 0 and self.p > 0):
            raise ValueError("Weibull baseline requires lam > 0 and p > 0")

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-((self.lam * t) ** self.p))

    def cum_hazard(self, t):
        t = np.asarray(t, dtype=float)
        return (self.lam * t) ** self.p

    def inverse_survival(self, u):
        """t such that survival(t) = u, for u in (0, 1)."""
        u = np.asarray(u, dtype=float)
        return (-np.log(u)) ** (1.0 / self.p) / self.lam

    def to_json(self):
        return {"kind": "weibull", "lam": self.lam, "p": self.p}


@dataclass(frozen=True)
class StepBaseline:
    """Right-continuous step survival: 1 before times[0], values[k] on [times[k], times[k+1])."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if times.ndim != 1 or values.shape != times.shape or times.size == 0:
            raise ValueError("times and values must be equal-length 1-d arrays")
        if np.any(np.diff(times) <= 0):
            raise ValueError("step times must be strictly increasing")
        if np.any(times < 0):
            raise ValueError("step times must be nonnegative")
        if np.any(np.diff(values) > 0) or values[0] > 1.0 or np.any(values < 0):
            raise ValueError("step values must be nonincreasing within [0, 1]")

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        padded = np.concatenate([[1.0], self.values])
        return padded[idx]

    def survival_before(self, t):
        """Left limit of the survival function at t."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="left")
        padded = np.concatenate([[1.0], self.values])
        return padded[idx]

    def to_json(self):
        return {"kind": "step", "times": self.times.tolist(), "values": self.values.tolist()}


@dataclass(frozen=True)
class UniformBaseline:
    """Survival of Uniform(lo, hi): 1 below lo, linear on [lo, hi], 0 above."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError("uniform baseline requires hi > lo")

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        return np.clip((self.hi - t) / (self.hi - self.lo), 0.0, 1.0)

    def to_json(self):
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}


def baseline_from_json(obj):
    kind = obj["kind"]
    if kind == "weibull":
        return WeibullBaseline(obj["lam"], obj["p"])
    if kind == "step":
        return StepBaseline(np.asarray(obj["times"]), np.asarray(obj["values"]))
    if kind == "uniform":
        return UniformBaseline(obj["lo"], obj["hi"])
    raise ValueError(f"unknown baseline kind {kind!r}")


# ---------------------------------------------------------------------------
# proportional-hazards wrapper


@dataclass(frozen=True)
class CoxModel:
    """baseline survival raised to exp(x . beta)."""

    baseline: WeibullBaseline | StepBaseline | UniformBaseline
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))

    def risk(self, X):
        """exp(X . beta) for rows of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.beta.size:
            raise ValueError(
                f"covariate dimension {X.shape[1]} does not match beta dimension {self.beta.size}"
            )
        lp = X @ self.beta
        if not np.all(np.isfinite(np.exp(lp))):
            raise ValueError("non-finite risk score exp(x . beta)")
        return np.exp(lp)

    def survival(self, t, X):
        """P(T > t | x) for t aligned with rows of X (t may be (n,) or (q, n))."""
        e = self.risk(X)
        return self.baseline.survival(t) ** e

    def tail_integral(self, t, X):
        """Integral of the conditional survival over (t, infinity), per row."""
        return _tail_integral(self, _align_t(t, X), X)

    def tail_mean(self, t, X):
        """E[T | T > t, x]: t plus tail integral over survival at t."""
        out, violated = _tail_mean_parts(self, _align_t(t, X), X)
        if np.any(violated):
            raise SupportError(
                f"conditional tail mean requested where survival < {EPS_SURV:g}: support violation"
            )
        return out

    def to_json(self):
        return {"baseline": self.baseline.to_json(), "beta": self.beta.tolist()}

    @staticmethod
    def from_json(obj):
        return CoxModel(baseline_from_json(obj["baseline"]), np.asarray(obj["beta"]))


def cox_survival(model: CoxModel, x, t):
    """Conditional survival at time t, scalar in / scalar out for 1-d x."""
    x = np.asarray(x, dtype=float)
    if np.ndim(t) == 0 and float(t) < 0:
        raise ValueError("t must be nonnegative")
    out = model.survival(t, x)
    return float(out[0]) if x.ndim == 1 and np.ndim(t) == 0 else out


def sample_event_time(model: CoxModel, x, u):
    """Invert the conditional survival: returns t with survival(t | x) = u."""
    if not isinstance(model.baseline, WeibullBaseline):
        raise ValueError("exact inversion is only available for Weibull baselines")
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
        raise ValueError("u must lie in the open interval (0, 1)")
    e = model.risk(x)
    t = model.baseline.inverse_survival(u_arr ** (1.0 / e))
    return float(t[0]) if np.ndim(u) == 0 and np.asarray(x).ndim == 1 else t


# ---------------------------------------------------------------------------
# tail integrals per baseline family


def _tail_integral(model: CoxModel, t, X):
    e = model.risk(X)
    b = model.baseline
    if isinstance(b, WeibullBaseline):
        return _weibull_tail(b, e, t)
    if isinstance(b, StepBaseline):
        return _step_tail(b, e, t)
    if isinstance(b, UniformBaseline):
        return _uniform_tail(b, e, t)
    raise TypeError(f"unsupported baseline {type(b).__name__}")


def _weibull_tail(b: WeibullBaseline, e, t):
    # int_t^inf exp(-(lam u)^p e) du via the upper incomplete gamma function
    s = 1.0 / b.p
    z = ((b.lam * t) ** b.p) * e
    return gamma_fn(s) * gammaincc(s, z) / (b.lam * b.p * e**s)


def _step_tail(b: StepBaseline, e, t):
    # Survival is taken as 0 past the last step time (restricted-mean convention),
    # so the integral runs over [t, times[-1]] only.
    t = np.asarray(t, dtype=float)
    e_b = np.broadcast_to(e, t.shape)
    times, values = b.times, b.values
    grid = np.concatenate([[0.0], times])
    seg_val = np.concatenate([[1.0], values[:-1]])  # survival on [grid[k], grid[k+1])
    seg_len = np.diff(grid)
    # suffix[i, k] = integral of survival over [grid[k], times[-1]] for row i
    pow_vals = seg_val[None, :] ** np.atleast_1d(e).reshape(-1, 1)
    seg_int = pow_vals * seg_len[None, :]
    suffix = np.concatenate(
        [np.cumsum(seg_int[:, ::-1], axis=1)[:, ::-1], np.zeros((seg_int.shape[0], 1))], axis=1
    )
    idx = np.searchsorted(grid, t, side="right") - 1  # segment containing t
    idx = np.clip(idx, 0, len(grid) - 1)
    row = _row_index(t, np.atleast_1d(e).size)
    partial = np.where(
        idx < len(seg_len),
        (grid[np.minimum(idx + 1, len(grid) - 1)] - t) * (seg_val[np.minimum(idx, len(seg_val) - 1)] ** e_b),
        0.0,
    )
    full = suffix[row, np.minimum(idx + 1, suffix.shape[1] - 1)]
    out = np.where(t >= times[-1], 0.0, partial + full)
    return out


def _uniform_tail(b: UniformBaseline, e, t):
    t = np.asarray(t, dtype=float)
    span = b.hi - b.lo
    tc = np.clip(t, b.lo, b.hi)
    inner = span * ((b.hi - tc) / span) ** (e + 1.0) / (e + 1.0)
    head = np.clip(b.lo - t, 0.0, None)  # survival is 1 below lo
    return head + inner


def _row_index(t, n_rows):
    """Row indices aligned with a t array of shape (n,) or (q, n)."""
    t = np.asarray(t)
    if t.ndim <= 1:
        return np.arange(t.size)
    return np.broadcast_to(np.arange(t.shape[-1]), t.shape)


def _align_t(t, X):
    """Broadcast a scalar t over the rows of X; pass arrays through."""
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        n = 1 if np.asarray(X).ndim == 1 else np.atleast_2d(X).shape[0]
        return np.full(n, float(t))
    return t


def _tail_mean_parts(model: CoxModel, t, X):
    """(tail mean with violations left at t, boolean violation mask).

    Past the end of a bounded support the tail integral is zero and the value
    degenerates to t itself.  The tail/survival ratio is the mean residual
    life and stays numerically stable however small the survival gets (both
    factors shrink together), so only an exactly-zero survival against a
    positive tail is flagged as a support violation.
    """
    tail = _tail_integral(model, t, X)
    s = model.survival(t, np.asarray(X, dtype=float))
    live = tail > 0.0
    violated = live & (s == 0.0)
    safe = live & ~violated
    ratio = np.divide(tail, s, out=np.zeros_like(tail), where=safe)
    return np.where(safe, t + ratio, t), violated


# ---------------------------------------------------------------------------
# spec-level integral operations


def restricted_mean(model: CoxModel, x, upper=np.inf):
    """Integral of the conditional survival over [0, upper]."""
    if not upper > 0:
        raise ValueError("upper must be positive")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    t0 = np.zeros(1 if scalar else x.shape[0])
    total = model.tail_integral(t0, x)
    if np.isfinite(upper):
        total = total - model.tail_integral(np.full_like(t0, upper), x)
    return float(total[0]) if scalar else total


def conditional_tail_mean(model: CoxModel, x, c):
    """E[T | T > c, x] = c + tail integral / survival(c | x).

    Past the end of a step or uniform support the tail integral is zero and
    the value degenerates to c itself; inside the support, survival below
    EPS_SURV raises `SupportError`.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1 and np.ndim(c) == 0
    out = model.tail_mean(np.atleast_1d(np.asarray(c, dtype=float)), x)
    return float(out[0]) if scalar else out


def correction_integral(g_model: CoxModel, q_fn, x, y_tilde):
    """Stieltjes integral of q(c) / survival(c)^2 against the censoring law on [0, y_tilde].

    Atoms of a step law located at or below y_tilde are included, each weighted
    by its jump mass over the squared post-jump survival value; continuous laws
    are integrated by quadrature.  Survival values in denominators are floored
    at EPS_SURV.
    """
    x = np.asarray(x, dtype=float)
    y_tilde = float(y_tilde)
    if y_tilde < 0:
        raise ValueError("y_tilde must be nonnegative")
    b = g_model.baseline
    e = float(g_model.risk(x)[0])
    if isinstance(b, StepBaseline):
        k = np.searchsorted(b.times, y_tilde, side="right")
        if k == 0:
            return 0.0
        tk = b.times[:k]
        post = np.concatenate([[1.0], b.values])[1 : k + 1] ** e
        pre = np.concatenate([[1.0], b.values])[:k] ** e
        q = np.asarray([q_fn(t) for t in tk], dtype=float)
        return float(np.sum((pre - post) * q / _floored(post) ** 2))
    if isinstance(b, WeibullBaseline):
        # substitute u = (lam c)^p: integral = int_0^{(lam y)^p} e * exp(u e) * q(c(u)) du
        # (the substitution absorbs the hazard and stays smooth for any shape p)
        u_max = (b.lam * y_tilde) ** b.p
        if u_max == 0.0:
            return 0.0
        u = 0.5 * u_max * (_GL_NODES + 1.0)
        w = 0.5 * u_max * _GL_WEIGHTS
        c = u ** (1.0 / b.p) / b.lam
        q = np.asarray([q_fn(t) for t in c], dtype=float)
        raw = np.exp(-u * e)
        integrand = e * q * raw / _floored(raw) ** 2
        return float(np.sum(w * integrand))
    if isinstance(b, UniformBaseline):
        upper = min(y_tilde, b.hi)
        if upper <= b.lo:
            return 0.0
        c = 0.5 * (upper - b.lo) * (_GL_NODES + 1.0) + b.lo
        w = 0.5 * (upper - b.lo) * _GL_WEIGHTS
        base = (b.hi - c) / (b.hi - b.lo)
        dens = e * base ** (e - 1.0) / (b.hi - b.lo)
        q = np.asarray([q_fn(t) for t in c], dtype=float)
        integrand = q * dens / _floored(base**e) ** 2
        return float(np.sum(w * integrand))
    raise TypeError(f"unsupported baseline {type(b).__name__}")


def correction_integral_batch(g_model: CoxModel, f_model: CoxModel, X, y_tilde):
    """Vectorized correction integral with q(c) = conditional tail mean of f_model.

    Tail means are only demanded (and positivity only enforced) at points that
    actually carry censoring mass below each row's y_tilde.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y_tilde, dtype=float)
    e_g = g_model.risk(X)
    b = g_model.baseline
    if isinstance(b, StepBaseline):
        tg = b.times
        padded = np.concatenate([[1.0], b.values])
        post = padded[1:][None, :] ** e_g[:, None]
        pre = padded[:-1][None, :] ** e_g[:, None]
        mask = tg[None, :] <= y[:, None]
        clipped = np.minimum(tg[None, :], y[:, None])  # keep unused evaluations in-range
        q, violated = _tail_mean_parts(f_model, clipped.T, X)
        _raise_if_masked(violated.T, mask)
        terms = np.where(mask, (pre - post) * q.T / _floored(post) ** 2, 0.0)
        return terms.sum(axis=1)
    if isinstance(b, WeibullBaseline):
        # u = (lam c)^p substitution; see correction_integral
        u_max = (b.lam * y) ** b.p
        u = 0.5 * u_max[None, :] * (_GL_NODES[:, None] + 1.0)
        w = 0.5 * u_max[None, :] * _GL_WEIGHTS[:, None]
        c = u ** (1.0 / b.p) / b.lam
        q, violated = _tail_mean_parts(f_model, c, X)
        _raise_if_masked(violated, w > 0)
        raw = np.exp(-u * e_g[None, :])
        integrand = e_g[None, :] * q * raw / _floored(raw) ** 2
        return np.sum(w * integrand, axis=0)
    if isinstance(b, UniformBaseline):
        upper = np.clip(y, None, b.hi)
        span = np.clip(upper - b.lo, 0.0, None)
        c = b.lo + 0.5 * span[None, :] * (_GL_NODES[:, None] + 1.0)
        w = 0.5 * span[None, :] * _GL_WEIGHTS[:, None]
        base = (b.hi - c) / (b.hi - b.lo)
        dens = e_g[None, :] * base ** (e_g[None, :] - 1.0) / (b.hi - b.lo)
        q, violated = _tail_mean_parts(f_model, c, X)
        _raise_if_masked(violated, w > 0)
        integrand = q * dens / _floored(base ** e_g[None, :]) ** 2
        return np.sum(w * integrand, axis=0)
    raise TypeError(f"unsupported baseline {type(b).__name__}")


def _raise_if_masked(violated, mask):
    if np.any(violated & mask):
        raise SupportError(
            f"conditional tail mean requested where survival < {EPS_SURV:g}: support violation"
        )


# ---------------------------------------------------------------------------
# partial-likelihood fitting


def _jitter_times(time):
    """Deterministic rank * 1e-9 jitter so event times are tie-free."""
    order = np.argsort(time, kind="stable")
    out = np.asarray(time, dtype=float).copy()
    out[order] += np.arange(time.size) * 1e-9
    return out


def _partial_lik_terms(X, time, event, beta):
    """Log partial likelihood, gradient and Hessian (Breslow risk sets)."""
    order = np.argsort(-time, kind="stable")
    Xs, ev = X[order], event[order].astype(bool)
    lp = Xs @ beta
    shift = lp.max() if lp.size else 0.0
    w = np.exp(lp - shift)
    cw = np.cumsum(w)
    cwx = np.cumsum(Xs * w[:, None], axis=0)
    cwxx = np.cumsum(Xs[:, :, None] * Xs[:, None, :] * w[:, None, None], axis=0)
    d = cw[ev]
    xbar = cwx[ev] / d[:, None]
    ll = float(np.sum(lp[ev] - shift - np.log(d)))
    grad = np.sum(Xs[ev] - xbar, axis=0)
    hess = -(np.sum(cwxx[ev] / d[:, None, None], axis=0) - xbar.T @ xbar)
    return ll, grad, hess


def fit_cox(data, *, max_iter=100, tol=1e-8, ridge=0.0):
    """Fit a proportional-hazards model by Newton-Raphson on the partial likelihood.

    `data` is (X, time, event_flag) arrays or an iterable of such triples per
    record.  Returns a `CoxModel` whose baseline is the Breslow step estimate
    exp(-H0) at the observed event times.  Constant covariate columns are
    absorbed by the baseline and get coefficient zero.
    """
    if isinstance(data, tuple) and len(data) == 3:
        X, time, event = data
    else:
        rows = list(data)
        X = np.asarray([r[0] for r in rows], dtype=float)
        time = np.asarray([r[1] for r in rows], dtype=float)
        event = np.asarray([r[2] for r in rows], dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    if event.sum() < 2:
        raise ValueError("partial-likelihood fit needs at least 2 events")
    time = _jitter_times(time)

    var = X.var(axis=0)
    free = var > 0.0
    Xf = X[:, free]
    beta = np.zeros(Xf.shape[1])
    ll, grad, hess = _partial_lik_terms(Xf, time, event, beta)
    for _ in range(max_iter):
        gnorm = np.max(np.abs(grad)) if grad.size else 0.0
        if gnorm < tol:
            break
        H = hess - ridge * np.eye(len(beta))
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            raise ConvergenceError(
                "singular Hessian in partial-likelihood fit; consider a small ridge"
            ) from None
        # step halving keeps the log partial likelihood nondecreasing
        # (up to float noise, which scales with the likelihood magnitude)
        slack = 1e-10 * max(1.0, abs(ll))
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            ll_new, grad_new, hess_new = _partial_lik_terms(Xf, time, event, cand)
            if ll_new >= ll - slack:
                break
            scale *= 0.5
        beta, ll, grad, hess = cand, ll_new, grad_new, hess_new
    else:
        raise ConvergenceError(
            f"partial-likelihood Newton did not converge; last gradient norm {np.max(np.abs(grad)):.3e}"
        )

    # Breslow cumulative hazard at the (jittered) event times
    order = np.argsort(time, kind="stable")
    ts, Xs, ev = time[order], Xf[order], event[order].astype(bool)
    lp = Xs @ beta
    shift = lp.max() if lp.size else 0.0
    at_risk = np.cumsum(np.exp(lp - shift)[::-1])[::-1]
    h0 = np.where(ev, np.exp(-shift) / at_risk, 0.0)
    cum = np.cumsum(h0)[ev]
    baseline = StepBaseline(ts[ev], np.exp(-cum))

    full_beta = np.zeros(X.shape[1])
    full_beta[free] = beta
    return CoxModel(baseline, full_beta)
