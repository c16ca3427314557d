"""Closed-loop simulation of delayed ES, fundamental solutions and averaged-state diagnostics.

The continuous loop is integrated in the diagonal frame,

    d/dt vartheta_hat_i(t) = k_i M_i(t) Q(theta(t - D_i(t))),   t >= D_M,

with ``theta = U^T (vartheta_hat + S)`` and ``D_i(t) = Dbar_i + dD(t)``.  Its
right-hand side only reads the past, so each RK4 step collapses to Simpson's
rule and whole blocks shorter than the smallest delay are evaluated at once.

The sampled loop holds ``k_i M_i(s_p) y(s_p)`` on ``[s_p + D_i, s_{p+1} + D_i)``;
the estimate is piecewise linear and is integrated exactly.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .analysis import bound_constants, disturbance_bound
from .core_model import ValidatedProblem, Variant
from .dither import commensurate_epsilon_grid, sine_bank, square_bank
from .errors import (
    DelayBoundViolation,
    GridMismatch,
    HistoryUnderflow,
    InvalidParameter,
    MissingField,
    StepNotDivisor,
    StepTooCoarse,
    TraceTooSparse,
)

INV_E = math.exp(-1.0)


@dataclass(frozen=True)
class SimConfig:
    """Run settings.  ``step`` defaults to ``epsilon / 400``."""

    epsilon: float
    horizon: float
    init_theta_hat: np.ndarray
    step: Optional[float] = None
    record_stride: int = 2
    delta_d: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "init_theta_hat",
                           np.atleast_1d(np.asarray(self.init_theta_hat, dtype=float)).copy())
        if not self.epsilon > 0 or not self.horizon > 0:
            raise InvalidParameter("epsilon and horizon must be positive")
        if int(self.record_stride) < 1:
            raise InvalidParameter("record_stride must be a positive integer")

    @property
    def h(self) -> float:
        return self.step if self.step is not None else self.epsilon / 400.0


@dataclass(frozen=True)
class SimTrace:
    times: np.ndarray
    vartheta_hat: np.ndarray
    y: np.ndarray
    delays_applied: np.ndarray
    u: np.ndarray
    theta_star: np.ndarray
    epsilon: float
    step: float
    variant: Variant
    events: dict

    @cached_property
    def theta_hat(self) -> np.ndarray:
        return self.vartheta_hat @ self.u

    @cached_property
    def theta_tilde(self) -> np.ndarray:
        return self.theta_hat - self.theta_star

    @cached_property
    def vartheta_tilde(self) -> np.ndarray:
        return self.vartheta_hat - self.u @ self.theta_star

    @property
    def n(self) -> int:
        return self.vartheta_hat.shape[1]

    def csv_header(self) -> list:
        n = self.n
        return (["t"] + [f"theta_hat_{i + 1}" for i in range(n)]
                + [f"theta_tilde_{i + 1}" for i in range(n)] + ["y"]
                + [f"D_{i + 1}" for i in range(n)])

    def to_csv(self, path=None) -> Optional[str]:
        """Write the trace with round-trip float formatting; returns text if no path."""
        data = np.column_stack([self.times, self.theta_hat, self.theta_tilde, self.y, self.delays_applied])
        buf = io.StringIO()
        np.savetxt(buf, data, fmt="%.17g", delimiter=",", header=",".join(self.csv_header()), comments="")
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
        return None


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _truth(problem: ValidatedProblem):
    m = problem.map
    if m.q_star is None or m.theta_star is None:
        raise MissingField("simulation needs ground truth q_star and theta_star")
    return m


def _delta_d(problem: ValidatedProblem, cfg: SimConfig):
    rho = problem.delays.rho(cfg.epsilon)
    fn = cfg.delta_d or problem.delays.delta_d or (lambda t: rho * np.sin(t))

    def checked(t):
        d = np.broadcast_to(np.asarray(fn(t), dtype=float), np.shape(t))
        if np.any(np.abs(d) > rho * (1 + 1e-9) + 1e-15):
            raise DelayBoundViolation(f"|dD(t)| exceeds rho = {rho:g}")
        return d

    return checked, rho


def _require_grid(problem: ValidatedProblem, eps: float):
    if problem.delays.single_delay():
        return
    grid = commensurate_epsilon_grid(problem.delays, problem.variant)
    if grid.q_for(eps) is None:
        raise GridMismatch(f"epsilon={eps:g} is not of the form {grid.base:g}/q")


def _check_horizon(problem: ValidatedProblem, cfg: SimConfig):
    v = problem.variant
    dim = problem.delays.d_im(cfg.epsilon, v)
    need = problem.delays.d_m(cfg.epsilon, v) + 2 * float(np.max(dim)) + cfg.epsilon
    if cfg.horizon <= need:
        raise InvalidParameter(f"horizon must exceed {need:g}")


def _interp(buf: np.ndarray, base: int, h: float, s: np.ndarray) -> np.ndarray:
    """Linear interpolation of a uniform history (row j at time (base+j)h)."""
    x = s / h - base
    if x.size and (x.min() < -1e-9 or x.max() > buf.shape[0] - 1 + 1e-9):
        raise HistoryUnderflow("delayed read outside the stored history")
    i0 = np.clip(np.floor(x).astype(np.int64), 0, buf.shape[0] - 2)
    w = (x - i0)[:, None]
    return (1 - w) * buf[i0] + w * buf[i0 + 1]


# ---------------------------------------------------------------------------
# Continuous loop
# ---------------------------------------------------------------------------

def simulate_continuous_es(problem: ValidatedProblem, cfg: SimConfig) -> SimTrace:
    v = problem.variant
    if v.sampled:
        raise InvalidParameter("use simulate_sampled_es for the sampled variants")
    m = _truth(problem)
    eps, h = cfg.epsilon, cfg.h
    if h > eps / 100:
        raise StepTooCoarse(f"step {h:g} exceeds epsilon/100 = {eps / 100:g}")
    _check_horizon(problem, cfg)
    _require_grid(problem, eps)
    delays = problem.delays
    n = problem.n
    dbar = delays.d_bar
    phase = dbar if delays.single_delay() else np.zeros(n)
    bank = sine_bank(problem.tuning.a, eps, phase_advance=phase)
    dd, rho = _delta_d(problem, cfg)
    d_m = delays.d_m(eps, v)
    u = problem.diag.u
    k = problem.tuning.k
    v0 = u @ cfg.init_theta_hat

    block = int(math.floor((float(np.min(dbar)) - rho) / h)) - 2
    if block < 1:
        raise StepTooCoarse("step is not small compared with the smallest delay")
    keep = int(math.ceil((float(np.max(dbar)) + rho) / h)) + 3
    n_steps = int(math.ceil(cfg.horizon / h - 1e-9))
    stride = int(cfg.record_stride)
    rec_idx = np.arange(0, n_steps + 1, stride)
    rec = np.empty((rec_idx.size, n))

    def rhs(tau, buf, base):
        out = np.zeros((tau.size, n))
        on = tau >= d_m - 1e-12 * max(d_m, 1.0)
        if not np.any(on):
            return out
        ta = tau[on]
        dD = dd(ta)
        demod = bank.demod_all(ta)
        for i in range(n):
            s = ta - (dbar[i] + dD)
            if np.any(s < -1e-12):
                raise HistoryUnderflow("delayed time before the initial instant")
            arg = _interp(buf, base, h, np.maximum(s, 0.0)) + bank.probe_all(s)
            out[on, i] = k[i] * demod[:, i] * m.value(arg @ u)
        return out

    j_on = min(int(math.floor(d_m / h + 1e-9)), n_steps)
    buf = np.tile(v0, (keep + 1, 1))
    base = j_on - keep
    rec[rec_idx <= j_on] = v0
    j0 = j_on
    cur = v0.copy()
    while j0 < n_steps:
        j1 = min(j0 + block, n_steps)
        tg = np.arange(j0, j1 + 1) * h
        tm = tg[:-1] + 0.5 * h
        fg = rhs(tg, buf, base)
        fm = rhs(tm, buf, base)
        inc = h / 6.0 * (fg[:-1] + 4.0 * fm + fg[1:])
        if j0 == j_on and d_m > tg[0] + 1e-12:
            # the step containing the control start is integrated from d_m only
            a_, b_ = d_m, tg[1]
            pts = np.array([a_, 0.5 * (a_ + b_), b_])
            fs = rhs(pts, buf, base)
            inc[0] = (b_ - a_) / 6.0 * (fs[0] + 4.0 * fs[1] + fs[2])
        vals = cur + np.cumsum(inc, axis=0)
        cur = vals[-1]
        sel = (rec_idx > j0) & (rec_idx <= j1)
        rec[sel] = vals[rec_idx[sel] - j0 - 1]
        buf = np.vstack([buf, vals])[-(keep + block + 2):]
        base = j1 + 1 - buf.shape[0]
        j0 = j1

    times = rec_idx * h
    y = m.value((rec + sine_bank(problem.tuning.a, eps, phase).probe_all(times)) @ u)
    d_applied = dbar + dd(times)[:, None]
    return SimTrace(times, rec, y, d_applied, np.array(u), np.array(m.theta_star), eps, h, v,
                    {"control_start": d_m, "rho": rho})


# ---------------------------------------------------------------------------
# Sampled loop
# ---------------------------------------------------------------------------

def _hold_integral(t, c, ts, rates, cum):
    """Integral of the held rates at times ``t`` for one channel."""
    x = t / ts - c
    p = np.floor(x + 1e-12).astype(np.int64)
    p = np.minimum(p, rates.size - 1)
    ok = p >= 0
    pc = np.maximum(p, 0)
    frac = np.clip(x - pc, 0.0, None)
    return np.where(ok, cum[pc] + rates[pc] * frac * ts, 0.0)


def simulate_sampled_es(problem: ValidatedProblem, cfg: SimConfig) -> SimTrace:
    v = problem.variant
    if not v.sampled:
        raise InvalidParameter("use simulate_continuous_es for the continuous variants")
    m = _truth(problem)
    eps, h = cfg.epsilon, cfg.h
    n = problem.n
    ts = eps / 2 ** n
    ratio = ts / h
    if abs(ratio - round(ratio)) > 1e-9 * ratio or round(ratio) < 1:
        raise StepNotDivisor(f"step {h:g} does not divide the sampling period {ts:g}")
    _check_horizon(problem, cfg)
    _require_grid(problem, eps)
    delays = problem.delays
    d = delays.d_bar
    d_m = float(np.max(d))
    c = d / ts
    if np.any(c <= 1e-9):
        raise InvalidParameter("delays must be positive")
    q = np.rint((d_m - d) / ts).astype(np.int64)
    bank = square_bank(problem.tuning.a, eps)
    u = problem.diag.u
    k = problem.tuning.k
    v0 = u @ cfg.init_theta_hat

    n_samples = int(math.ceil(cfg.horizon / ts)) + 2
    rates = np.zeros((n_samples, n))
    cum = np.zeros((n_samples + 1, n))
    block = max(1, int(math.floor(float(np.min(c)) + 1e-9)))
    p0 = 0
    while p0 < n_samples:
        p1 = min(p0 + block, n_samples)
        pp = np.arange(p0, p1)
        t = pp * ts
        vh = v0 + np.column_stack([_hold_integral(t, c[i], ts, rates[:p0, i], cum[:p0 + 1, i])
                                   if p0 > 0 else np.zeros(t.size) for i in range(n)])
        yv = m.value((vh + bank.probe_all(t)) @ u)
        r = k * bank.demod_all(t) * yv[:, None]
        r[pp[:, None] < q[None, :]] = 0.0
        rates[p0:p1] = r
        cum[p0 + 1:p1 + 1] = cum[p0] + np.cumsum(r * ts, axis=0)
        p0 = p1

    stride = int(cfg.record_stride)
    n_steps = int(math.ceil(cfg.horizon / h - 1e-9))
    times = np.arange(0, n_steps + 1, stride) * h
    rec = v0 + np.column_stack([_hold_integral(times, c[i], ts, rates[:, i], cum[:, i]) for i in range(n)])
    y = m.value((rec + bank.probe_all(times)) @ u)
    d_applied = np.tile(d, (times.size, 1))
    events = {
        "control_start": d_m,
        "channel_start": list(q * ts + d),
        "sample_period": ts,
        "sampling_instants": n_samples,
        "waiting_index": [int(x) for x in q],
    }
    return SimTrace(times, rec, y, d_applied, np.array(u), np.array(m.theta_star), eps, h, v, events)


def simulate(problem: ValidatedProblem, cfg: SimConfig) -> SimTrace:
    if problem.variant.sampled:
        return simulate_sampled_es(problem, cfg)
    return simulate_continuous_es(problem, cfg)


# ---------------------------------------------------------------------------
# Fundamental solution of x'(t) = -a x(t - g(t))
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FundamentalSolutionSample:
    a: float
    delay_fn: Callable = field(compare=False)
    s: float
    bound: float
    switch: float
    times: np.ndarray
    values: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        inner = np.interp(t, self.times, self.values)
        return np.where(t < self.s, 0.0, np.where(t < self.switch, 1.0, inner))


def _first_crossing(g, s: float, hi: float) -> float:
    """First ``t >= s`` with ``t - g(t) >= s``."""
    phi = lambda t: t - float(g(t)) - s
    if phi(s) >= 0:
        return s
    grid = np.linspace(s, hi, 2049)
    vals = np.array([phi(t) for t in grid])
    idx = np.flatnonzero(vals >= 0)
    if idx.size == 0:
        raise InvalidParameter("delay never releases the initial step within the horizon")
    lo, up = grid[idx[0] - 1], grid[idx[0]]
    for _ in range(80):
        mid = 0.5 * (lo + up)
        if phi(mid) >= 0:
            up = mid
        else:
            lo = mid
    return up


def fundamental_solution(a: float, delay_fn, s: float = 0.0, horizon: Optional[float] = None,
                         step: Optional[float] = None, bound: Optional[float] = None
                         ) -> FundamentalSolutionSample:
    """``X(t, s)`` by RK4 with cubic Hermite history (zero before ``s``, one at ``s``)."""
    g = delay_fn if callable(delay_fn) else (lambda t, c=float(delay_fn): c)
    if bound is None:
        probe = np.linspace(s, s + 50.0, 5001)
        bound = float(max(g(t) for t in probe))
    L = float(bound)
    if horizon is None:
        horizon = s + max(10 * L, 10.0 / max(abs(a), 1e-9))
    if step is None:
        step = (horizon - s) / 8000.0
    t_sw = _first_crossing(g, s, horizon)
    n = int(math.ceil((horizon - t_sw) / step))
    ts = t_sw + step * np.arange(n + 1)
    xs = np.empty(n + 1)
    ds = np.empty(n + 1)
    xs[0] = 1.0

    def x_at(tau, j):
        # value of x at tau using grid points 0..j (Hermite, extrapolating past j)
        if tau < s:
            return 0.0
        if tau < t_sw:
            return 1.0
        if j == 0:
            return xs[0] + ds[0] * (tau - ts[0])
        i = min(int((tau - t_sw) / step), j - 1)
        h = step
        u = (tau - ts[i]) / h
        h00 = 2 * u ** 3 - 3 * u ** 2 + 1
        h10 = u ** 3 - 2 * u ** 2 + u
        h01 = -2 * u ** 3 + 3 * u ** 2
        h11 = u ** 3 - u ** 2
        return h00 * xs[i] + h10 * h * ds[i] + h01 * xs[i + 1] + h11 * h * ds[i + 1]

    f = lambda t, j: -a * x_at(t - float(g(t)), j)
    ds[0] = f(ts[0], 0)
    for j in range(n):
        t = ts[j]
        k1 = ds[j]
        k2 = k3 = f(t + step / 2, j)
        k4 = f(t + step, j)
        xs[j + 1] = xs[j] + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        ds[j + 1] = k4  # provisional slope, only read when the delay is below one step
        ds[j + 1] = f(ts[j + 1], j + 1)
    times = np.concatenate([[s], ts]) if t_sw > s else ts
    values = np.concatenate([[1.0], xs]) if t_sw > s else xs
    return FundamentalSolutionSample(float(a), g, float(s), L, float(t_sw), times, values)


@dataclass(frozen=True)
class Lemma1Certificate:
    certified: bool
    a_times_bound: float
    positive: bool
    below_one: bool
    below_exponential: bool
    max_violation: float
    first_sign_change: Optional[float]


def certify_fundamental_solution(sample: FundamentalSolutionSample, tol: float = 1e-6,
                                 floor: float = 1e-12) -> Lemma1Certificate:
    """Check positivity and the two-piece exponential bound on the computed trace."""
    t, x = sample.times, sample.values
    a, L, s = sample.a, sample.bound, sample.s
    early = t <= s + L
    late = ~early
    positive = bool(np.all(x > -floor))
    below_one = bool(np.all(x[early] <= 1 + tol))
    env = np.exp(-a * (t[late] - s - L))
    excess = x[late] - env
    below_exp = bool(np.all(excess <= tol))
    viol = float(max(np.max(x[early] - 1, initial=0.0), np.max(excess, initial=0.0),
                     np.max(-x, initial=0.0)))
    sign_change = None
    neg = np.flatnonzero(x < -floor)
    if neg.size:
        j = int(neg[0])
        lo, hi = t[j - 1], t[j]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if np.interp(mid, t, x) > 0:
                lo = mid
            else:
                hi = mid
        sign_change = 0.5 * (lo + hi)
    al = a * L
    ok = al <= INV_E and positive and below_one and below_exp
    return Lemma1Certificate(bool(ok), float(al), positive, below_one, below_exp, viol, sign_change)


# ---------------------------------------------------------------------------
# Averaged-state diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AveragedDiagnostics:
    times: np.ndarray
    g: np.ndarray
    z: np.ndarray
    residual_times: np.ndarray
    residual: np.ndarray
    g_bound: np.ndarray
    w: np.ndarray

    @property
    def g_ok(self) -> bool:
        return bool(np.all(np.max(np.abs(self.g), axis=0) < self.g_bound))

    @property
    def residual_ok(self) -> bool:
        return bool(np.all(np.max(np.abs(self.residual), axis=0) <= 3 * self.w))


def averaged_state_diagnostics(trace: SimTrace, problem: ValidatedProblem,
                               epsilon: Optional[float] = None) -> AveragedDiagnostics:
    """``G_i`` by quadrature over the trace and ``z_i = vartheta_tilde_i - G_i``."""
    if problem.variant.sampled or problem.variant.single_var:
        raise InvalidParameter("diagnostics are defined for the continuous multi-variable variant")
    eps = trace.epsilon if epsilon is None else epsilon
    t = trace.times
    dt = float(t[1] - t[0])
    if eps / dt < 200 - 1e-9:
        raise TraceTooSparse(f"{eps / dt:.1f} samples per epsilon, need at least 200")
    m = problem.map
    n = problem.n
    u = problem.diag.u
    hcal = u @ m.hessian @ u.T
    k = problem.tuning.k
    a = problem.tuning.a
    bank = sine_bank(a, eps)
    delays = problem.delays
    dbar = delays.d_bar
    d_m = delays.d_m(eps, problem.variant)
    vt = trace.vartheta_tilde
    dD = trace.delays_applied - dbar
    demod = bank.demod_all(t)
    s_now = bank.probe_all(t)
    f = np.empty((t.size, n))
    for i in range(n):
        tau_d = np.maximum(t - trace.delays_applied[:, i], 0.0)
        lag = np.column_stack([np.interp(tau_d, t, vt[:, j]) for j in range(n)])
        e = lag + s_now
        qbar = m.q_star + 0.5 * np.einsum("ti,ij,tj->t", e, hcal, e)
        f[:, i] = k[i] * demod[:, i] * qbar
    # cumulative trapezoid sums of f and tau * f
    c0 = np.vstack([np.zeros(n), np.cumsum(0.5 * dt * (f[1:] + f[:-1]), axis=0)])
    tf = t[:, None] * f
    c1 = np.vstack([np.zeros(n), np.cumsum(0.5 * dt * (tf[1:] + tf[:-1]), axis=0)])
    lag_t = t - eps
    c0_lag = np.column_stack([np.interp(lag_t, t, c0[:, i]) for i in range(n)])
    c1_lag = np.column_stack([np.interp(lag_t, t, c1[:, i]) for i in range(n)])
    g = ((c1 - c1_lag) - lag_t[:, None] * (c0 - c0_lag)) / eps
    g[t < d_m + eps] = 0.0
    z = vt - g
    zdot = np.gradient(z, dt, axis=0)
    hb = problem.diag.h_bar_diag
    res = np.empty_like(z)
    for i in range(n):
        tau_d = t - (dbar[i] + dD[:, i])
        res[:, i] = zdot[:, i] - k[i] * hb[i] * np.interp(tau_d, t, z[:, i])
    keep = (t >= d_m + 2 * eps) & (t <= t[-1] - dt)
    consts = bound_constants(problem)
    g_bound = eps * np.abs(k) * consts.delta1 / np.abs(a)
    w = disturbance_bound(problem, eps)
    return AveragedDiagnostics(t, g, z, t[keep], res[keep], g_bound, w)
