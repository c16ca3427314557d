"""Closed-form bound engine for the four ES variants.

Every variant reduces to the same skeleton once a handful of per-channel
quantities are known:

* ``rate_M`` and ``dim``: exponent ``exp(rate_M * dim)`` and the worst delay;
* ``wterm``: the disturbance contribution inside the bracket;
* ``g``/``c``: the epsilon-proportional inner and outer offsets;
* ``decay``: rate of the exponential tail of the envelope.

With these, ``Phi2 = exp(rate_M dim) (sigma0 + g + wterm) + c - sigma`` and the
ultimate bound is ``exp(rate_M dim) wterm + c`` for all variants.
"""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np

from .core_model import INV_E, ValidatedProblem, Variant, backmap_box, problem_to_dict
from .dither import commensurate_epsilon_grid
from .errors import (
    Infeasible,
    InfeasibleAtZero,
    InvalidParameter,
    NoGridPointBelow,
    NoRoot,
    Stalled,
)

EPS_LO = 1e-6


# ---------------------------------------------------------------------------
# Internal parameter bundle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Setup:
    variant: Variant
    hb: np.ndarray      # |h_bar_i| (nD) or h_M (1D)
    hm: np.ndarray      # curvature used for the decay rate
    k: np.ndarray
    a: np.ndarray
    s0: np.ndarray
    s: np.ndarray
    qm: float
    kappa: float
    mu: float
    dbar: np.ndarray

    @property
    def n(self) -> int:
        return self.k.size


def _setup(p: ValidatedProblem, sigma0=None, sigma=None, kappa=None, mu=None) -> _Setup:
    v = p.variant
    if v.single_var:
        hb = np.array([p.map.h_M], dtype=float)
        hm = np.array([p.map.h_m], dtype=float)
    else:
        hb = np.abs(p.diag.h_bar_diag)
        hm = hb
    return _Setup(
        variant=v, hb=hb, hm=hm, k=np.asarray(p.tuning.k, float), a=np.asarray(p.tuning.a, float),
        s0=np.asarray(p.tuning.sigma0_bar if sigma0 is None else sigma0, float),
        s=np.asarray(p.tuning.sigma_bar if sigma is None else sigma, float),
        qm=float(p.map.q_star_max), kappa=float(p.map.kappa if kappa is None else kappa),
        mu=float(p.delays.mu if mu is None else mu), dbar=np.asarray(p.delays.d_bar, float),
    )


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundConstants:
    variant: str
    delta1: Optional[float] = None
    delta2: Optional[float] = None
    deltabar1: Optional[float] = None
    deltabar2: Optional[float] = None
    deltatilde1: Optional[float] = None
    deltatilde2: Optional[float] = None
    delta_1d: Optional[float] = None


def _delta1(st: _Setup) -> float:
    aa = np.abs(st.a)
    S = math.sqrt(float(np.sum(st.s ** 2)))
    A = math.sqrt(float(np.sum(st.a ** 2)))
    return st.qm + float(np.sum(st.hb / 2 * (st.s + aa) ** 2)) + st.kappa / 2 * (S + A) ** 2


def _coupling_sums(st: _Setup):
    aa = np.abs(st.a)
    khb = np.abs(st.k) * st.hb
    S = math.sqrt(float(np.sum(st.s ** 2)))
    KA = math.sqrt(float(np.sum(st.k ** 2 / st.a ** 2)))
    first = float(np.sum(khb * st.s / aa)) + st.kappa * S * KA
    second = float(np.sum(khb)) + st.kappa * S * KA
    return first, second


def _constants(st: _Setup) -> BoundConstants:
    v = st.variant
    if v.single_var:
        ak, aa = abs(st.k[0]), abs(st.a[0])
        d = 2 * ak / aa * (st.qm + st.hb[0] / 2 * (st.s[0] + aa) ** 2)
        return BoundConstants(v.value, delta_1d=float(d))
    d1 = _delta1(st)
    f1, f2 = _coupling_sums(st)
    if v is Variant.SAMPLED:
        c = (2 ** (st.n - 1) + 1) / 2 ** st.n * d1
        return BoundConstants(v.value, delta1=d1, deltatilde1=c * f1, deltatilde2=c * f2)
    j = np.arange(1, st.n + 1)
    aa = np.abs(st.a)
    S = math.sqrt(float(np.sum(st.s ** 2)))
    A = math.sqrt(float(np.sum(st.a ** 2)))
    JA = math.sqrt(float(np.sum(j ** 2 * st.a ** 2)))
    mu = st.mu
    d2 = 4 * math.pi * float(np.sum(np.abs(j * st.hb * st.a) * (aa + math.pi * mu * np.abs(j * st.a) + st.s)))
    d2 += 4 * math.pi * st.kappa * JA * (A + math.pi * mu * JA + S)
    c = 2 * (1 + 4 * mu) * d1
    return BoundConstants(v.value, delta1=d1, delta2=d2, deltabar1=c * f1, deltabar2=c * f2)


@dataclass(frozen=True)
class _Terms:
    rate_M: np.ndarray
    decay: np.ndarray
    dim: np.ndarray
    t_start: float
    w: np.ndarray
    wterm: np.ndarray
    g: np.ndarray
    c: np.ndarray
    first: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    ub: np.ndarray


def _terms(st: _Setup, eps: float, consts: Optional[BoundConstants] = None) -> _Terms:
    v = st.variant
    bc = consts or _constants(st)
    ak = np.abs(st.k)
    aa = np.abs(st.a)
    if v.single_var:
        d = bc.delta_1d
        rate_M = ak * st.hb
        decay = ak * st.hm
        if v is Variant.SV_CONTINUOUS:
            w = eps * (aa + (2 + 8 * st.mu) * (st.s + aa)) * d / (2 * aa)
            w = w + 4 * math.pi * st.mu * (aa + math.pi * st.mu * aa + st.s)
            dim = st.dbar + st.mu * eps
            t_start = float(dim[0])
            g, c, first = 1.5 * eps * d, 0.5 * eps * d, eps * d
        else:
            w = eps * d / 4 * (3 + 2 * st.s / aa)
            dim = st.dbar + eps / 2
            t_start = float(st.dbar[0])
            g, c, first = 0.75 * eps * d, 0.25 * eps * d, 0.5 * eps * d
        wterm = w
        g, c, first = (np.full(1, x) for x in (g, c, first))
    else:
        d1 = bc.delta1
        kh = ak * st.hb
        rate_M = decay = kh
        S = math.sqrt(float(np.sum(st.s ** 2)))
        base = eps * ak * d1 / aa
        if v is Variant.CONTINUOUS:
            w = eps * ak / aa * (kh * d1 + bc.deltabar1 + bc.deltabar2)
            w = w + st.mu * ak / aa * bc.delta2 + st.kappa * ak * S
            dim = st.dbar + st.mu * eps
            t_start = float(np.max(dim))
            g, c, first = 3 * base, base, 2 * base
        else:
            w = eps * ak / aa * (kh / 2 * d1 + bc.deltatilde1 + bc.deltatilde2) + st.kappa * ak * S
            dim = st.dbar + eps / 2 ** st.n
            t_start = float(np.max(st.dbar))
            g, c, first = 1.5 * base, 0.5 * base, base
        wterm = w / kh
    ex = np.exp(rate_M * dim)
    phi1 = rate_M * dim - INV_E
    phi2 = ex * (st.s0 + g + wterm) + c - st.s
    ub = ex * wterm + c
    return _Terms(rate_M, decay, dim, t_start, w, wterm, g, c, first, phi1, phi2, ub)


def _feasible(t: _Terms) -> bool:
    return bool(np.all(t.phi1 <= 0) and np.all(t.phi2 < 0))


# ---------------------------------------------------------------------------
# Public formula evaluations
# ---------------------------------------------------------------------------

def bound_constants(problem: ValidatedProblem) -> BoundConstants:
    return _constants(_setup(problem))


def disturbance_bound(problem: ValidatedProblem, eps: float) -> np.ndarray:
    """Per-channel ``W_i`` at ``eps``."""
    return _terms(_setup(problem), eps).w


def disturbance_coefficients(problem: ValidatedProblem):
    """``(slope, offset)`` with ``W(eps) = slope * eps + offset``."""
    st = _setup(problem)
    off = _terms(st, 0.0).w
    slope = _terms(st, 1.0).w - off
    return slope, off


def stability_conditions(problem: ValidatedProblem, eps: float):
    t = _terms(_setup(problem), eps)
    return t.phi1, t.phi2


def is_feasible(problem: ValidatedProblem, eps: float) -> bool:
    return _feasible(_terms(_setup(problem), eps))


# ---------------------------------------------------------------------------
# epsilon* search
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpsStar:
    eps_star: float
    raw: float
    q: Optional[int]
    monotone_verified: bool
    phi1: np.ndarray
    phi2: np.ndarray

    @property
    def omega_star(self) -> float:
        return 2 * math.pi / self.eps_star


def _search_eps(st: _Setup, lo: float = EPS_LO, hi: Optional[float] = None,
                iters: int = 60, rtol: float = 1e-12) -> float:
    consts = _constants(st)
    feas = lambda e: _feasible(_terms(st, e, consts))
    lim = _terms(st, 0.0, consts)
    if not feas(0.0) or not feas(lo):
        bad = np.flatnonzero((lim.phi1 > 0) | (lim.phi2 >= 0))
        if bad.size == 0:
            bad = np.arange(st.n)
        raise InfeasibleAtZero(bad, lim.phi2[bad])
    hi = 10 * float(np.max(st.dbar)) if hi is None else hi
    if feas(hi):
        return hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if feas(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * hi:
            break
    return lo


def find_eps_star(problem: ValidatedProblem, snap_to_grid: bool = False) -> EpsStar:
    """Largest epsilon with ``Phi1 <= 0`` and ``Phi2 < 0`` on every channel."""
    st = _setup(problem)
    raw = _search_eps(st)
    probes = np.linspace(raw / 16, raw, 16)
    monotone = all(_feasible(_terms(st, e)) for e in probes)
    if not monotone:
        warnings.warn("feasible set in epsilon is not an interval below eps*", RuntimeWarning)
    eps, q = raw, None
    if snap_to_grid:
        grid = commensurate_epsilon_grid(problem.delays, problem.variant)
        q, eps = grid.largest_below(raw)
        if eps < EPS_LO:
            raise NoGridPointBelow(f"no grid point between {EPS_LO} and {raw}")
    t = _terms(st, eps)
    return EpsStar(eps, raw, q, monotone, t.phi1, t.phi2)


def max_kappa(problem: ValidatedProblem, eps: float, tol: float = 1e-10) -> float:
    """Largest Hessian uncertainty bound for which the conditions hold at ``eps``."""
    if problem.variant.single_var:
        raise InvalidParameter("kappa search applies to the multi-variable variants")
    st = _setup(problem)
    feas = lambda kap: _feasible(_terms(replace(st, kappa=kap), eps))
    if not feas(0.0):
        raise Infeasible(f"infeasible at eps={eps} even with kappa = 0")
    lo, hi = 0.0, 1.0
    while feas(hi):
        lo, hi = hi, 2 * hi
        if hi > 1e6:
            return math.inf
    while hi - lo > tol * max(hi, 1.0):
        mid = 0.5 * (lo + hi)
        if feas(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# Ultimate bounds and refinement
# ---------------------------------------------------------------------------

def ultimate_box(problem: ValidatedProblem, eps: float):
    """``(Omega or Theta per channel, back-mapped B)`` at ``eps``."""
    t = _terms(_setup(problem), eps)
    if not _feasible(t):
        raise Infeasible(f"conditions do not hold at eps={eps}")
    return t.ub, backmap_box(t.ub, problem.diag)


@dataclass(frozen=True)
class RefinementStep:
    sigma0_bar: np.ndarray
    sigma_bar: np.ndarray
    bound: np.ndarray


@dataclass(frozen=True)
class RefinementResult:
    eps: float
    beta: float
    gamma: float
    mode: str
    steps: List[RefinementStep]
    final: np.ndarray
    backmapped: np.ndarray

    @property
    def trail(self) -> List[np.ndarray]:
        return [s.bound for s in self.steps]


def _least_fixed_point(st: _Setup, eps: float, max_iter: int = 1_000_000) -> np.ndarray:
    # sigma -> sigma + Phi2(sigma) is increasing in every sigma_j, so the
    # iteration from sigma0 rises monotonically to the least solution.
    consts_of = _constants
    s = np.array(st.s0, dtype=float)
    cap = 1e3 * max(float(np.max(st.s0)), 1e-3)
    for _ in range(max_iter):
        t = _terms(replace(st, s=s), eps, consts_of(replace(st, s=s)))
        new = t.phi2 + s
        if np.any(new > cap) or not np.all(np.isfinite(new)):
            raise NoRoot(f"Phi2 = 0 has no solution below {cap:g} at eps={eps}")
        if np.max(np.abs(new - s)) <= 1e-14 * max(1.0, float(np.max(s))):
            return new
        s = new
    raise NoRoot(f"fixed-point iteration did not settle at eps={eps}")


def _least_common_root(st: _Setup, eps: float) -> np.ndarray:
    lo = float(np.max(st.s0)) * (1 + 1e-12)
    cap = 1e3 * max(float(np.max(st.s0)), 1e-3)
    g = lambda x: float(np.max(_terms(replace(st, s=np.full(st.n, x)), eps).phi2))
    xs = np.geomspace(lo, cap, 4000)
    prev = lo
    for x in xs:
        if g(x) < 0:
            a, b = prev, x
            for _ in range(200):
                m = 0.5 * (a + b)
                if g(m) < 0:
                    b = m
                else:
                    a = m
            return np.full(st.n, b)
        prev = x
    raise NoRoot(f"no common sigma solves Phi2 = 0 at eps={eps}")


def refine_ultimate_bound(problem: ValidatedProblem, eps: float, beta: float = 1e-3,
                          gamma: float = 1e-3, mode: str = "vector",
                          max_steps: int = 100) -> RefinementResult:
    """Iteratively shrink the ultimate bound by re-seeding the initial radii.

    ``mode="vector"`` solves ``Phi2_i = 0`` for a per-channel radius vector
    (least solution); ``mode="common"`` restricts to a common scalar radius.
    """
    if mode not in ("vector", "common"):
        raise InvalidParameter("mode must be 'vector' or 'common'")
    st = _setup(problem)
    if not _feasible(_terms(st, eps)):
        raise Infeasible(f"conditions do not hold at eps={eps}")
    if not (0 < beta < float(np.min(st.s0))) or gamma <= 0:
        raise InvalidParameter("need 0 < beta < min sigma0_bar and gamma > 0")
    s0 = np.array(st.s0, dtype=float)
    steps: List[RefinementStep] = []
    prev = None
    for _ in range(max_steps):
        cur = replace(st, s0=s0)
        s = _least_fixed_point(cur, eps) if mode == "vector" else _least_common_root(cur, eps)
        bound = _terms(replace(cur, s=s), eps).ub
        steps.append(RefinementStep(s0.copy(), s.copy(), bound.copy()))
        if prev is not None and np.all(prev - bound < gamma):
            break
        reset = bound < s0 - beta
        if not np.any(reset):
            break
        s0 = np.where(reset, bound + beta, s0)
        prev = bound
    else:
        raise Stalled(f"refinement did not stop within {max_steps} steps")
    final = steps[-1].bound
    return RefinementResult(eps, beta, gamma, mode, steps, final, backmap_box(final, problem.diag))


# ---------------------------------------------------------------------------
# Envelope and finite time
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Three-regime transient bound, one per channel."""

    eps: float
    t_start: float
    x0: np.ndarray
    first: np.ndarray
    middle: np.ndarray
    t_mid_end: np.ndarray
    decay: np.ndarray
    tail_gain: np.ndarray
    ultimate: np.ndarray

    def __call__(self, t) -> np.ndarray:
        """Envelope values with shape ``t.shape + (n,)``; equals ``x0`` before control starts."""
        t = np.asarray(t, dtype=float)[..., None]
        seg3 = np.exp(-self.decay * (t - self.t_mid_end)) * self.tail_gain + self.ultimate
        out = np.where(t < self.t_start + self.eps, self.x0 + self.first,
                       np.where(t <= self.t_mid_end, self.middle, seg3))
        return np.where(t < self.t_start, self.x0, out)

    def joints(self):
        return self.t_start + self.eps, self.t_mid_end

    def describe(self) -> list:
        return [
            {
                "channel": i + 1,
                "t_start": self.t_start,
                "startup": [self.t_start, self.t_start + self.eps, float(self.x0[i] + self.first[i])],
                "pre_settling": [self.t_start + self.eps, float(self.t_mid_end[i]), float(self.middle[i])],
                "tail": {"from": float(self.t_mid_end[i]), "decay": float(self.decay[i]),
                         "gain": float(self.tail_gain[i]), "limit": float(self.ultimate[i])},
            }
            for i in range(self.x0.size)
        ]


def transient_envelope(problem: ValidatedProblem, eps: float, x0=None) -> Envelope:
    """Envelope for an initial error ``|x(D_M)| = x0`` (default: ``sigma0_bar``)."""
    st = _setup(problem)
    t = _terms(st, eps)
    if not _feasible(t):
        raise Infeasible(f"conditions do not hold at eps={eps}")
    x0 = st.s0 if x0 is None else np.asarray(x0, dtype=float)
    inner = x0 + t.g
    middle = (1 + t.rate_M * t.dim) * inner + t.rate_M * t.dim * t.wterm + t.c
    t_mid_end = t.t_start + t.dim + eps
    tail_gain = np.exp(t.rate_M * t.dim) * inner
    return Envelope(eps, t.t_start, x0, t.first, middle, t_mid_end, t.decay, tail_gain, t.ub)


def finite_time(problem: ValidatedProblem, eps: float, delta_omega) -> np.ndarray:
    """Time after which ``|x_i| < bound_i + delta_omega_i`` is guaranteed."""
    st = _setup(problem)
    t = _terms(st, eps)
    dom = np.broadcast_to(np.asarray(delta_omega, dtype=float), t.ub.shape)
    if np.any(dom <= 0):
        raise InvalidParameter("delta_omega must be positive")
    xi = st.s0 + t.g
    log_term = np.maximum(0.0, np.log(xi / dom))
    return t.t_start + t.dim + eps + (t.rate_M * t.dim + log_term) / t.decay


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _plain(x):
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, list):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, (np.floating, np.integer)):
        return _plain(x.item())
    return x


@dataclass
class AnalysisReport:
    variant: str
    constants: BoundConstants
    epsilon: Optional[float]
    feasible: bool
    w: Optional[list]
    phi1: Optional[list]
    phi2: Optional[list]
    eps_star: Optional[float]
    omega_star: Optional[float]
    delta_rates: list
    ultimate: Optional[list]
    backmapped: Optional[list]
    envelope: Optional[list]
    delta_omega: Optional[list]
    finite_times: Optional[list]
    refinement: Optional[list]
    refined_bound: Optional[list]
    refined_backmapped: Optional[list]
    messages: List[str] = field(default_factory=list)
    problem: Optional[dict] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["constants"] = asdict(self.constants)
        return _plain(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> dict:
        row = {"variant": self.variant, "epsilon": self.epsilon, "feasible": self.feasible,
               "eps_star": self.eps_star, "omega_star": self.omega_star}
        for name in ("delta1", "delta2", "deltabar1", "deltabar2", "deltatilde1", "deltatilde2", "delta_1d"):
            row[name] = getattr(self.constants, name)
        for key in ("delta_rates", "w", "phi1", "phi2", "ultimate", "backmapped", "finite_times",
                    "refined_bound", "refined_backmapped"):
            vals = getattr(self, key) or []
            for i, v in enumerate(vals):
                row[f"{key}_{i + 1}"] = v
        return _plain(row)

    def to_csv(self) -> str:
        row = self.csv_row()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                         for k, v in row.items()})
        return buf.getvalue()


def analyze(problem: ValidatedProblem, eps: Optional[float] = None, beta: float = 1e-3,
            gamma: float = 1e-3, delta_omega_frac: float = 0.1, refine: bool = True) -> AnalysisReport:
    """Full report at ``eps`` (default: the tuning epsilon, else eps*)."""
    st = _setup(problem)
    consts = _constants(st)
    msgs: List[str] = []
    try:
        es = find_eps_star(problem)
        eps_star, omega_star = es.eps_star, es.omega_star
    except InfeasibleAtZero as exc:
        eps_star = omega_star = None
        msgs.append(str(exc))
    if eps is None:
        eps = problem.tuning.epsilon if problem.tuning.epsilon is not None else eps_star
    report = AnalysisReport(
        variant=problem.variant.value, constants=consts, epsilon=eps, feasible=False,
        w=None, phi1=None, phi2=None, eps_star=eps_star, omega_star=omega_star,
        delta_rates=list(problem.delta_rates), ultimate=None, backmapped=None, envelope=None,
        delta_omega=None, finite_times=None, refinement=None, refined_bound=None,
        refined_backmapped=None, messages=msgs, problem=problem_to_dict(problem),
    )
    if eps is None:
        return report
    t = _terms(st, eps, consts)
    report.w, report.phi1, report.phi2 = list(t.w), list(t.phi1), list(t.phi2)
    report.feasible = _feasible(t)
    if not report.feasible:
        msgs.append(f"conditions do not hold at eps={eps:g}")
        return report
    report.ultimate = list(t.ub)
    report.backmapped = list(backmap_box(t.ub, problem.diag))
    report.envelope = transient_envelope(problem, eps).describe()
    dom = delta_omega_frac * t.ub
    report.delta_omega = list(dom)
    report.finite_times = list(finite_time(problem, eps, dom))
    if refine:
        try:
            ref = refine_ultimate_bound(problem, eps, beta, gamma)
            report.refinement = [
                {"sigma0_bar": list(s.sigma0_bar), "sigma_bar": list(s.sigma_bar), "bound": list(s.bound)}
                for s in ref.steps
            ]
            report.refined_bound = list(ref.final)
            report.refined_backmapped = list(ref.backmapped)
        except (InvalidParameter, Stalled, NoRoot) as exc:
            msgs.append(f"refinement skipped: {exc}")
    return report
