"""Problem definition, assumption checks and frame transforms.

The quadratic map ``Q(theta) = Q* + 1/2 (theta - theta*)^T H (theta - theta*)``
is described by :class:`QuadraticMapSpec`, the delays by :class:`DelayProfile`
and the extremum seeking knobs by :class:`TuningConfig`.  :func:`validate_problem`
bundles the three into an immutable :class:`ValidatedProblem` carrying the
orthogonal diagonalization of the nominal Hessian.

Diagonal coordinates are ``vartheta = U theta`` with ``U H_bar U^T`` diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    BoxInverted,
    DimensionMismatch,
    GainInfeasible,
    Indefinite,
    InvalidParameter,
    MissingField,
    NonCommensurateDelays,
    NotHurwitz,
    NotSymmetric,
    SingularAbsMatrix,
)

INV_E = float(np.exp(-1.0))


class Variant(str, Enum):
    CONTINUOUS = "continuous"
    SAMPLED = "sampled"
    SV_CONTINUOUS = "single_var_continuous"
    SV_SAMPLED = "single_var_sampled"

    @property
    def sampled(self) -> bool:
        return self in (Variant.SAMPLED, Variant.SV_SAMPLED)

    @property
    def single_var(self) -> bool:
        return self in (Variant.SV_CONTINUOUS, Variant.SV_SAMPLED)


def _vec(x, n: Optional[int] = None, name: str = "vector") -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float)).copy()
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional")
    if n is not None and arr.size != n:
        raise DimensionMismatch(f"{name} has length {arr.size}, expected {n}")
    arr.setflags(write=False)
    return arr


def _mat(x, n: int, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=float)).copy()
    if arr.shape != (n, n):
        raise DimensionMismatch(f"{name} has shape {arr.shape}, expected {(n, n)}")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticMapSpec:
    """Uncertain quadratic map.

    ``h_m``/``h_M`` are only used by the single-variable variants, which bound
    the curvature by an interval ``h_m <= |h| <= h_M`` instead of ``kappa``.
    ``q_star``, ``theta_star`` and ``delta_h`` are ground truth for simulation.
    """

    n: int
    h_bar: np.ndarray
    kappa: float = 0.0
    q_star_max: float = 0.0
    theta_star_box: Optional[np.ndarray] = None
    q_star: Optional[float] = None
    theta_star: Optional[np.ndarray] = None
    delta_h: Optional[np.ndarray] = None
    h_m: Optional[float] = None
    h_M: Optional[float] = None

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise InvalidParameter("map dimension n must be positive")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "h_bar", _mat(self.h_bar, n, "h_bar"))
        if self.theta_star is not None:
            object.__setattr__(self, "theta_star", _vec(self.theta_star, n, "theta_star"))
        if self.delta_h is not None:
            object.__setattr__(self, "delta_h", _mat(self.delta_h, n, "delta_h"))
        if self.theta_star_box is not None:
            box = np.asarray(self.theta_star_box, dtype=float).reshape(n, 2).copy()
            box.setflags(write=False)
            object.__setattr__(self, "theta_star_box", box)

    @property
    def sigma0(self) -> Optional[np.ndarray]:
        """Per-axis widths of the extremum box."""
        if self.theta_star_box is None:
            return None
        return self.theta_star_box[:, 1] - self.theta_star_box[:, 0]

    @property
    def hessian(self) -> np.ndarray:
        """True Hessian ``H_bar + delta_H`` (``delta_H`` defaults to zero)."""
        if self.delta_h is None:
            return np.array(self.h_bar)
        return self.h_bar + self.delta_h

    def value(self, theta: np.ndarray) -> np.ndarray:
        """Evaluate the true map; ``theta`` has shape ``(..., n)``."""
        if self.q_star is None or self.theta_star is None:
            raise MissingField("map ground truth (q_star, theta_star) is required")
        e = np.asarray(theta, dtype=float) - self.theta_star
        return self.q_star + 0.5 * np.einsum("...i,ij,...j->...", e, self.hessian, e)


@dataclass(frozen=True)
class DelayProfile:
    """Output delay ``D`` (nominal), input delays ``D_i^in`` and multipliers.

    For the sampled variants the constant total delays are ``d_in + d_out``;
    ``d_out = 0`` is allowed there.  ``delta_d`` is the realized uncertainty
    used in simulation; ``None`` means the default ``rho * sin(t)``.
    """

    d_out: float
    d_in: np.ndarray
    m: np.ndarray
    mu: float = 0.0
    delta_d: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)

    def __post_init__(self):
        d_in = _vec(self.d_in, name="d_in")
        m = np.atleast_1d(np.asarray(self.m))
        if m.shape != d_in.shape:
            raise DimensionMismatch("m and d_in must have the same length")
        if np.any(m != np.round(m)) or np.any(m < 1):
            raise InvalidParameter("commensurability multipliers m_i must be positive integers")
        m = m.astype(int)
        m.setflags(write=False)
        object.__setattr__(self, "d_in", d_in)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "d_out", float(self.d_out))
        object.__setattr__(self, "mu", float(self.mu))
        if self.d_out < 0 or np.any(d_in < 0):
            raise InvalidParameter("delays must be nonnegative")
        if self.mu < 0:
            raise InvalidParameter("mu must be nonnegative")
        if np.any(self.d_bar <= 0):
            raise InvalidParameter("total nominal delays must be positive")

    @property
    def n(self) -> int:
        return self.d_in.size

    @property
    def d_bar(self) -> np.ndarray:
        return self.d_in + self.d_out

    def rho(self, eps: float) -> float:
        return self.mu * eps

    def d_im(self, eps: float, variant: Variant) -> np.ndarray:
        """Worst-case delay per channel entering the conditions."""
        if variant.sampled:
            return self.d_bar + eps / 2 ** self.n
        return self.d_bar + self.mu * eps

    def d_m(self, eps: float, variant: Variant) -> float:
        return float(np.max(self.d_im(eps, variant)))

    def is_commensurate(self, rtol: float = 1e-9) -> bool:
        db = self.d_bar
        lhs = np.outer(self.m, db)  # m_i * Dbar_j
        return bool(np.allclose(lhs, lhs.T, rtol=rtol, atol=0.0))

    def single_delay(self) -> bool:
        return bool(np.allclose(self.d_bar, self.d_bar[0], rtol=1e-12, atol=0.0))


@dataclass(frozen=True)
class TuningConfig:
    """Gains, amplitudes, confinement radii, frequency multiplier and epsilon."""

    k: np.ndarray
    a: np.ndarray
    sigma0_bar: np.ndarray
    sigma_bar: np.ndarray
    q: Optional[int] = None
    epsilon: Optional[float] = None

    def __post_init__(self):
        k = _vec(self.k, name="k")
        n = k.size
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "a", _vec(self.a, n, "a"))
        object.__setattr__(self, "sigma0_bar", _vec(self.sigma0_bar, n, "sigma0_bar"))
        object.__setattr__(self, "sigma_bar", _vec(self.sigma_bar, n, "sigma_bar"))
        if np.any(self.a == 0):
            raise InvalidParameter("dither amplitudes must be nonzero")
        if self.q is not None and int(self.q) < 1:
            raise InvalidParameter("frequency multiplier q must be a positive integer")
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvalidParameter("epsilon must be positive")

    @property
    def n(self) -> int:
        return self.k.size


@dataclass(frozen=True)
class Diagonalization:
    """``U`` with orthonormal rows and ``U H_bar U^T = diag(h_bar_diag)``."""

    u: np.ndarray
    h_bar_diag: np.ndarray

    @property
    def b(self) -> np.ndarray:
        """Entries ``b_ij`` of ``U`` used by the back-mapping."""
        return self.u


@dataclass(frozen=True)
class ValidatedProblem:
    map: QuadraticMapSpec
    delays: DelayProfile
    tuning: TuningConfig
    variant: Variant
    diag: Diagonalization
    delta_rates: np.ndarray

    @property
    def n(self) -> int:
        return self.map.n

    def with_tuning(self, **changes) -> "ValidatedProblem":
        """Re-validated copy with some tuning fields replaced."""
        return validate_problem(self.map, self.delays, replace(self.tuning, **changes), self.variant)

    def with_map(self, **changes) -> "ValidatedProblem":
        return validate_problem(replace(self.map, **changes), self.delays, self.tuning, self.variant)

    def with_delays(self, **changes) -> "ValidatedProblem":
        return validate_problem(self.map, replace(self.delays, **changes), self.tuning, self.variant)


# ---------------------------------------------------------------------------
# Eigensolver
# ---------------------------------------------------------------------------

def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns ``(w, v)`` with ``a @ v[:, j] = w[j] * v[:, j]`` (unsorted).
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off < tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    return np.diag(a).copy(), v


def spectral_decompose(h_bar) -> Diagonalization:
    """Orthogonal diagonalization with a fixed order and sign convention.

    Eigenvalues are sorted by descending magnitude (stable for ties) and each
    eigenvector is flipped so that its largest-magnitude entry is positive.
    """
    h = np.atleast_2d(np.asarray(h_bar, dtype=float))
    if h.shape[0] != h.shape[1]:
        raise DimensionMismatch("Hessian must be square")
    scale = max(np.max(np.abs(h)), 1e-300)
    if np.max(np.abs(h - h.T)) > 1e-12 * scale:
        raise NotSymmetric("nominal Hessian is not symmetric")
    h = 0.5 * (h + h.T)
    w, v = jacobi_eigh(h)
    if np.any(w == 0) or not (np.all(w > 0) or np.all(w < 0)):
        raise Indefinite(f"nominal Hessian is not definite (eigenvalues {w})")
    order = np.argsort(-np.abs(w), kind="stable")
    w = w[order]
    u = v[:, order].T.copy()
    for i in range(u.shape[0]):
        j = int(np.argmax(np.abs(u[i])))
        if u[i, j] < 0:
            u[i] = -u[i]
    u.setflags(write=False)
    w.setflags(write=False)
    return Diagonalization(u=u, h_bar_diag=w)


# ---------------------------------------------------------------------------
# Frame transforms
# ---------------------------------------------------------------------------

def to_diag_frame(x, diag: Diagonalization) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != diag.u.shape[0]:
        raise DimensionMismatch("vector length does not match the diagonalization")
    return x @ diag.u.T


def from_diag_frame(x, diag: Diagonalization) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != diag.u.shape[0]:
        raise DimensionMismatch("vector length does not match the diagonalization")
    return x @ diag.u


def backmap_box(per_axis_bounds, diag: Diagonalization) -> np.ndarray:
    """Box in original coordinates: ``B_i = sum_j |b_ji| Omega_j``."""
    om = np.asarray(per_axis_bounds, dtype=float)
    if np.any(om < 0):
        raise InvalidParameter("bounds must be nonnegative")
    return np.abs(diag.u).T @ om


def inverse_backmap_box(sigma0_bar, diag: Diagonalization) -> np.ndarray:
    """Solve ``sum_i |b_ji| sigma_0i = sigma0_bar_j`` for ``sigma_0``."""
    absb = np.abs(diag.u)
    if abs(np.linalg.det(absb)) < 1e-12:
        raise SingularAbsMatrix("|U| is not invertible")
    sol = np.linalg.solve(absb, np.asarray(sigma0_bar, dtype=float))
    if np.any(sol < -1e-12 * max(1.0, float(np.max(np.abs(sol))))):
        raise InvalidParameter("box has no nonnegative diagonal-frame preimage")
    return np.maximum(sol, 0.0)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_problem(map_spec: QuadraticMapSpec, delays: DelayProfile, tuning: TuningConfig,
                     variant) -> ValidatedProblem:
    variant = Variant(variant)
    n = map_spec.n
    if delays.n != n or tuning.n != n:
        raise DimensionMismatch(f"map has n={n}, delays n={delays.n}, tuning n={tuning.n}")
    if variant.single_var:
        if n != 1:
            raise DimensionMismatch(f"variant {variant.value} requires n = 1")
        if map_spec.h_m is None or map_spec.h_M is None:
            raise MissingField(f"variant {variant.value} requires h_m and h_M")
        if not 0 < map_spec.h_m <= map_spec.h_M:
            raise InvalidParameter("need 0 < h_m <= h_M")
    if map_spec.kappa < 0 or map_spec.q_star_max < 0:
        raise InvalidParameter("kappa and q_star_max must be nonnegative")
    if map_spec.delta_h is not None:
        if np.linalg.norm(map_spec.delta_h, 2) > map_spec.kappa * (1 + 1e-12) + 1e-15:
            raise InvalidParameter("||delta_h|| exceeds kappa")
    if map_spec.theta_star is not None and map_spec.theta_star_box is not None:
        box = map_spec.theta_star_box
        if np.any(map_spec.theta_star < box[:, 0]) or np.any(map_spec.theta_star > box[:, 1]):
            raise InvalidParameter("theta_star lies outside its box")
    if map_spec.q_star is not None and abs(map_spec.q_star) > map_spec.q_star_max * (1 + 1e-12):
        raise InvalidParameter("|q_star| exceeds q_star_max")
    if not delays.is_commensurate():
        raise NonCommensurateDelays("m_i * Dbar_j != m_j * Dbar_i for some pair")

    diag = spectral_decompose(map_spec.h_bar)
    hb = diag.h_bar_diag
    k = tuning.k
    kh = k * hb
    bad = np.flatnonzero(kh >= 0)
    if bad.size:
        raise NotHurwitz(f"k_i * h_i must be negative (channel {bad[0] + 1})")
    if np.any(tuning.sigma_bar <= tuning.sigma0_bar) or np.any(tuning.sigma0_bar <= 0):
        raise BoxInverted("need sigma_bar_i > sigma0_bar_i > 0")

    dbar = delays.d_bar
    if variant.single_var:
        rate_max = np.abs(k) * map_spec.h_M
        rates = np.abs(k) * map_spec.h_m
    else:
        rate_max = np.abs(kh)
        rates = np.abs(kh)
    for i in range(n):
        bound = INV_E / dbar[i]
        if not rate_max[i] < bound:
            raise GainInfeasible(i, float(rate_max[i]), float(bound))
    rates = np.array(rates)
    rates.setflags(write=False)
    return ValidatedProblem(map_spec, delays, tuning, variant, diag, rates)


# ---------------------------------------------------------------------------
# JSON-compatible dictionaries
# ---------------------------------------------------------------------------

def _plain(x):
    if x is None:
        return None
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def problem_to_dict(p: ValidatedProblem) -> dict:
    m = p.map
    d = p.delays
    t = p.tuning
    return {
        "variant": p.variant.value,
        "map": {
            "n": m.n, "h_bar": _plain(m.h_bar), "kappa": m.kappa, "q_star_max": m.q_star_max,
            "theta_star_box": _plain(m.theta_star_box), "q_star": m.q_star,
            "theta_star": _plain(m.theta_star), "delta_h": _plain(m.delta_h),
            "h_m": m.h_m, "h_M": m.h_M,
        },
        "delays": {"d_out": d.d_out, "d_in": _plain(d.d_in), "m": _plain(d.m), "mu": d.mu},
        "tuning": {
            "k": _plain(t.k), "a": _plain(t.a), "sigma0_bar": _plain(t.sigma0_bar),
            "sigma_bar": _plain(t.sigma_bar), "q": t.q, "epsilon": t.epsilon,
        },
    }


_MAP_KEYS = {"n", "h_bar", "kappa", "q_star_max", "theta_star_box", "q_star", "theta_star",
             "delta_h", "h_m", "h_M"}
_DELAY_KEYS = {"d_out", "d_in", "m", "mu"}
_TUNING_KEYS = {"k", "a", "sigma0_bar", "sigma_bar", "q", "epsilon"}


def _check_keys(section: dict, allowed: set, name: str):
    extra = set(section) - allowed
    if extra:
        raise InvalidParameter(f"unknown key(s) in {name}: {sorted(extra)}")


def problem_from_dict(doc: dict, variant: Optional[str] = None) -> ValidatedProblem:
    """Build and validate a problem from the JSON document layout."""
    for sec in ("map", "delays", "tuning"):
        if sec not in doc:
            raise MissingField(f"problem document lacks section '{sec}'")
    mp, dl, tn = doc["map"], doc["delays"], doc["tuning"]
    _check_keys(mp, _MAP_KEYS, "map")
    _check_keys(dl, _DELAY_KEYS, "delays")
    _check_keys(tn, _TUNING_KEYS, "tuning")
    var = variant or doc.get("variant")
    if var is None:
        raise MissingField("no variant given")
    n = int(mp.get("n", len(np.atleast_1d(tn["k"]))))

    def opt(sec, key):
        v = sec.get(key)
        return None if v is None else v

    map_spec = QuadraticMapSpec(
        n=n, h_bar=mp["h_bar"], kappa=float(mp.get("kappa", 0.0)),
        q_star_max=float(mp.get("q_star_max", 0.0)),
        theta_star_box=opt(mp, "theta_star_box"),
        q_star=None if mp.get("q_star") is None else float(mp["q_star"]),
        theta_star=opt(mp, "theta_star"), delta_h=opt(mp, "delta_h"),
        h_m=None if mp.get("h_m") is None else float(mp["h_m"]),
        h_M=None if mp.get("h_M") is None else float(mp["h_M"]),
    )
    delays = DelayProfile(d_out=dl["d_out"], d_in=dl["d_in"], m=dl.get("m", [1] * n),
                          mu=float(dl.get("mu", 0.0)))
    tuning = TuningConfig(
        k=tn["k"], a=tn["a"], sigma0_bar=tn["sigma0_bar"], sigma_bar=tn["sigma_bar"],
        q=None if tn.get("q") is None else int(tn["q"]),
        epsilon=None if tn.get("epsilon") is None else float(tn["epsilon"]),
    )
    return validate_problem(map_spec, delays, tuning, var)


def as_vector(x: Sequence[float] | float, n: int) -> np.ndarray:
    """Broadcast a scalar or sequence to a length-``n`` float vector."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.size == 1:
        return np.full(n, float(arr[0]))
    if arr.size != n:
        raise DimensionMismatch(f"expected {n} entries, got {arr.size}")
    return arr
