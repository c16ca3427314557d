"""Sine and square-wave dither banks, commensurate epsilon grids and window averages."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core_model import DelayProfile, Variant
from .errors import InvalidParameter, NonCommensurateDelays

SINE = "sine"
SQUARE = "square"


def sq(t) -> np.ndarray:
    """Unit square wave: +1 on ``[p, p + 1/2)`` and -1 on ``[p + 1/2, p + 1)``."""
    t = np.asarray(t, dtype=float)
    frac = t - np.floor(t)
    return np.where(frac < 0.5, 1.0, -1.0)


@dataclass(frozen=True)
class DitherBank:
    """Per-channel probing ``S_i`` and demodulation ``M_i`` signals.

    For the sine family ``rate`` holds the angular frequencies; for the square
    family it holds the integer rates ``l_i = 2**(i-1)``.  ``phase_advance``
    shifts the probing signal only: ``S_i(t) = a_i * f(t + phase_i)``.
    """

    kind: str
    a: np.ndarray
    epsilon: float
    rate: np.ndarray
    phase_advance: np.ndarray

    @property
    def n(self) -> int:
        return self.a.size

    @property
    def omega(self) -> np.ndarray:
        return self.rate

    def _shape(self, i: int, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == SINE:
            return np.sin(self.rate[i] * t)
        return sq(self.rate[i] * t / self.epsilon)

    def probe(self, i: int, t) -> np.ndarray:
        return self.a[i] * self._shape(i, np.asarray(t, dtype=float) + self.phase_advance[i])

    def demod(self, i: int, t) -> np.ndarray:
        gain = 2.0 / self.a[i] if self.kind == SINE else 1.0 / self.a[i]
        return gain * self._shape(i, t)

    def probe_all(self, t) -> np.ndarray:
        """``S(t)`` with shape ``t.shape + (n,)``."""
        return np.stack([self.probe(i, t) for i in range(self.n)], axis=-1)

    def demod_all(self, t) -> np.ndarray:
        return np.stack([self.demod(i, t) for i in range(self.n)], axis=-1)


def sine_bank(a, epsilon: float, phase_advance=None) -> DitherBank:
    """Sine bank with ``omega_i = 2 pi i / epsilon``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    n = a.size
    omega = 2.0 * np.pi * np.arange(1, n + 1) / epsilon
    ph = np.zeros(n) if phase_advance is None else np.broadcast_to(
        np.asarray(phase_advance, dtype=float), (n,)).copy()
    return DitherBank(SINE, a, float(epsilon), omega, ph)


def square_bank(a, epsilon: float) -> DitherBank:
    """Square bank with rates ``l_i = 2**(i-1)``."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    n = a.size
    l = 2.0 ** np.arange(n)
    return DitherBank(SQUARE, a, float(epsilon), l, np.zeros(n))


def lemma2_frequencies(delays: DelayProfile, q: int, j: int = 0) -> np.ndarray:
    """Delay-periodic frequencies ``omega_i = q 2 pi i m_j / Dbar_j``."""
    if not delays.is_commensurate():
        raise NonCommensurateDelays("delays are not commensurate")
    i = np.arange(1, delays.n + 1)
    return q * 2.0 * np.pi * i * delays.m[j] / delays.d_bar[j]


def eval_dither(bank: DitherBank, i: int, t):
    """Return ``(S_i(t), M_i(t))``."""
    return bank.probe(i, t), bank.demod(i, t)


# ---------------------------------------------------------------------------
# Commensurate grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpsilonGrid:
    """``eps(q) = Dbar_j / (q m_j)``; identical for every channel under A1."""

    base: float  # Dbar_j / m_j

    def __call__(self, q: int) -> float:
        if q < 1:
            raise InvalidParameter("q must be a positive integer")
        return self.base / q

    def q_for(self, eps: float, rtol: float = 1e-9) -> Optional[int]:
        """Grid index of ``eps`` or ``None`` if it is not a grid point."""
        q = self.base / eps
        qr = round(q)
        if qr >= 1 and abs(q - qr) <= rtol * max(q, 1.0):
            return int(qr)
        return None

    def largest_below(self, cap: float):
        """Largest grid member ``<= cap`` as ``(q, eps)``."""
        if not cap > 0:
            raise InvalidParameter("cap must be positive")
        q = max(1, math.ceil(self.base / cap * (1 - 1e-12)))
        while self.base / q > cap:
            q += 1
        return q, self.base / q


def commensurate_epsilon_grid(delays: DelayProfile, variant=Variant.CONTINUOUS) -> EpsilonGrid:
    """Grid of admissible epsilon values for the given delays.

    The grid is the same for both families; for the sampled family the total
    delays ``D_i`` play the role of ``Dbar_i``.
    """
    Variant(variant)
    if not delays.is_commensurate():
        raise NonCommensurateDelays("delays are not commensurate")
    ratios = delays.d_bar / delays.m
    if np.max(np.abs(ratios - ratios[0])) > 1e-12 * abs(ratios[0]):
        raise NonCommensurateDelays("channels disagree on the grid base")
    return EpsilonGrid(float(ratios[0]))


# ---------------------------------------------------------------------------
# Window averages
# ---------------------------------------------------------------------------

def window_average(f: Callable[[np.ndarray], np.ndarray], t: float, epsilon: float,
                   panels: int = 1024) -> float:
    """``(1/eps) * int_{t-eps}^{t} f`` by composite Simpson with ``panels`` panels."""
    if panels % 2:
        panels += 1
    tau = np.linspace(t - epsilon, t, panels + 1)
    w = np.ones(panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    vals = np.asarray(f(tau), dtype=float)
    return float(np.sum(w * vals) * (epsilon / panels) / 3.0 / epsilon)


def piecewise_average(f: Callable[[np.ndarray], np.ndarray], t: float, epsilon: float,
                      cell: float) -> float:
    """Exact window average of a function constant on ``[j*cell, (j+1)*cell)``.

    Used for products of square waves whose switching points all lie on a
    ``cell`` lattice.
    """
    lo, hi = t - epsilon, t
    j0 = math.floor(lo / cell)
    j1 = math.ceil(hi / cell)
    edges = np.clip(np.arange(j0, j1 + 1) * cell, lo, hi)
    lengths = np.diff(edges)
    keep = lengths > 0
    mids = (np.arange(j0, j1) + 0.5) * cell
    vals = np.asarray(f(mids[keep]), dtype=float)
    return float(np.sum(vals * lengths[keep]) / epsilon)
