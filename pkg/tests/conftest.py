import copy

import numpy as np
import pytest

from esdelay.core_model import (
    DelayProfile,
    QuadraticMapSpec,
    TuningConfig,
    problem_from_dict,
    validate_problem,
)
from esdelay.experiments import EXAMPLES, TABLES

H33 = [[-2.0, -2.0], [-2.0, -4.0]]


def example_problem(name, **overrides):
    doc = copy.deepcopy(EXAMPLES[name])
    for key, value in overrides.items():
        sec, field = key.split("__")
        doc[sec][field] = value
    return problem_from_dict(doc)


def table_problem(table, row):
    return problem_from_dict(TABLES[table].rows[row].doc)


def make_problem(variant="continuous", h_bar=None, k=(-0.003,), a=(0.3,), s0=(0.5,), s=(1.0,),
                 q_max=0.0, kappa=0.0, mu=0.0, d_out=1.0, d_in=(1.0,), m=None, h_m=None, h_M=None,
                 eps=None, q_star=None, theta_star=None):
    n = len(k)
    h_bar = np.eye(n) * 2.0 if h_bar is None else h_bar
    m = [1] * n if m is None else m
    return validate_problem(
        QuadraticMapSpec(n=n, h_bar=h_bar, kappa=kappa, q_star_max=q_max, h_m=h_m, h_M=h_M,
                         q_star=q_star, theta_star=theta_star),
        DelayProfile(d_out, list(d_in), m, mu),
        TuningConfig(list(k), list(a), list(s0), list(s), epsilon=eps),
        variant,
    )


@pytest.fixture
def ex32():
    return example_problem("example3_2")


@pytest.fixture
def ex33():
    return example_problem("example3_3")


def random_problem(seed, variants=("continuous", "sampled")):
    """Deterministic random problem that is feasible for small epsilon."""
    from esdelay.analysis import is_feasible

    rng = np.random.default_rng(seed)
    while True:
        n = int(rng.integers(1, 4))
        variant = variants[int(rng.integers(len(variants)))]
        sign = rng.choice([-1.0, 1.0])
        hd = np.sort(rng.uniform(0.5, 3.0, n))[::-1] * sign
        rot, _ = np.linalg.qr(rng.normal(size=(n, n)))
        h_bar = rot @ np.diag(hd) @ rot.T
        base = rng.uniform(0.3, 1.0)
        m = rng.integers(1, 5, n)
        dbar = m * base
        d_out = 0.0 if variant == "sampled" else 0.5 * dbar.min()
        k = -sign * rng.uniform(0.01, 0.3, n) * np.exp(-1) / (np.abs(hd) * dbar)
        s = rng.uniform(0.3, 1.5, n)
        try:
            p = validate_problem(
                QuadraticMapSpec(n=n, h_bar=h_bar, kappa=rng.uniform(0, 0.1) * rng.integers(0, 2),
                                 q_star_max=rng.uniform(0, 1)),
                DelayProfile(d_out, dbar - d_out, m, rng.uniform(0, 0.01) if variant == "continuous" else 0.0),
                TuningConfig(k, rng.uniform(0.05, 0.5, n), s / rng.uniform(2, 5, n), s),
                variant,
            )
        except Exception:
            continue
        if is_feasible(p, 1e-6):
            return p
