import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esdelay.analysis import (
    analyze,
    bound_constants,
    disturbance_bound,
    disturbance_coefficients,
    find_eps_star,
    finite_time,
    is_feasible,
    max_kappa,
    refine_ultimate_bound,
    stability_conditions,
    transient_envelope,
    ultimate_box,
)
from esdelay.errors import Infeasible, InfeasibleAtZero, InvalidParameter, Stalled

from conftest import TABLES, example_problem, make_problem, random_problem, table_problem

# Independent oracle: a separate straight-line evaluation of the bound formulas
# (one function per variant, no shared code with the package), frozen here.
# columns: table, row, eps*, Omega at the table epsilon, Phi2 at the table epsilon
ORACLE = [
    ("table1", 0, 0.747591, [0.418995], [-0.003284]),
    ("table1", 1, 0.111634, [0.480847], [-0.005258]),
    ("table2", 0, 0.315249, [0.416479, 0.417705], [-0.053417, -0.050598]),
    ("table3", 0, 0.49047, [0.058979, 0.404517], [-0.038349, -0.081448]),
    ("table3", 1, 0.161801, [0.069378, 0.475929], [-0.02883, -0.01598]),
    ("table4", 0, 0.0716768, [0.350648], [-0.003666]),
    ("table4", 1, 0.0716768, [0.350648], [-0.003666]),
    ("table4", 3, 0.0652421, [0.351499], [-0.001436]),
    ("table4", 4, 0.0522236, [0.373256], [-0.001412]),
    ("table4", 6, 0.0353176, [0.338839], [-0.00337]),
    ("table5", 0, 0.100215, [0.881007, 0.881007], [-0.002061, -0.002061]),
    ("table6", 0, 1.21446, [0.024259, 0.166013], [-0.067504, -0.291995]),
    ("table6", 1, 0.363003, [0.060738, 0.417122], [-0.033773, -0.058695]),
]
IDS = [f"{t}-{r}" for t, r, *_ in ORACLE]


# --- constants ------------------------------------------------------------

def test_scalar_constant_hand_computed():
    p = table_problem("table1", 0)
    k, a = abs(p.tuning.k[0]), abs(p.tuning.a[0])
    s, hM, qm = p.tuning.sigma_bar[0], p.map.h_M, p.map.q_star_max
    expected = 2 * k / a * (qm + hM / 2 * (s + a) ** 2)
    assert bound_constants(p).delta_1d == pytest.approx(expected, rel=1e-14)
    assert bound_constants(p).delta_1d == pytest.approx(0.0607, abs=5e-5)


def test_delta1_two_channel():
    assert bound_constants(table_problem("table2", 0)).delta1 == pytest.approx(3.38, abs=5e-3)


def test_phi1_theorem_row():
    phi1, _ = stability_conditions(table_problem("table1", 1), 0.1)
    assert phi1[0] == pytest.approx(-0.35587, abs=5e-5)


def test_sampled_constant_scaling():
    # sampled tilde-constants = continuous bar-constants * (2^(n-1)+1)/2^n / (2(1+4 mu)) at equal data
    cont = make_problem(k=(-0.003, -0.004), a=(0.3, 0.2), s0=(0.5, 0.5), s=(1, 1), d_out=0.5,
                        d_in=(0.5, 0.5), kappa=0.05, q_max=0.3, mu=0.004)
    samp = make_problem(variant="sampled", k=(-0.003, -0.004), a=(0.3, 0.2), s0=(0.5, 0.5), s=(1, 1),
                        d_out=0.0, d_in=(1.0, 1.0), kappa=0.05, q_max=0.3)
    bc, bs = bound_constants(cont), bound_constants(samp)
    factor = (2 ** 1 + 1) / 2 ** 2 / (2 * (1 + 4 * 0.004))
    assert bs.delta1 == pytest.approx(bc.delta1)
    assert bs.deltatilde1 == pytest.approx(bc.deltabar1 * factor)
    assert bs.deltatilde2 == pytest.approx(bc.deltabar2 * factor)


def test_disturbance_affine_in_eps(ex32):
    slope, off = disturbance_coefficients(ex32)
    for eps in (0.0, 0.1, 0.37):
        assert np.allclose(disturbance_bound(ex32, eps), slope * eps + off, rtol=1e-12, atol=1e-15)
    assert np.all(slope > 0)


def test_no_uncertainty_no_offset(ex32):
    p = ex32.with_delays(mu=0.0)
    _, off = disturbance_coefficients(p)
    assert np.all(off == 0)
    s = p.tuning.sigma_bar
    ub, _ = ultimate_box(p, 1e-9)
    assert np.all(ub < 1e-6 * s)


def test_corollary_equals_theorem_when_interval_collapses():
    for eps in (0.01, 0.2, 0.5):
        sv = make_problem(variant="single_var_continuous", h_m=2.0, h_M=2.0, k=(-0.01,), q_max=0.4)
        th = make_problem(k=(-0.01,), q_max=0.4)
        assert np.allclose(stability_conditions(sv, eps)[0], stability_conditions(th, eps)[0])
        assert np.all(stability_conditions(th, eps)[1] >= stability_conditions(sv, eps)[1] - 1e-15)


def test_corollary_less_conservative_on_table1():
    assert find_eps_star(table_problem("table1", 0)).eps_star >= find_eps_star(table_problem("table1", 1)).eps_star


# --- eps* against the oracle ------------------------------------------------

@pytest.mark.parametrize("table,row,eps_star,omega,phi2", ORACLE, ids=IDS)
def test_eps_star_oracle(table, row, eps_star, omega, phi2):
    p = table_problem(table, row)
    es = find_eps_star(p)
    assert es.eps_star == pytest.approx(eps_star, rel=2e-5)
    assert es.omega_star == pytest.approx(2 * math.pi / es.eps_star)
    assert es.monotone_verified
    assert is_feasible(p, es.eps_star)
    assert not is_feasible(p, 1.0001 * es.eps_star)
    assert np.any(stability_conditions(p, 1.1 * es.eps_star)[1] >= 0) or \
        np.any(stability_conditions(p, 1.1 * es.eps_star)[0] > 0)


@pytest.mark.parametrize("table,row,eps_star,omega,phi2", ORACLE, ids=IDS)
def test_bound_oracle_at_table_eps(table, row, eps_star, omega, phi2):
    p = table_problem(table, row)
    eps = TABLES[table].rows[row].eps_ub
    ub, _ = ultimate_box(p, eps)
    assert np.allclose(ub, omega, rtol=1e-4, atol=1e-6)
    assert np.allclose(stability_conditions(p, eps)[1], phi2, rtol=1e-3, atol=1e-6)


def test_infeasible_at_zero_reports_channel():
    with pytest.raises(InfeasibleAtZero) as err:
        find_eps_star(table_problem("table4", 7))
    assert "channel" in str(err.value)


def test_snap_to_grid():
    assert find_eps_star(example_problem("example3_2"), snap_to_grid=True).eps_star == pytest.approx(0.25)
    es = find_eps_star(example_problem("example3_3"), snap_to_grid=True)
    assert es.eps_star == pytest.approx(0.25) and es.q == 2
    assert find_eps_star(example_problem("example4_3"), snap_to_grid=True).eps_star == pytest.approx(0.5)


def test_max_kappa_theorem_row():
    km = max_kappa(table_problem("table1", 1), 0.1)
    assert km == pytest.approx(0.47, abs=0.01)
    p = table_problem("table1", 1)
    assert is_feasible(p.with_map(kappa=km * 0.999), 0.1)
    assert not is_feasible(p.with_map(kappa=km * 1.001), 0.1)


def test_ultimate_box_infeasible_raises(ex32):
    with pytest.raises(Infeasible):
        ultimate_box(ex32, 0.5)


# --- refinement -----------------------------------------------------------------

def test_refinement_scalar_corollary():
    r = refine_ultimate_bound(table_problem("table1", 0), 0.74)
    assert r.final[0] == pytest.approx(0.115, rel=0.1)


def test_refinement_known_h_box():
    r = refine_ultimate_bound(example_problem("example3_3"), 0.25)
    assert np.allclose(r.final, [0.023, 0.16], rtol=0.1)
    assert np.allclose(r.backmapped, [0.1482, 0.1037], rtol=0.1)


def test_refinement_single_step_when_no_reset():
    p = make_problem(k=(-0.003,), s0=(0.5,), s=(1.0,), q_max=0.5)
    eps = 0.99 * find_eps_star(p).eps_star
    first = refine_ultimate_bound(p, eps).steps[0].bound[0]
    beta = 0.5 - first + 1e-3
    assert 0 < beta < 0.5
    r = refine_ultimate_bound(p, eps, beta=beta)
    assert len(r.steps) == 1
    assert r.final[0] == pytest.approx(first)


def test_refinement_stalls_with_step_cap():
    with pytest.raises(Stalled):
        refine_ultimate_bound(table_problem("table1", 0), 0.74, max_steps=2)


def test_refinement_parameter_checks(ex32):
    with pytest.raises(InvalidParameter):
        refine_ultimate_bound(ex32, 0.25, beta=0.0)
    with pytest.raises(InvalidParameter):
        refine_ultimate_bound(ex32, 0.25, mode="scalar")
    with pytest.raises(Infeasible):
        refine_ultimate_bound(ex32, 0.5)


def test_common_mode_no_tighter_than_vector():
    p = example_problem("example3_3")
    vec = refine_ultimate_bound(p, 0.25)
    com = refine_ultimate_bound(p, 0.25, mode="common")
    assert np.all(com.steps[0].sigma_bar >= vec.steps[0].sigma_bar - 1e-9)


# --- envelope and finite time ------------------------------------------------------

def test_envelope_segments(ex32):
    env = transient_envelope(ex32, 0.25)
    j1, j2 = env.joints()
    t_s = env.t_start
    assert np.allclose(env(t_s - 1e-9), ex32.tuning.sigma0_bar)
    slope, off = disturbance_coefficients(ex32)
    assert np.allclose(env(t_s), env.x0 + env.first)
    assert np.allclose(env(0.5 * (j1 + j2.min())), env.middle)
    assert np.allclose(env(1e7), env.ultimate)
    ub, _ = ultimate_box(ex32, 0.25)
    assert np.allclose(env.ultimate, ub)
    for i in range(2):
        left = env(j2[i])[i]
        right = env(j2[i] + 1e-12)[i]
        assert abs(right - left) <= abs(env.tail_gain[i] + env.ultimate[i] - env.middle[i]) + 1e-9


def test_envelope_stays_inside_confinement(ex32):
    env = transient_envelope(ex32, 0.25)
    t = np.linspace(0, 1e4, 20001)
    assert np.all(env(t) < ex32.tuning.sigma_bar)


def test_finite_time_log_law(ex32):
    eps = 0.25
    t_big = finite_time(ex32, eps, 1e9)
    t1 = finite_time(ex32, eps, 0.01)
    t2 = finite_time(ex32, eps, 0.005)
    decay = ex32.delta_rates
    assert np.allclose(t2 - t1, np.log(2) / decay, rtol=1e-10)
    assert np.all(t_big < t1)
    with pytest.raises(InvalidParameter):
        finite_time(ex32, eps, 0.0)


def test_finite_time_envelope_consistency(ex32):
    eps, dom = 0.25, 0.02
    env = transient_envelope(ex32, eps)
    t_fin = finite_time(ex32, eps, dom)
    for i in range(2):
        assert env(t_fin[i])[i] <= env.ultimate[i] + dom + 1e-12


# --- report -----------------------------------------------------------------

def test_report_serialization(ex32):
    rep = analyze(ex32, 0.25)
    doc = json.loads(rep.to_json())
    assert doc["feasible"] is True
    assert doc["eps_star"] == pytest.approx(0.315249, rel=2e-5)
    assert rep.to_json() == analyze(ex32, 0.25).to_json()
    header, row = rep.to_csv().strip().splitlines()
    assert len(header.split(",")) == len(row.split(","))


def test_report_infeasible_epsilon(ex32):
    rep = analyze(ex32, 0.5)
    assert rep.feasible is False and rep.ultimate is None
    assert rep.messages


# --- property tests on random feasible problems -----------------------------------

seeds = st.integers(0, 10_000)


@settings(max_examples=40, deadline=None)
@given(seeds)
def test_conditions_monotone_in_eps(seed):
    p = random_problem(seed)
    es = find_eps_star(p).eps_star
    prev = None
    for eps in np.linspace(1e-6, 2 * es, 25):
        cur = np.concatenate(stability_conditions(p, eps))
        if prev is not None:
            assert np.all(cur >= prev - 1e-12)
        prev = cur


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.1, 1.5))
def test_conditions_monotone_in_parameters(seed, frac):
    p = random_problem(seed)
    eps = frac * find_eps_star(p).eps_star
    base = np.concatenate(stability_conditions(p, eps))
    bumped = [
        p.with_tuning(k=p.tuning.k * 1.1),
        p.with_map(kappa=p.map.kappa + 0.05),
        p.with_tuning(sigma0_bar=np.minimum(p.tuning.sigma0_bar * 1.1, 0.999 * p.tuning.sigma_bar)),
    ]
    if p.variant.value == "continuous":
        bumped.append(p.with_delays(mu=p.delays.mu + 0.01))
    for q in bumped:
        assert np.all(np.concatenate(stability_conditions(q, eps)) >= base - 1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds, st.floats(0.05, 0.999))
def test_bound_inside_confinement(seed, frac):
    p = random_problem(seed)
    eps = frac * find_eps_star(p).eps_star
    ub, _ = ultimate_box(p, eps)
    assert np.all(ub < p.tuning.sigma_bar)


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_refinement_trail_monotone_and_feasible(seed):
    p = random_problem(seed)
    eps = 0.8 * find_eps_star(p).eps_star
    r = refine_ultimate_bound(p, eps, beta=1e-3 * float(np.min(p.tuning.sigma0_bar)))
    trail = np.array(r.trail)
    assert np.all(np.diff(trail, axis=0) <= 1e-12)
    for step in r.steps:
        q = p.with_tuning(sigma0_bar=step.sigma0_bar, sigma_bar=step.sigma_bar * (1 + 1e-9))
        phi1, phi2 = stability_conditions(q, eps)
        assert np.all(phi1 <= 0) and np.all(phi2 <= 1e-9)
