import json

import numpy as np
import pytest
from conftest import make_grid

from mfgreg.diagnostics import (
    ScopeError,
    diagnose,
    energy_report,
    fp_weak_residual,
    hj_field,
    hj_subsolution_check,
    minty_residual,
    monotonicity_probe,
    pair_F,
    pde_residuals,
)
from mfgreg.fields import DiffPlan, SpaceTimeField
from mfgreg.fixedpoint import epsilon_continuation
from mfgreg.problem import CouplingSpec, HamiltonianSpec, MFGProblem, RegularizationConfig

N = 24


def _s2(x):
    return np.sin(2 * np.pi * x)


@pytest.fixture(scope="module")
def trivial():
    return MFGProblem(make_grid(N, N))


@pytest.fixture(scope="module")
def exact(trivial):
    grid = trivial.grid
    t = grid.time.nodes[:, None]
    one = np.ones(grid.flat_shape)
    return one, np.broadcast_to(1.0 - t, grid.flat_shape).copy()


@pytest.fixture(scope="module")
def solved(trivial):
    return epsilon_continuation(trivial, [1e-1, 1e-2, 1e-3])


def test_energy_report_on_exact_solution(trivial, exact):
    m, u = exact
    rep = energy_report(m, u, trivial)
    assert rep["coupling_integral"] == pytest.approx(trivial.grid.time.horizon, abs=1e-8)
    for key in ("weighted_gradient", "initial_weighted_gradient", "du_l1", "du_lgamma"):
        assert abs(rep[key]) <= 1e-8
    assert rep["ratio"] == pytest.approx(1.0, abs=1e-8)


def test_energy_report_zero_density(trivial, exact):
    _, u = exact
    rep = energy_report(np.zeros_like(u), u, trivial)
    assert rep["coupling_integral"] == 0.0


def test_monotonicity_constant_pair(trivial):
    grid = trivial.grid
    two, one = 2 * np.ones(grid.flat_shape), np.ones(grid.flat_shape)
    zero = np.zeros(grid.flat_shape)
    plan = DiffPlan(grid, 3)
    val, _ = pair_F(trivial, two, zero, two - one, zero, plan)
    val_one, _ = pair_F(trivial, one, zero, two - one, zero, plan)
    # <F[2,0] - F[1,0], (1, 0)> = int (g(2) - g(1)) = T
    assert val - val_one == pytest.approx(trivial.grid.time.horizon, abs=1e-10)


def test_monotonicity_identical_pair_is_zero(trivial):
    grid = trivial.grid
    m = np.ones(grid.flat_shape)
    u = np.zeros(grid.flat_shape)
    val, _ = pair_F(trivial, m, u, m - m, u - u, DiffPlan(grid, 3))
    assert val == 0.0


def test_monotonicity_probe_trivial(trivial):
    res = monotonicity_probe(trivial, RegularizationConfig(1e-2), samples=200, seed=0)
    assert res.f_min >= -1e-8 * res.f_scale
    assert res.gap_min >= 0.0


def test_monotonicity_probe_is_seeded(trivial):
    a = monotonicity_probe(trivial, samples=20, seed=3)
    b = monotonicity_probe(trivial, samples=20, seed=3)
    c = monotonicity_probe(trivial, samples=20, seed=4)
    assert (a.f_min, a.f_scale) == (b.f_min, b.f_scale)
    assert (a.f_min, a.f_scale) != (c.f_min, c.f_scale)


def test_monotonicity_probe_flags_nonmonotone_coupling():
    problem = MFGProblem(make_grid(16, 16), coupling=CouplingSpec(local_scale=-1.0, allow_nonmonotone=True))
    res = monotonicity_probe(problem, samples=50, seed=0)
    assert res.f_min < -1e-8 * res.f_scale


def test_minty_on_analytic_limit(trivial):
    grid = trivial.grid
    m = SpaceTimeField(grid, np.ones(grid.flat_shape))
    ut = SpaceTimeField(grid, np.zeros(grid.flat_shape))
    res = minty_residual(m, ut, trivial, samples=100, seed=0)
    assert res.value >= -1e-4 * res.scale


def test_minty_self_pair_is_zero(trivial):
    grid = trivial.grid
    m = np.ones(grid.flat_shape)
    u = np.zeros(grid.flat_shape)
    val, _ = pair_F(trivial, m, u, m - m, u - u, DiffPlan(grid, 3))
    assert val == 0.0


def test_minty_negative_control(trivial, solved):
    grid = trivial.grid
    x = grid.torus.points[:, 0]
    bad = SpaceTimeField(grid, np.maximum(solved.m.flat + 0.5 * _s2(x)[None, :], 0.0))
    res = minty_residual(bad, solved.u_tilde, trivial, samples=100, seed=0)
    assert res.value <= -1e-2 * res.scale


def test_minty_rejects_negative_density(trivial):
    grid = trivial.grid
    m = -np.ones(grid.flat_shape)
    with pytest.raises(ValueError):
        minty_residual(m, np.zeros(grid.flat_shape), trivial)


def test_fp_weak_constant_density(trivial):
    grid = trivial.grid
    res = fp_weak_residual(np.ones(grid.flat_shape), np.zeros(grid.flat_shape + (1,)), trivial.initial_density, trivial)
    assert res.value <= 1e-8


def test_fp_weak_manufactured_flux(trivial):
    grid = trivial.grid
    x = grid.torus.points[:, 0]
    t = grid.time.nodes[:, None]
    horizon = grid.time.horizon
    m = 1 + 0.5 * t * _s2(x)[None, :] / horizon
    # m_t = div J with J = -cos(2 pi x) / (4 pi T)
    flux = np.broadcast_to((-np.cos(2 * np.pi * x) / (4 * np.pi * horizon))[None, :, None], grid.flat_shape + (1,))
    res = fp_weak_residual(m, flux, trivial.initial_density, trivial)
    assert res.value <= 1e-6


def test_fp_weak_zero_test_field_vanishes(trivial):
    grid = trivial.grid
    res = fp_weak_residual(np.ones(grid.flat_shape), np.zeros(grid.flat_shape + (1,)), trivial.initial_density, trivial, samples=0)
    assert res.value == 0.0


def test_hj_subsolution_on_exact_solution(trivial, exact):
    m, u = exact
    res = hj_subsolution_check(m, u, trivial, samples=100, seed=0)
    assert res.value <= 1e-4 * res.scale


def test_hj_subsolution_negative_control(trivial, exact):
    m, u = exact
    x = trivial.grid.torus.points[:, 0]
    res = hj_subsolution_check(m, u + 10 * _s2(x)[None, :], trivial, samples=100, seed=0)
    assert res.value > 0


def test_hj_subsolution_scope():
    grid = make_grid(16, 16)
    power = MFGProblem(grid, hamiltonian=HamiltonianSpec("power", gamma=1.5))
    big_r = MFGProblem(grid, coupling=CouplingSpec(r=2.0))
    m = np.ones(grid.flat_shape)
    u = np.zeros(grid.flat_shape)
    with pytest.raises(ScopeError):
        hj_subsolution_check(m, u, power)
    with pytest.raises(ScopeError):
        hj_subsolution_check(m, u, big_r)
    assert hj_subsolution_check(m, u, power, allow_power=True).samples == 100


def test_pde_residuals_exact_fields(trivial, exact):
    m, u = exact
    res = pde_residuals(m, u, trivial)
    assert res.hj_linf <= 1e-8
    assert res.fp_linf <= 1e-8
    assert res.active_fraction == 1.0


def test_pde_residuals_affine_in_potential(exact):
    m, u = exact
    grid = make_grid(N, N)
    m = m + 0.1 * _s2(grid.torus.points[:, 0])[None, :]
    zero_v = MFGProblem(grid)
    one_v = MFGProblem(grid, potential=lambda t, x: np.cos(2 * np.pi * x) * (1 + t))
    two_v = MFGProblem(grid, potential=lambda t, x: 2 * np.cos(2 * np.pi * x) * (1 + t))
    plan = DiffPlan(grid, 3)
    base = hj_field(zero_v, m, u, plan)
    d1 = hj_field(one_v, m, u, plan) - base
    d2 = hj_field(two_v, m, u, plan) - base
    assert np.allclose(d2, 2 * d1, atol=1e-12)


def test_pde_residuals_zero_fields_pinned(trivial):
    grid = trivial.grid
    z = np.zeros(grid.flat_shape)
    res = pde_residuals(z, z, trivial)
    # zero density is inactive everywhere; the FP residual of zero fields vanishes
    assert res.active_fraction == 0.0
    assert (res.hj_l2, res.hj_linf, res.fp_l2, res.fp_linf) == (0.0, 0.0, 0.0, 0.0)


def test_diagnose_solver_output(trivial, solved):
    rep = diagnose(solved.m, solved.history[-1].u, trivial, RegularizationConfig(1e-3), samples=50, seed=0)
    assert rep.all_finite()
    assert rep.minty.value >= -1e-4 * rep.minty.scale
    assert rep.monotonicity.f_min >= -1e-8 * rep.monotonicity.f_scale
    assert rep.mass_deviation <= 0.05
    assert rep.residuals.hj_dual <= 1e-6
    assert rep.residuals.fp_dual <= 1e-6
    json.dumps(rep.as_dict())


def test_diagnose_is_deterministic(trivial, solved):
    a = diagnose(solved.m, solved.u, trivial, RegularizationConfig(1e-3), samples=10, seed=7).as_dict()
    b = diagnose(solved.m, solved.u, trivial, RegularizationConfig(1e-3), samples=10, seed=7).as_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
