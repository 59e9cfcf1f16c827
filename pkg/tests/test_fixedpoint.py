import math

import numpy as np
import pytest
from conftest import make_grid
from oracles import relative_error

from mfgreg.fields import SpaceTimeField, mean_in_x, random_smooth
from mfgreg.fixedpoint import (
    FixedPointOpts,
    IterState,
    apply_A,
    default_schedule,
    epsilon_continuation,
    equation_checks,
    fixed_point_solve,
    normalize,
    reconstruct_u,
    recover_mu,
)
from mfgreg.problem import CouplingSpec, MFGProblem, RegularizationConfig, terminal_shift


def _c2(x):
    return np.cos(2 * np.pi * x)


def _s2(x):
    return np.sin(2 * np.pi * x)


@pytest.fixture(scope="module")
def trivial_solution():
    problem = MFGProblem(make_grid(16, 16))
    reg = RegularizationConfig(1e-2)
    shifted = terminal_shift(problem, reg)
    m, u, report = fixed_point_solve(problem, reg, shifted=shifted)
    return problem, reg, shifted, m, u, report


@pytest.fixture(scope="module")
def shaped_solution():
    problem = MFGProblem(
        make_grid(16, 16),
        initial_density=lambda x: 1 + 0.05 * _s2(x),
        terminal_cost=lambda x: 0.02 * _c2(x),
        potential=lambda t, x: 0.05 * _c2(x),
    )
    reg = RegularizationConfig(1e-2)
    shifted = terminal_shift(problem, reg)
    m, u, report = fixed_point_solve(problem, reg, shifted=shifted)
    return problem, reg, shifted, m, u, report


def test_default_schedule():
    sched = default_schedule()
    assert len(sched) == 7
    assert sched[0] == pytest.approx(1e-1)
    assert sched[-1] == pytest.approx(1e-4)
    ratios = np.array(sched[1:]) / np.array(sched[:-1])
    assert np.allclose(ratios, 10 ** -0.5)


@pytest.mark.parametrize("schedule", [[], [1e-2, 1e-1], [1e-2, 1e-2], [1.0], [0.1, -1e-3]])
def test_continuation_rejects_bad_schedules(schedule):
    problem = MFGProblem(make_grid(14, 8))
    with pytest.raises(ValueError):
        epsilon_continuation(problem, schedule)


@pytest.mark.parametrize(
    "kwargs", [{"damping": 0.0}, {"damping": 1.5}, {"anderson": 4}, {"method": "broyden"}]
)
def test_options_validation(kwargs):
    with pytest.raises(ValueError):
        FixedPointOpts(**kwargs)


def test_reconstruct_u_integrates_mu():
    grid = make_grid(16, 8)
    t = grid.time.nodes
    zero = SpaceTimeField(grid, np.zeros(grid.flat_shape))
    u = reconstruct_u(zero, np.ones(t.size))
    assert np.allclose(u.flat, (1.0 - t)[:, None], atol=1e-14)
    tilde = SpaceTimeField(grid, random_smooth(grid, np.random.default_rng(0)))
    same = reconstruct_u(tilde, np.zeros(t.size))
    assert np.array_equal(same.flat, tilde.flat)
    shifted = reconstruct_u(tilde, np.cos(t))
    assert np.array_equal(shifted.flat[-1], tilde.flat[-1])


def test_recover_mu_on_the_trivial_limit():
    problem = MFGProblem(make_grid(16, 16))
    grid = problem.grid
    one = SpaceTimeField(grid, np.ones(grid.flat_shape))
    zero = SpaceTimeField(grid, np.zeros(grid.flat_shape))
    rec = recover_mu(one, zero, problem)
    assert np.allclose(rec.mu, 1.0, atol=1e-12)
    assert np.max(rec.deviation) <= 1e-12
    assert rec.positive.all()


def test_recover_mu_shifts_with_constant_potential():
    base = MFGProblem(make_grid(16, 16), potential=lambda t, x: 0.1 * _c2(x))
    moved = MFGProblem(make_grid(16, 16), potential=lambda t, x: 0.1 * _c2(x) + 0.25)
    grid = base.grid
    rng = np.random.default_rng(2)
    m = SpaceTimeField(grid, 1 + 0.1 * random_smooth(grid, rng, zero_mean=True))
    u = SpaceTimeField(grid, 0.1 * random_smooth(grid, rng))
    delta = recover_mu(m, u, moved).mu - recover_mu(m, u, base).mu
    assert np.allclose(delta, 0.25, atol=1e-12)


def test_recover_mu_zero_for_zero_data():
    problem = MFGProblem(
        make_grid(16, 16), coupling=CouplingSpec(local_scale=0.0, allow_nonmonotone=True)
    )
    grid = problem.grid
    one = SpaceTimeField(grid, np.ones(grid.flat_shape))
    zero = SpaceTimeField(grid, np.zeros(grid.flat_shape))
    assert np.all(recover_mu(one, zero, problem).mu == 0.0)


def test_apply_A_is_deterministic(shaped_solution):
    problem, reg, shifted, *_ = shaped_solution
    grid = problem.grid
    rng = np.random.default_rng(4)
    t = grid.time.nodes[:, None]
    state = IterState(
        SpaceTimeField(grid, 0.02 * t * random_smooth(grid, rng, zero_mean=True)),
        SpaceTimeField(grid, 0.02 * (1 - t) * random_smooth(grid, rng)),
    )
    a = apply_A(state, shifted, reg)
    b = apply_A(state, shifted, reg)
    assert np.array_equal(a.m_tilde.flat, b.m_tilde.flat)
    assert np.array_equal(a.u.flat, b.u.flat)


@pytest.mark.parametrize("which", ["trivial_solution", "shaped_solution"])
def test_fixed_point_certificates(which, request):
    problem, reg, shifted, m, u, report = request.getfixturevalue(which)
    assert report.converged
    assert report.residual <= 1e-6
    # pinned slices are set, not solved
    assert np.array_equal(m.flat[0], problem.initial_density)
    assert np.array_equal(u.flat[-1], problem.terminal_cost)
    # one more application of the map stays within tolerance
    mapped = apply_A(report.state, shifted, reg)
    diff = max(
        np.max(np.abs(mapped.m_tilde.flat - report.state.m_tilde.flat)),
        np.max(np.abs(mapped.u.flat - report.state.u.flat)),
    )
    assert diff <= 1e-6 * (1 + report.state.norm())
    checks = equation_checks(shifted, report.state, reg, samples=50, seed=0)
    assert checks["e2"] >= -1e-6
    assert checks["e3"] <= 1e-6


def test_trivial_solution_near_analytic(trivial_solution):
    problem, _, _, m, u, _ = trivial_solution
    t = problem.grid.time.nodes[:, None]
    assert np.max(np.abs(m.flat - 1.0)) <= 0.05
    assert np.max(np.abs(normalize(u).flat)) <= 0.05
    assert relative_error(u.flat, np.broadcast_to(1.0 - t, u.flat.shape)) <= 0.05


def test_picard_holds_the_newton_solution(shaped_solution):
    problem, reg, shifted, _, _, report = shaped_solution
    opts = FixedPointOpts(method="picard", max_iter=3)
    _, _, rep = fixed_point_solve(problem, reg, opts, initial=report.state, shifted=shifted)
    assert rep.converged
    assert rep.residual <= 1e-6


def test_picard_residual_never_increases_on_accepted_steps():
    problem = MFGProblem(make_grid(14, 8), initial_density=lambda x: 1 + 0.05 * _s2(x))
    reg = RegularizationConfig(1e-1)
    _, _, rep = fixed_point_solve(problem, reg, FixedPointOpts(method="picard", max_iter=6))
    hist = rep.history
    rises = [i for i in range(len(hist) - 1) if hist[i + 1] > hist[i]]
    # a rise is only allowed on the final, flagged step
    assert all(i == len(hist) - 2 for i in rises)
    if rises:
        assert any("damping halvings" in f for f in rep.flags)


def test_two_starts_reach_the_same_solution(shaped_solution):
    problem, reg, shifted, m_a, u_a, report = shaped_solution
    grid = problem.grid
    rng = np.random.default_rng(9)
    t = grid.time.nodes[:, None]
    m_t = 0.02 * t * random_smooth(grid, rng, zero_mean=True)
    start = IterState(
        SpaceTimeField(grid, m_t), SpaceTimeField(grid, 0.1 * (1 - t) * random_smooth(grid, rng))
    )
    m_b, u_b, rep = fixed_point_solve(problem, reg, initial=start, shifted=shifted)
    assert rep.converged
    gap = max(np.max(np.abs(m_a.flat - m_b.flat)), np.max(np.abs(u_a.flat - u_b.flat)))
    assert gap <= 10 * 1e-6 * (1 + report.state.norm())


def test_single_entry_continuation_matches_fixed_point(trivial_solution):
    problem, reg, _, m, u, _ = trivial_solution
    ws = epsilon_continuation(problem, [reg.epsilon])
    assert np.array_equal(ws.m.flat, m.flat)
    assert np.array_equal(ws.u_tilde.flat, normalize(u).flat)
    assert np.max(np.abs(mean_in_x(ws.u_tilde))) <= 1e-10
    assert not ws.truncated


def test_truncated_continuation_keeps_history():
    problem = MFGProblem(make_grid(14, 8), initial_density=lambda x: 1 + 0.3 * _s2(x))
    opts = FixedPointOpts(newton_max_iter=1, max_iter=1)
    ws = epsilon_continuation(problem, [1e-1, 1e-2], opts)
    assert ws.truncated
    assert ws.failure.startswith("eps=0.1")
    assert len(ws.history) == 1
    assert not ws.history[0].converged


def test_nonlocal_constant_solution():
    problem = MFGProblem(make_grid(24, 24), coupling=CouplingSpec(nonlocal_variant="linear"))
    ws = epsilon_continuation(problem, [1e-1, 10**-1.5, 1e-2, 10**-2.5, 1e-3])
    assert not ws.truncated
    t = problem.grid.time.nodes[:, None]
    assert np.max(np.abs(ws.m.flat - 1.0)) <= 0.05
    target = np.broadcast_to(2.0 * (1.0 - t), ws.u.flat.shape)
    assert relative_error(ws.u.flat, target) <= 0.05
    assert np.allclose(ws.mu, 2.0, atol=0.1)
    assert math.isfinite(ws.history[-1].du_lgamma)
