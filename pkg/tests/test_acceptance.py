"""The ten acceptance criteria, one test each.

Each test records its measured values with ``record_property("detail", ...)``;
the terminal summary prints one PASS/FAIL line per criterion.
"""

import dataclasses
import json
import time

import numpy as np
import pytest
from conftest import DATA, bump, make_grid
from oracles import gram_solve_mp, relative_error

from mfgreg import problem as problem_module
from mfgreg.cli import (
    EXIT_INPUT,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    EXIT_PROBE,
    export_fields,
    load_config,
    main,
    read_fields,
    read_fields_csv,
    shipped_config_names,
)
from mfgreg.diagnostics import energy_report, minty_residual, monotonicity_probe
from mfgreg.fields import DiffPlan, SpaceTimeField, random_smooth
from mfgreg.fixedpoint import (
    FixedPointOpts,
    IterState,
    default_schedule,
    epsilon_continuation,
    fixed_point_solve,
    reconstruct_u,
    recover_mu,
)
from mfgreg.problem import MFGProblem, RegularizationConfig, terminal_shift
from mfgreg.subsolvers import (
    LinearSystem,
    QuadraticVI,
    assemble_f,
    assemble_variational,
    bilinear_residual,
    directional_derivative_check,
    gram_for,
    solve_bilinear,
    solve_variational,
    variational_inequality_check,
)

TREND_SCHEDULE = [1e-1, 10**-1.5, 1e-2, 10**-2.5, 1e-3]


def _s2(x):
    return np.sin(2 * np.pi * x)


class Detail:
    """Collects named measurements and the checks made on them."""

    def __init__(self, record):
        self.record = record
        self.failed = []

    def check(self, label: str, ok: bool, text: str):
        self.record("detail", f"{label} {text}{'' if ok else ' (FAIL)'}")
        if not ok:
            self.failed.append(label)

    def finish(self):
        assert not self.failed, f"failed checks: {', '.join(self.failed)}"


@pytest.fixture
def detail(record_property):
    return Detail(record_property)


@pytest.fixture(scope="module")
def trivial():
    return MFGProblem(make_grid(24, 24))


@pytest.fixture(scope="module")
def trend(trivial):
    start = time.perf_counter()
    ws = epsilon_continuation(trivial, TREND_SCHEDULE)
    return ws, time.perf_counter() - start


@pytest.fixture(scope="module")
def shipped_solutions():
    out = {}
    for name in shipped_config_names():
        cfg = load_config(name)
        out[name] = (cfg, epsilon_continuation(cfg.problem, cfg.schedule, cfg.solver, cfg.reg))
    return out


def test_criterion_01_analytic_solution_recovery(trivial, trend, detail):
    ws, seconds = trend
    assert not ws.truncated
    t = trivial.grid.time.nodes[:, None]
    m_err = float(np.max(np.abs(ws.m.flat - 1.0)))
    ut_max = float(np.max(np.abs(ws.u_tilde.flat)))
    mu = recover_mu(ws.m, ws.u_tilde, trivial).mu
    u = reconstruct_u(ws.u_tilde, mu)
    u_err = float(np.max(np.abs(u.flat - (1.0 - t))))
    detail.check("|m-1|", m_err <= 0.05, f"{m_err:.2e} <= 0.05")
    detail.check("|u~|", ut_max <= 0.05, f"{ut_max:.2e} <= 0.05")
    detail.check("|u-(T-t)|", u_err <= 0.05, f"{u_err:.2e} <= 0.05")
    detail.check("runtime", seconds <= 60, f"{seconds:.1f}s <= 60s")
    detail.finish()


def test_criterion_02_epsilon_trend(trend, detail):
    ws, _ = trend
    dev = [float(np.max(np.abs(r.m.flat - 1.0))) for r in ws.history]
    mass = [r.mass_deviation for r in ws.history]
    detail.check("entries", len(ws.history) == len(TREND_SCHEDULE), f"{len(ws.history)}")
    detail.check("|m-1| decreasing", all(b < a for a, b in zip(dev, dev[1:])), " ".join(f"{v:.2e}" for v in dev))
    detail.check("mass deviation decreasing", all(b < a for a, b in zip(mass, mass[1:])), " ".join(f"{v:.2e}" for v in mass))
    detail.finish()


def _active_vi(nt, nx, eps):
    grid = make_grid(nt, nx)
    problem = MFGProblem(grid, initial_density=bump(0.5), terminal_cost=lambda x: 0.1 * np.cos(2 * np.pi * x))
    reg = RegularizationConfig(eps)
    shifted = terminal_shift(problem, reg)
    zero = np.zeros(grid.flat_shape)
    vi = assemble_variational(shifted, reg, zero, zero)
    push = 3 * _s2(grid.torus.points[:, 0])[None, :] * grid.time.nodes[:, None]
    vi = dataclasses.replace(vi, linear_term=SpaceTimeField(grid, vi.linear_term.flat + push))
    return grid, problem, shifted, reg, vi


def test_criterion_03_subproblem_oracles(detail):
    grid = make_grid(16, 16)
    rng = np.random.default_rng(3)
    worst_vi = 0.0
    for eps in (1e-1, 1e-3):
        gram = gram_for(DiffPlan(grid, 3), eps)
        b = random_smooth(grid, rng)
        zero = np.zeros(grid.flat_shape)
        far = SpaceTimeField(grid, np.full(grid.flat_shape, -1e8))
        vi = QuadraticVI(gram, SpaceTimeField(grid, zero), SpaceTimeField(grid, b), far)
        w, _ = solve_variational(vi)
        assert np.min(w.flat) > -1e7, "the far bound must stay inactive"
        worst_vi = max(worst_vi, relative_error(w.flat, gram_solve_mp(gram, -grid.weights * b, 0)))
    detail.check("VI vs extended-precision CG", worst_vi <= 1e-6, f"{worst_vi:.1e} <= 1e-6")

    gram = gram_for(DiffPlan(grid, 3), 1e-2)
    exact = random_smooth(grid, np.random.default_rng(7)) * (1.0 - grid.time.nodes[:, None])
    exact[-1] = 0.0
    u, _ = solve_bilinear(LinearSystem(gram, SpaceTimeField(grid, gram.apply(exact) / grid.weights)))
    # relative error in the energy norm; nodal recovery is float64 ill-posed at this order
    bil = float(np.sqrt(gram.energy(u.flat - exact) / gram.energy(exact)))
    detail.check("bilinear manufactured", bil <= 1e-6, f"{bil:.1e} <= 1e-6 (energy norm)")

    grid_a, _, _, _, vi = _active_vi(16, 16, 1e-1)
    fd = 0.0
    for _ in range(5):
        w = random_smooth(grid_a, rng) * grid_a.time.nodes[:, None]
        dw = random_smooth(grid_a, rng) * grid_a.time.nodes[:, None]
        fd = max(fd, directional_derivative_check(vi, w, dw))
    detail.check("directional derivative vs FD", fd <= 1e-6, f"{fd:.1e} <= 1e-6")
    detail.finish()


def test_criterion_04_optimality_certificates(detail):
    for nt, eps in ((16, 1e-1), (24, 1e-3)):
        _, _, _, _, vi = _active_vi(nt, nt, eps)
        m, cert = solve_variational(vi)
        worst, scale = variational_inequality_check(vi, m, cert, samples=50, seed=0)
        detail.check(
            f"VI {nt}x{nt} eps={eps:g}",
            cert.converged and worst >= -cert.tolerance * scale and cert.complementarity <= cert.tolerance,
            f"min {worst / scale:.1e}*scale >= -{cert.tolerance:.0e}, complementarity {cert.complementarity:.1e}",
        )
    grid = make_grid(24, 24)
    problem = MFGProblem(grid, initial_density=bump(0.5), terminal_cost=lambda x: 0.1 * np.cos(2 * np.pi * x))
    rng = np.random.default_rng(0)
    t = grid.time.nodes[:, None]
    for eps in (1e-1, 1e-3):
        reg = RegularizationConfig(eps)
        system = assemble_f(terminal_shift(problem, reg), reg, 0.1 * random_smooth(grid, rng) * t,
                            0.1 * random_smooth(grid, rng) * (1 - t))
        u, _ = solve_bilinear(system)
        res = bilinear_residual(system, u, samples=50, seed=0)
        detail.check(f"bilinear eps={eps:g}", res <= 1e-7, f"{res:.1e} <= 1e-7")
    detail.finish()


def test_criterion_05_monotonicity_suite(detail):
    for name in shipped_config_names():
        cfg = load_config(name)
        res = monotonicity_probe(cfg.problem, cfg.reg, samples=200, seed=cfg.seed)
        ok = res.f_min >= -1e-8 * res.f_scale and res.gap_min >= 0.0
        detail.check(name, ok, f"F {res.f_relative:.2e}, gap {res.gap_min:.1e}")
    control = load_config(DATA / "nonmonotone.toml")
    bad = monotonicity_probe(control.problem, control.reg, samples=200, seed=0)
    detail.check("g=-m control", bad.f_min < -1e-8 * bad.f_scale, f"F {bad.f_relative:.2e} < -1e-8")
    detail.finish()


def test_criterion_06_minty_inequality(shipped_solutions, detail):
    for name, (cfg, ws) in shipped_solutions.items():
        last = ws.history[-1]
        res = minty_residual(last.m, ws.u_tilde, cfg.problem, samples=cfg.samples, seed=cfg.seed)
        detail.check(name, not ws.truncated and res.value >= -1e-4 * res.scale, f"{res.relative:.2e}")
    cfg, ws = shipped_solutions["trivial"]
    grid = cfg.problem.grid
    x = grid.torus.points[:, 0]
    t = grid.time.nodes[:, None]
    bad_m = SpaceTimeField(grid, np.maximum(ws.m.flat + 0.5 * _s2(x)[None, :], 0.0))
    bad_u = SpaceTimeField(grid, ws.u_tilde.flat + 0.5 * _s2(x)[None, :] * (1 - t))
    for label, m, ut in (("corrupt m", bad_m, ws.u_tilde), ("corrupt u", ws.m, bad_u)):
        res = minty_residual(m, ut, cfg.problem, samples=cfg.samples, seed=cfg.seed)
        detail.check(label, res.value <= -1e-2 * res.scale, f"{res.relative:.2e} <= -1e-2")
    detail.finish()


def test_criterion_07_uniqueness(detail):
    cfg = load_config("nontrivial")
    problem, grid = cfg.problem, cfg.problem.grid
    t = grid.time.nodes[:, None]
    tol = cfg.solver.tol
    for eps in default_schedule():
        reg = cfg.reg.with_epsilon(eps)
        shifted = terminal_shift(problem, reg)
        m_a, u_a, rep_a = fixed_point_solve(problem, reg, cfg.solver, shifted=shifted)
        rng = np.random.default_rng(1)
        start = IterState(
            SpaceTimeField(grid, 0.02 * t * random_smooth(grid, rng, zero_mean=True)),
            SpaceTimeField(grid, 0.1 * (1 - t) * random_smooth(grid, rng)),
        )
        m_b, u_b, rep_b = fixed_point_solve(problem, reg, cfg.solver, initial=start, shifted=shifted)
        gap = max(np.max(np.abs(m_a.flat - m_b.flat)), np.max(np.abs(u_a.flat - u_b.flat)))
        bound = 10 * tol * (1 + rep_a.state.norm())
        detail.check(f"eps={eps:.1e}", rep_a.converged and rep_b.converged and gap <= bound, f"{gap:.1e}")
    detail.finish()


def test_criterion_08_variant_correctness(monkeypatch, detail):
    seen = []
    original = problem_module._power_parts

    def spy(spec, x, p, m):
        if spec.variant == "congestion" and m is not None:
            seen.append(float(np.min(m)))
        return original(spec, x, p, m)

    monkeypatch.setattr(problem_module, "_power_parts", spy)
    opts = dataclasses.replace(load_config("congestion").solver, max_iter=500)
    for name in ("density_cap", "congestion"):
        cfg = load_config(name)
        assert cfg.problem.grid.flat_shape == (20, 20)
        ws = epsilon_continuation(cfg.problem, cfg.schedule, opts, cfg.reg)
        iters = max(r.iterations for r in ws.history)
        detail.check(f"{name} converged", not ws.truncated and iters <= 500, f"max {iters} iterations")
        m = np.stack([r.m.flat for r in ws.history])
        if name == "density_cap":
            cap = cfg.problem.density_cap
            detail.check("0 <= m <= M", bool(np.all(m >= 0) and np.all(m <= cap)), f"[{m.min():.4f}, {m.max():.4f}] in [0, {cap}]")
        else:
            floor = cfg.problem.density_floor
            detail.check("m >= delta0", bool(np.all(m >= floor)), f"min {m.min():.4f} >= {floor:.4f}")
            detail.check("H at m > 0 only", bool(seen) and min(seen) > 0, f"{len(seen)} calls, min m {min(seen):.4f}")
    detail.finish()


def test_criterion_09_a_priori_trends(shipped_solutions, detail):
    # no growth along the schedule: the largest value stays within the factor of the first
    for name in ("trivial", "nonlocal"):
        cfg, ws = shipped_solutions[name]
        assert len(ws.history) == len(default_schedule())
        du = [r.du_lgamma for r in ws.history]
        detail.check(f"{name} |Du|_Lgamma", max(du) <= 2 * max(du[0], 1e-12), f"max {max(du):.3e}, first {du[0]:.3e}")
        for key in ("energy_m", "energy_u"):
            vals = [getattr(r, key) for r in ws.history]
            detail.check(f"{name} sqrt(eps) {key}", max(vals) <= 4 * vals[0], f"{vals[0]:.3e} -> {vals[-1]:.3e}")
    cfg, ws = shipped_solutions["trivial"]
    ratios = [energy_report(r.m, r.u, cfg.problem, cfg.reg.with_epsilon(r.epsilon))["ratio"] for r in ws.history]
    detail.check("trivial energy ratio", max(ratios) <= 2 * min(ratios), f"{min(ratios):.4f}..{max(ratios):.4f}")
    detail.finish()


def test_criterion_10_determinism_and_io(tmp_path, capsys, detail):
    def run(*args):
        status = main([str(a) for a in args] + ["--quiet"])
        capsys.readouterr()
        return status

    def run_dir(base):
        (only,) = [p for p in base.iterdir() if p.is_dir()]
        return only

    small = tmp_path / "small.toml"
    small.write_text(
        "[problem]\ninitial_density = \"1 + 0.3*sin(2*pi*x)\"\n\n"
        "[grid]\ntime_nodes = 14\nspace_points = 8\n\n[regularization]\nschedule = [1e-1, 1e-2]\n\n"
        "[diagnostics]\nprobe_samples = 20\n"
    )
    a = run("solve", "--config", small, "--out", tmp_path / "a")
    b = run("solve", "--config", small, "--out", tmp_path / "b")
    csv_a = (run_dir(tmp_path / "a") / "fields.csv").read_bytes()
    csv_b = (run_dir(tmp_path / "b") / "fields.csv").read_bytes()
    detail.check("bit-identical CSV", a == b == EXIT_OK and csv_a == csv_b, f"{len(csv_a)} bytes")

    grid = load_config(small).problem.grid
    cols = read_fields_csv(run_dir(tmp_path / "a") / "fields.csv", grid)
    exact = True
    for fmt in ("csv", "json", "npz"):
        back = read_fields(export_fields(cols, tmp_path / f"rt.{fmt}", fmt), grid)
        exact &= all(np.array_equal(back[k], cols[k]) for k in cols)
    detail.check("round trip", exact, "csv json npz exact")

    gamma = tmp_path / "gamma.toml"
    gamma.write_text(small.read_text().replace("[grid]", '[problem.hamiltonian]\nvariant = "power"\ngamma = 0.5\n\n[grid]'))
    stalled = tmp_path / "stalled.toml"
    stalled.write_text(small.read_text() + "\n[solver]\nmax_iter = 1\nnewton_max_iter = 1\n")
    bad_csv = tmp_path / "bad.csv"
    bad_csv.write_text("t,x,m,u,u_tilde\n0,0,1,1\n")
    codes = {
        "solve ok": (run("solve", "--config", small, "--out", tmp_path / "c"), EXIT_OK),
        "probe ok": (run("probe", "--config", small, "--out", tmp_path / "c"), EXIT_OK),
        "gamma 0.5": (run("solve", "--config", gamma, "--out", tmp_path / "c"), EXIT_INPUT),
        "malformed csv": (run("diagnose", "--config", small, "--fields", bad_csv, "--out", tmp_path / "c"), EXIT_INPUT),
        "missing config": (run("probe", "--config", tmp_path / "none.toml"), EXIT_INPUT),
        "no convergence": (run("solve", "--config", stalled, "--out", tmp_path / "d"), EXIT_NOT_CONVERGED),
        "g=-m probe": (run("probe", "--config", DATA / "nonmonotone.toml", "--out", tmp_path / "e"), EXIT_PROBE),
    }
    for label, (got, want) in codes.items():
        detail.check(label, got == want, f"exit {got}")
    report = json.loads((run_dir(tmp_path / "d") / "report.json").read_text())
    detail.check("artifacts on non-convergence", not report["converged"], "report written")
    detail.finish()
