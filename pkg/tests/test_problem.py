import math

import numpy as np
import pytest

from conftest import bump, make_grid
from mfgreg.problem import (
    BoundCoupling,
    BoundHamiltonian,
    CouplingSpec,
    DomainError,
    HamiltonianSpec,
    MFGProblem,
    ProblemError,
    RegularizationConfig,
    assumption_probe,
    builtin_kernel,
    eval_DpH,
    eval_H,
    terminal_shift,
)

TWO_PI = 2 * math.pi


def _points(n=5, d=1, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, d)), rng.standard_normal((n, d))


class TestHamiltonians:
    def test_quadratic_value_and_gradient(self):
        x, p = _points()
        spec = HamiltonianSpec()
        assert np.allclose(eval_H(spec, x, p), 0.5 * np.sum(p * p, axis=-1))
        assert np.allclose(eval_DpH(spec, x, p), p)

    def test_power_with_drift(self):
        x, p = _points()
        spec = HamiltonianSpec("power", coefficient=2.0, drift=0.5, gamma=1.5)
        norm = np.abs(p[:, 0])
        assert np.allclose(eval_H(spec, x, p), 2.0 * norm**1.5 + 0.5 * p[:, 0])
        assert np.allclose(eval_DpH(spec, x, p)[:, 0], 3.0 * norm**0.5 * np.sign(p[:, 0]) + 0.5)

    def test_congestion_needs_positive_density(self):
        x, p = _points()
        spec = HamiltonianSpec("congestion", gamma=2.0, tau=0.5)
        m = np.full(5, 4.0)
        assert np.allclose(eval_H(spec, x, p, m), np.sum(p * p, axis=-1) / 2.0)
        with pytest.raises(DomainError):
            eval_H(spec, x, p, np.zeros(5))
        with pytest.raises(DomainError):
            eval_H(spec, x, p)

    def test_gradient_matches_finite_differences(self):
        x, p = _points(d=2, seed=3)
        for spec in (HamiltonianSpec("power", gamma=1.7, drift=(0.2, -0.1)), HamiltonianSpec()):
            h = 1e-6
            fd = np.stack(
                [(eval_H(spec, x, p + h * e) - eval_H(spec, x, p - h * e)) / (2 * h) for e in np.eye(2)],
                axis=-1,
            )
            assert np.max(np.abs(fd - eval_DpH(spec, x, p))) < 1e-6

    def test_bound_hamiltonian_applies_terminal_offset(self):
        x, p = _points()
        off = np.full((5, 1), 0.25)
        bound = BoundHamiltonian(HamiltonianSpec(), x, off)
        assert np.allclose(bound.value(p), eval_H(HamiltonianSpec(), x, p + off))

    @pytest.mark.parametrize("gamma", [1.0, 0.5, float("nan")])
    def test_gamma_must_exceed_one(self, gamma):
        with pytest.raises(ProblemError, match="gamma > 1") as info:
            HamiltonianSpec("power", gamma=gamma)
        assert info.value.key == "hamiltonian.gamma"

    def test_tau_range_and_unknown_variant(self):
        with pytest.raises(ProblemError):
            HamiltonianSpec("congestion", tau=1.0)
        with pytest.raises(ProblemError):
            HamiltonianSpec("cubic")


class TestCouplings:
    def test_kernels_have_unit_mass_and_are_even(self):
        torus = make_grid(14, 16).torus
        for name in ("gaussian", "bump"):
            k = builtin_kernel(name, torus, 0.2)
            assert np.sum(k) * torus.cell_volume == pytest.approx(1.0, rel=1e-13)
            assert np.allclose(k, k[(-np.arange(16)) % 16])
        with pytest.raises(ProblemError):
            builtin_kernel("box", torus)

    def test_local_value_and_derivative(self):
        torus = make_grid(14, 8).torus
        c = BoundCoupling(CouplingSpec(r=0.5, local_scale=2.0), torus)
        m = np.full((3, 8), 4.0)
        assert np.allclose(c.value(m), 4.0)
        assert np.allclose(c.local_derivative(m), 0.5)
        with pytest.raises(DomainError):
            c.value(-m)

    def test_linear_nonlocal_of_constant_density(self):
        torus = make_grid(14, 16).torus
        c = BoundCoupling(CouplingSpec(nonlocal_variant="linear", nonlocal_scale=3.0), torus)
        m = np.full((2, 16), 2.0)
        # unit-mass kernels map constants to themselves
        assert np.allclose(c.value(m), 2.0 + 3.0 * 2.0)

    def test_nonlocal_jacobian_matches_finite_differences(self, rng):
        torus = make_grid(14, 8).torus
        c = BoundCoupling(CouplingSpec(nonlocal_variant="power", nonlocal_exponent=0.5), torus)
        m = 1.0 + 0.3 * rng.uniform(size=(1, 8))
        jac = c.nonlocal_jacobians(m)[0]
        h = 1e-7
        fd = np.stack(
            [(c.nonlocal_value(m + h * e[None]) - c.nonlocal_value(m - h * e[None]))[0] / (2 * h) for e in np.eye(8)],
            axis=1,
        )
        assert np.max(np.abs(fd - jac)) < 1e-6 * np.max(np.abs(jac))

    def test_nonmonotone_local_scale_needs_opt_in(self):
        with pytest.raises(ProblemError):
            CouplingSpec(local_scale=-1.0)
        assert CouplingSpec(local_scale=-1.0, allow_nonmonotone=True).local_scale == -1.0

    def test_bad_parameters(self):
        with pytest.raises(ProblemError):
            CouplingSpec(r=0.0)
        with pytest.raises(ProblemError):
            CouplingSpec(nonlocal_variant="quadratic")
        with pytest.raises(ProblemError):
            CouplingSpec(nonlocal_variant="power", nonlocal_exponent=1.5)


class TestProblem:
    def test_initial_density_must_have_unit_mass(self):
        g = make_grid()
        with pytest.raises(ProblemError, match="unit mass"):
            MFGProblem(g, initial_density=2.0)
        with pytest.raises(ProblemError, match="strictly positive"):
            MFGProblem(g, initial_density=lambda x: 1 + 1.5 * np.sin(TWO_PI * x))

    def test_density_cap_and_floor_validation(self):
        g = make_grid()
        with pytest.raises(ProblemError):
            MFGProblem(g, density_cap=1.0)
        with pytest.raises(ProblemError):
            MFGProblem(g, density_cap=1.02, initial_density=bump(0.05))
        with pytest.raises(ProblemError):
            MFGProblem(g, congestion_floor=0.5)
        prob = MFGProblem(g, hamiltonian=HamiltonianSpec("congestion"), initial_density=bump(0.2))
        assert prob.congestion_floor == pytest.approx(0.4)
        assert prob.density_floor == pytest.approx(0.4)

    def test_diffusion_must_be_symmetric_psd(self):
        g = make_grid(dim=2, nx=8)
        with pytest.raises(ProblemError):
            MFGProblem(g, diffusion=np.array([[1.0, 0.5], [0.0, 1.0]]))
        with pytest.raises(ProblemError):
            MFGProblem(g, diffusion=-0.1)
        prob = MFGProblem(g, diffusion=np.array([[0.1, 0.02], [0.02, 0.1]]))
        assert prob.diffusion.shape == (64, 2, 2)

    def test_data_are_sampled(self):
        g = make_grid()
        prob = MFGProblem(g, potential=lambda t, x: t * np.cos(TWO_PI * x), terminal_cost=lambda x: x)
        assert prob.potential.shape == g.flat_shape
        assert np.allclose(prob.potential[-1], np.cos(TWO_PI * g.torus.points[:, 0]))
        assert np.allclose(prob.terminal_cost, g.torus.points[:, 0])

    def test_regularization_validation(self):
        with pytest.raises(ProblemError):
            RegularizationConfig(1.0)
        with pytest.raises(ProblemError, match="nonnegative"):
            RegularizationConfig(0.1, sigma=-1.0)
        reg = RegularizationConfig(0.1, sigma=lambda t, x: np.sin(TWO_PI * x))
        with pytest.raises(ProblemError, match="nonnegative"):
            reg.sampled(make_grid())


class TestShift:
    def test_shift_round_trip(self, rng):
        g = make_grid()
        prob = MFGProblem(g, initial_density=bump(0.1), terminal_cost=lambda x: np.cos(TWO_PI * x))
        sp = terminal_shift(prob, RegularizationConfig(0.1))
        m, u = rng.uniform(size=g.flat_shape), rng.standard_normal(g.flat_shape)
        mt, ut = sp.shift(m, u)
        m2, u2 = sp.unshift(mt, ut)
        assert np.allclose(m2, m) and np.allclose(u2, u)

    def test_shifted_data(self):
        g = make_grid()
        prob = MFGProblem(
            g,
            initial_density=bump(0.1),
            terminal_cost=lambda x: np.cos(TWO_PI * x),
            diffusion=0.1,
            density_cap=1.5,
        )
        reg = RegularizationConfig(0.1, sigma=0.2, xi=0.3)
        sp = terminal_shift(prob, reg)
        x = g.torus.points[:, 0]
        # V^ = V + a u_T''
        assert np.allclose(sp.potential, -0.1 * TWO_PI**2 * np.cos(TWO_PI * x)[None], atol=1e-9)
        assert np.allclose(sp.sigma_hat, 0.2 + prob.initial_density[None])
        assert np.allclose(sp.xi_hat, 0.3 + np.cos(TWO_PI * x)[None])
        assert np.allclose(sp.lower, -prob.initial_density[None])
        assert np.allclose(sp.upper, 1.5 - prob.initial_density[None])
        assert np.allclose(sp.terminal_gradient[:, 0], -TWO_PI * np.sin(TWO_PI * x), atol=1e-9)


class TestAssumptionProbe:
    @pytest.mark.parametrize(
        "ham",
        [HamiltonianSpec(), HamiltonianSpec("power", gamma=1.5, drift=0.3), HamiltonianSpec("congestion", tau=0.5)],
    )
    def test_shipped_variants_pass(self, ham):
        prob = MFGProblem(make_grid(), hamiltonian=ham, initial_density=bump(0.05))
        rep = assumption_probe(prob, samples=100, seed=1)
        assert rep.passed, rep.flags
        assert rep.convexity_gap_min >= -1e-10

    def test_quadratic_constants(self):
        rep = assumption_probe(MFGProblem(make_grid()), samples=100, seed=0)
        # for |p|^2/2: -H + p.DpH = |p|^2/2, so the zero-offset coercivity constant is 2
        assert rep.coercivity_slope == pytest.approx(2.0)
        assert rep.growth_constant <= 0.5

    def test_nonmonotone_coupling_fails(self):
        coup = CouplingSpec(local_scale=-1.0, allow_nonmonotone=True)
        rep = assumption_probe(MFGProblem(make_grid(), coupling=coup), samples=50, seed=0)
        assert not rep.flags["coupling_monotone"]
        assert not rep.passed

    def test_seed_changes_samples_not_verdict(self):
        prob = MFGProblem(make_grid(), hamiltonian=HamiltonianSpec("power", gamma=1.5))
        a = assumption_probe(prob, samples=60, seed=1)
        b = assumption_probe(prob, samples=60, seed=2)
        assert a.convexity_gap_min != b.convexity_gap_min
        assert a.passed and b.passed
