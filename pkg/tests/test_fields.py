import math

import numpy as np
import pytest

from conftest import make_grid
from mfgreg.fields import (
    DiffPlan,
    FieldError,
    GramOperator,
    NonFiniteError,
    OrderExceededError,
    ShapeMismatchError,
    SpaceTimeField,
    TimeGrid,
    TorusGrid,
    convolve_x,
    fornberg_weights,
    inner,
    mass_per_slice,
    mean_in_x,
    partial,
    random_smooth,
)

TWO_PI = 2 * math.pi


def test_fornberg_weights_differentiate_polynomials_exactly():
    nodes = np.linspace(0.0, 1.0, 7)
    z = 0.3
    w = fornberg_weights(z, nodes, 2)
    for p in range(7):
        second = p * (p - 1) * z ** (p - 2) if p >= 2 else 0.0
        assert np.dot(w[:, 2], nodes**p) == pytest.approx(second, abs=1e-9)
        assert np.dot(w[:, 0], nodes**p) == pytest.approx(z**p, abs=1e-12)


def test_time_quadrature_is_exact_to_degree_2order_minus_1():
    tg = TimeGrid(2.0, 16, order=6)
    for p in range(12):
        exact = 2.0 ** (p + 1) / (p + 1)
        assert np.dot(tg.quad_weights, tg.nodes**p) == pytest.approx(exact, rel=1e-11)
    assert np.all(tg.quad_weights > 0)


def test_first_derivative_is_summation_by_parts():
    tg = TimeGrid(1.0, 16, order=6)
    q = np.diag(tg.quad_weights) @ tg.first_derivative
    boundary = np.zeros((16, 16))
    boundary[0, 0], boundary[-1, -1] = -1.0, 1.0
    assert np.max(np.abs(q + q.T - boundary)) < 1e-11
    for p in range(7):
        deriv = p * tg.nodes ** max(p - 1, 0) if p else 0 * tg.nodes
        assert np.max(np.abs(tg.first_derivative @ tg.nodes**p - deriv)) < 1e-8


def test_cumulative_to_end_of_one_is_remaining_time():
    tg = TimeGrid(1.5, 14)
    assert np.max(np.abs(tg.cumulative_to_end(np.ones(14)) - (1.5 - tg.nodes))) < 1e-14


@pytest.mark.parametrize("n", [7, 6, 9])
def test_torus_rejects_bad_point_counts(n):
    with pytest.raises(FieldError):
        TorusGrid(1, n)


def test_grid_rejects_bad_time_nodes():
    with pytest.raises(FieldError):
        TimeGrid(1.0, 5)
    with pytest.raises(FieldError):
        TimeGrid(-1.0, 16)


def test_field_rejects_non_finite_and_wrong_shape():
    g = make_grid(14, 8)
    bad = np.zeros(g.flat_shape)
    bad[3, 2] = np.nan
    with pytest.raises(NonFiniteError):
        SpaceTimeField(g, bad)
    with pytest.raises(ShapeMismatchError):
        SpaceTimeField(g, np.zeros((5, 5)))


def test_spectral_x_derivatives_of_trig_are_exact():
    g = make_grid(16, 16)
    plan = DiffPlan(g, 3)
    f = SpaceTimeField.from_function(g, lambda t, x: t * np.sin(TWO_PI * x))
    x = g.torus.points[:, 0]
    mixed = partial(plan, f, (1, 1)).flat
    assert np.max(np.abs(mixed - TWO_PI * np.cos(TWO_PI * x)[None])) < 1e-9
    second = partial(plan, f, (0, 2)).flat
    ref = -(TWO_PI**2) * g.time.nodes[:, None] * np.sin(TWO_PI * x)[None]
    assert np.max(np.abs(second - ref)) < 1e-9


def test_time_derivatives_of_polynomials():
    g = make_grid(16, 8)
    plan = DiffPlan(g, 3)
    f = SpaceTimeField.from_function(g, lambda t, x: t**2 + 0 * x)
    assert np.max(np.abs(partial(plan, f, (2, 0)).flat - 2.0)) < 1e-8
    assert np.max(np.abs(partial(plan, f, (1, 0)).flat - 2 * g.time.nodes[:, None])) < 1e-9


def test_derivative_order_above_2k_is_rejected():
    g = make_grid(16, 8)
    plan = DiffPlan(g, 3)
    f = SpaceTimeField(g, np.zeros(g.flat_shape))
    with pytest.raises(OrderExceededError):
        partial(plan, f, (4, 3))


def test_plan_requires_regularity_order():
    with pytest.raises(FieldError):
        DiffPlan(make_grid(16, 8), 2)


def test_gradient_and_divergence_are_adjoint(rng):
    g = make_grid(14, 16)
    plan = DiffPlan(g, 3)
    a = random_smooth(g, rng)
    v = random_smooth(g, rng)[..., None]
    lhs = np.sum(plan.gradient(a) * v)
    rhs = -np.sum(a * plan.divergence(v))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_means_mass_inner_and_convolution():
    g = make_grid(14, 16)
    f = SpaceTimeField.from_function(g, lambda t, x: 2.0 + np.cos(TWO_PI * x) + t)
    assert np.max(np.abs(mean_in_x(f) - (2.0 + g.time.nodes))) < 1e-14
    assert np.max(np.abs(mass_per_slice(f) - (2.0 + g.time.nodes))) < 1e-14
    one = SpaceTimeField(g, np.ones(g.flat_shape))
    assert inner(one, one) == pytest.approx(1.0, rel=1e-12)
    delta = np.zeros(16)
    delta[0] = 1.0 / g.torus.cell_volume
    assert np.max(np.abs(convolve_x(delta, f).flat - f.flat)) < 1e-13


class TestGram:
    @pytest.fixture
    def gram(self):
        g = make_grid(16, 16)
        return GramOperator(DiffPlan(g, 3), 1e-3)

    def test_symmetric_and_energy_matches_apply(self, gram, rng):
        g = gram.grid
        w, v = random_smooth(g, rng), random_smooth(g, rng)
        a = np.sum(gram.apply(w) * v)
        b = np.sum(w * gram.apply(v))
        assert a == pytest.approx(b, rel=1e-9)
        assert gram.energy(w, v) == pytest.approx(a, rel=1e-9)
        assert gram.energy(w) > 0

    def test_constants_carry_only_the_zeroth_order_term(self, gram):
        g = gram.grid
        one = np.ones(g.flat_shape)
        ref = gram.epsilon * g.weights
        assert np.max(np.abs(gram.apply(one) - ref)) <= 1e-9 * np.max(ref)
        assert gram.energy_terms(one)["top"] == pytest.approx(0.0, abs=1e-14)

    def test_factor_solve_recovers_manufactured_field(self, gram):
        g = gram.grid
        u = g.sample(lambda t, x: (1 - t) * np.sin(TWO_PI * x) + (1 - t) ** 2)
        fac = gram.factor(-1)
        y = fac.solve(gram.apply(u), u[-1])
        assert np.max(np.abs(y - u)) <= 1e-7 * np.max(np.abs(u))
        res, ref = fac.residual_norm(y, gram.apply(u))
        assert res <= 1e-9 * ref

    def test_reduced_coordinates_are_an_isometry(self, gram, rng):
        g = gram.grid
        fac = gram.factor(0)
        w = random_smooth(g, rng)
        w[0] = 0.0
        z = fac.reduce_primal(w)
        assert np.sum(z * z) == pytest.approx(gram.energy(w), rel=1e-9)
        assert np.max(np.abs(fac.expand(z, None) - w)) <= 1e-8 * np.max(np.abs(w))
