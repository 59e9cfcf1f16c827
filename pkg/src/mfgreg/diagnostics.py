"""Sampled numerical checks of the estimates, identities and inequalities.

Every probe draws seeded test fields (band-limited in x, polynomial in t)
and returns a minimum or maximum over the sample together with a scale.
Sampling corroborates; it cannot prove.  Scales are absolute integrals of
the integrands of the pairing being tested, so ``value / scale`` is a
relative defect.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .fields import DiffPlan, SpaceTimeField, mean_in_x, random_smooth
from .problem import (
    BoundCoupling,
    MFGProblem,
    RegularizationConfig,
    eval_DpH,
    eval_H,
)
from .subsolvers import gram_for

__all__ = [
    "ScopeError",
    "SampledMinimum",
    "MonotonicityResult",
    "ResidualNorms",
    "DiagnosticsReport",
    "hj_field",
    "fp_field",
    "pair_F",
    "energy_report",
    "monotonicity_probe",
    "minty_residual",
    "fp_weak_residual",
    "hj_subsolution_check",
    "pde_residuals",
    "diagnose",
    "ACTIVE_THRESHOLD",
]

ACTIVE_THRESHOLD = 1e-8


class ScopeError(ValueError):
    """A check was requested outside the configuration it is stated for."""


@dataclass
class SampledMinimum:
    value: float
    scale: float
    samples: int

    @property
    def relative(self) -> float:
        return self.value / self.scale if self.scale > 0 else self.value


@dataclass
class MonotonicityResult:
    f_min: float
    f_scale: float
    gap_min: float
    samples: int

    @property
    def f_relative(self) -> float:
        return self.f_min / self.f_scale if self.f_scale > 0 else self.f_min


@dataclass
class ResidualNorms:
    hj_l2: float
    hj_linf: float
    fp_l2: float
    fp_linf: float
    active_fraction: float
    hj_dual: float | None = None
    fp_dual: float | None = None


@dataclass
class DiagnosticsReport:
    """Scalars recorded by :func:`diagnose`; ``None`` marks a skipped check."""

    energy: dict = field(default_factory=dict)
    mass_deviation: float | None = None
    monotonicity: MonotonicityResult | None = None
    minty: SampledMinimum | None = None
    fp_weak: SampledMinimum | None = None
    hj_subsolution: SampledMinimum | None = None
    residuals: ResidualNorms | None = None
    mu_deviation: float | None = None
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        out = asdict(self)
        for key in ("monotonicity", "minty", "fp_weak", "hj_subsolution"):
            val = getattr(self, key)
            if val is not None:
                out[key]["relative"] = val.f_relative if key == "monotonicity" else val.relative
        return out

    def all_finite(self) -> bool:
        def walk(obj):
            if isinstance(obj, dict):
                return all(walk(v) for v in obj.values())
            if isinstance(obj, (list, tuple)):
                return all(walk(v) for v in obj if not isinstance(v, str))
            if isinstance(obj, float):
                return math.isfinite(obj)
            return True

        return walk(self.as_dict())


# ----------------------------------------------------------------------------
# the functional F
# ----------------------------------------------------------------------------


def _arr(x) -> np.ndarray:
    return x.flat if isinstance(x, SpaceTimeField) else np.asarray(x, dtype=float)


def _plan(problem: MFGProblem, plan: DiffPlan | None, k: int = 3) -> DiffPlan:
    return plan if plan is not None else DiffPlan(problem.grid, k)


def _density_arg(problem: MFGProblem, eta: np.ndarray):
    if problem.hamiltonian.depends_on_density:
        if np.min(eta) <= 0:
            raise ValueError("congestion Hamiltonian needs a positive density")
        return eta
    return None


def hj_field(problem: MFGProblem, eta, v, plan: DiffPlan | None = None) -> np.ndarray:
    """``v_t + a : D^2 v - H(x, Dv[, eta]) + g(eta, h(eta)) + V``."""
    plan = _plan(problem, plan)
    eta, v = _arr(eta), _arr(v)
    pts = problem.grid.torus.points
    out = plan.time_matrices[1] @ v + plan.hessian_contract(problem.diffusion, v)
    out = out - eval_H(problem.hamiltonian, pts, plan.gradient(v), _density_arg(problem, eta))
    coupling = BoundCoupling(problem.coupling, problem.grid.torus)
    return out + coupling.value(np.maximum(eta, 0.0)) + problem.potential


def fp_field(problem: MFGProblem, eta, v, plan: DiffPlan | None = None, flux_density=None) -> np.ndarray:
    """``eta_t - d_ij(a_ij eta) - div(eta D_pH(x, Dv[, eta]))``."""
    plan = _plan(problem, plan)
    eta, v = _arr(eta), _arr(v)
    carrier = eta if flux_density is None else _arr(flux_density)
    pts = problem.grid.torus.points
    dph = eval_DpH(problem.hamiltonian, pts, plan.gradient(v), _density_arg(problem, eta))
    out = plan.time_matrices[1] @ eta - plan.divergence2(problem.diffusion, carrier)
    return out - plan.divergence(carrier[..., None] * dph)


def pair_F(problem: MFGProblem, eta, v, w1, w2, plan: DiffPlan | None = None) -> tuple[float, float]:
    """``<F[eta, v], (w1, w2)>`` and the absolute integral of its integrand."""
    plan = _plan(problem, plan)
    wts = problem.grid.weights
    a = hj_field(problem, eta, v, plan) * _arr(w1)
    b = fp_field(problem, eta, v, plan) * _arr(w2)
    return float(np.sum(wts * (a + b))), float(np.sum(wts * (np.abs(a) + np.abs(b))))


# ----------------------------------------------------------------------------
# test-field samplers
# ----------------------------------------------------------------------------


def _time_ramp(problem: MFGProblem, to_end: bool = False) -> np.ndarray:
    s = problem.grid.time.nodes / problem.horizon
    return ((1.0 - s) if to_end else s)[:, None]


def _feasible_density(problem: MFGProblem, rng, amplitude: float = 0.5) -> np.ndarray:
    """Smooth positive field with the initial slice pinned to ``m0``, clipped into the box."""
    grid = problem.grid
    r = random_smooth(grid, rng)
    r = amplitude * r / max(1e-300, float(np.max(np.abs(r))))
    eta = problem.initial_density[None, :] * np.exp(_time_ramp(problem) * r)
    eta = np.maximum(eta, problem.density_floor)
    if problem.density_cap is not None:
        eta = np.minimum(eta, problem.density_cap)
    eta[0] = problem.initial_density
    return eta


def _unit_mass_density(problem: MFGProblem, rng) -> np.ndarray:
    """Squared smooth field blended with ``m0`` from ``t=0`` and normalized slice by slice."""
    grid = problem.grid
    r = random_smooth(grid, rng)
    sq = r * r
    sq = sq / np.maximum(mean_in_x(sq), 1e-300)[:, None]
    theta = rng.uniform(0.05, 1.0)
    eta = problem.initial_density[None, :] + theta * _time_ramp(problem) * (sq - problem.initial_density[None, :])
    return _into_unit_box(problem, eta)


def _into_unit_box(problem: MFGProblem, eta: np.ndarray) -> np.ndarray:
    eta = np.maximum(eta, 0.0)
    mass = mean_in_x(eta)
    empty = mass <= 0
    # a massless slice carries no shape to keep; use m0 there
    eta[empty] = problem.initial_density
    mass[empty] = 1.0
    eta = eta / mass[:, None]
    floor, cap = problem.density_floor, problem.density_cap
    if floor > 0 or cap is not None:
        # pull toward m0 until the box holds; m0 itself is admissible
        m0 = problem.initial_density[None, :]
        hi = np.inf if cap is None else cap
        for _ in range(60):
            bad = (eta < floor - 1e-14) | (eta > hi + 1e-14)
            if not bad.any():
                break
            rows = bad.any(axis=1)
            eta[rows] = 0.5 * (eta[rows] + m0)
    eta[0] = problem.initial_density
    return eta


def _terminal_value(problem: MFGProblem, rng, amplitude: float = 1.0) -> np.ndarray:
    r = random_smooth(problem.grid, rng)
    return problem.terminal_cost[None, :] + amplitude * _time_ramp(problem, True) * r


# ----------------------------------------------------------------------------
# probes
# ----------------------------------------------------------------------------


def energy_report(m, u, problem: MFGProblem, reg: RegularizationConfig | None = None, plan: DiffPlan | None = None) -> dict:
    """Raw integrals of the a priori energy estimate (constants set to one)."""
    plan = _plan(problem, plan, reg.k if reg else 3)
    grid = problem.grid
    wts = grid.weights
    m, u = _arr(m), _arr(u)
    gamma = problem.hamiltonian.gamma
    sigma = reg.sampled(grid)[0] if reg is not None else np.zeros(grid.flat_shape)
    coupling = BoundCoupling(problem.coupling, grid.torus).value(np.maximum(m, 0.0))
    du = np.linalg.norm(plan.gradient(u), axis=-1)
    dug = du**gamma
    out = {
        "coupling_integral": float(np.sum(wts * m * coupling)),
        "weighted_gradient": float(np.sum(wts * (m + sigma) * dug)),
        "initial_weighted_gradient": float(np.sum(wts * problem.initial_density[None, :] * dug)),
        "du_l1": float(np.sum(wts * du)),
        "du_lgamma": float(np.sum(wts * dug) ** (1.0 / gamma)),
        "epsilon_energy_m": 0.0,
        "epsilon_energy_u": 0.0,
    }
    if reg is not None:
        gram = gram_for(plan, reg.epsilon)
        out["epsilon_energy_m"] = float(gram.energy(m))
        out["epsilon_energy_u"] = float(gram.energy(u))
    lhs = (
        out["coupling_integral"]
        + out["weighted_gradient"]
        + out["initial_weighted_gradient"]
        + out["epsilon_energy_m"]
        + out["epsilon_energy_u"]
    )
    out["lhs"] = lhs
    out["rhs_driver"] = 1.0 + out["du_l1"]
    out["ratio"] = lhs / out["rhs_driver"]
    return out


def monotonicity_probe(
    problem: MFGProblem,
    reg: RegularizationConfig | None = None,
    samples: int = 200,
    seed: int = 0,
    plan: DiffPlan | None = None,
) -> MonotonicityResult:
    """Sampled ``<F[z1] - F[z2], z1 - z2>`` over pairs in the discrete admissible sets.

    Every third pair shares its value field and every third its density,
    so the coupling and Hamiltonian parts are each probed on their own.

    With ``reg`` the ``eps``-quadratic gap ``F_eps - F = B[d eta] + B[d v]``
    is evaluated too; its minimum is reported as ``gap_min``.
    """
    plan = _plan(problem, plan, reg.k if reg else 3)
    wts = problem.grid.weights
    gram = gram_for(plan, reg.epsilon) if reg is not None else None
    rng = np.random.default_rng(seed)
    worst, worst_rel, scale_at = np.inf, np.inf, 1.0
    gap_min = np.inf
    for j in range(samples):
        e1, e2 = _feasible_density(problem, rng), _feasible_density(problem, rng)
        v1, v2 = _terminal_value(problem, rng), _terminal_value(problem, rng)
        # shared components isolate the density and value parts of the pairing
        if j % 3 == 1:
            v2 = v1
        elif j % 3 == 2:
            e2 = e1
        de, dv = e1 - e2, v1 - v2
        a = (hj_field(problem, e1, v1, plan) - hj_field(problem, e2, v2, plan)) * de
        b = (fp_field(problem, e1, v1, plan) - fp_field(problem, e2, v2, plan)) * dv
        val = float(np.sum(wts * (a + b)))
        scale = float(np.sum(wts * (np.abs(a) + np.abs(b))))
        rel = val / scale if scale > 0 else val
        if rel < worst_rel:
            worst_rel, worst, scale_at = rel, val, scale
        if gram is not None:
            gap_min = min(gap_min, gram.energy(de) + gram.energy(dv))
    return MonotonicityResult(
        f_min=float(worst),
        f_scale=float(scale_at),
        gap_min=float(gap_min) if gram is not None else 0.0,
        samples=samples,
    )


def minty_residual(
    m,
    u_tilde,
    problem: MFGProblem,
    samples: int = 100,
    seed: int = 0,
    plan: DiffPlan | None = None,
    include_candidate: bool = True,
    residual_directions: int = 0,
) -> SampledMinimum:
    """Sampled ``min <F[eta, v], (eta, v) - (m, u~)>`` over unit-mass ``eta`` and ``v(T) = u_T``.

    Global test densities square a random smooth field, blend it in from
    ``m0`` at ``t = 0`` and normalize every slice; every other pair is a
    local perturbation of the candidate at distance ``1, 0.1, 0.01``
    (renormalized).  With ``include_candidate``
    the pair ``(m, u~)`` itself is tested (pairing zero when ``m`` is
    admissible).  ``residual_directions > 0`` adds pairs
    ``(m, u~) - s (R_HJ, R_FP)`` along the candidate's own residual at
    steps ``s = 10^-j``; these detect candidates that solve the equations
    only up to a bias the random pairs do not see.  The minimum is taken
    in relative terms and returned with the scale of the minimizing pair.
    """
    plan = _plan(problem, plan)
    m, ut = _arr(m), _arr(u_tilde)
    if np.min(m) < 0:
        raise ValueError("candidate density is negative")
    rng = np.random.default_rng(seed)
    base_v = ut + float(np.mean(problem.terminal_cost))
    tests = []
    if include_candidate:
        tests.append((_into_unit_box(problem, m.copy()), base_v))
    j = 0
    while len(tests) < samples:
        if j % 2 == 0:
            tests.append((_unit_mass_density(problem, rng), _terminal_value(problem, rng)))
        else:
            step = 10.0 ** (-(j // 2 % 3))
            r = random_smooth(problem.grid, rng)
            r = r / max(1e-300, float(np.max(np.abs(r))))
            eta = _into_unit_box(problem, m + step * _time_ramp(problem) * r)
            v = base_v + step * _time_ramp(problem, True) * random_smooth(problem.grid, rng)
            tests.append((eta, v))
        j += 1
    if residual_directions:
        r_hj = hj_field(problem, m, base_v, plan)
        r_hj = (r_hj - mean_in_x(r_hj)[:, None]) * _time_ramp(problem)
        r_fp = fp_field(problem, m, base_v, plan) * _time_ramp(problem, True)
        size = max(float(np.max(np.abs(r_hj))), float(np.max(np.abs(r_fp))), 1e-300)
        for j in range(residual_directions):
            step = 10.0 ** (-j) * 0.1 / size
            eta = _into_unit_box(problem, m - step * r_hj)
            tests.append((eta, base_v - step * r_fp))
    best_rel, best, best_scale = np.inf, np.inf, 1.0
    for eta, v in tests:
        val, scale = pair_F(problem, eta, v, eta - m, v - ut, plan)
        rel = val / scale if scale > 0 else val
        if rel < best_rel:
            best_rel, best, best_scale = rel, val, scale
    return SampledMinimum(float(best), float(best_scale), len(tests))


def fp_weak_residual(
    m,
    flux,
    m0,
    problem: MFGProblem,
    samples: int = 50,
    seed: int = 0,
    plan: DiffPlan | None = None,
) -> SampledMinimum:
    """Worst ``|-int v(0) m0 - int int [(v_t + a : D^2 v) m - J . Dv]|`` over ``v(T) = 0``.

    ``flux`` has shape ``(N_t, S, d)``; the density form of the identity
    is ``m_t - d_ij(a_ij m) - div J = 0``, so ``J = m D_pH(x, Du)`` for a
    solver output.  The value field of the result is the worst absolute
    pairing; ``scale`` is the absolute integral of its terms.
    """
    plan = _plan(problem, plan)
    grid = problem.grid
    m = _arr(m)
    flux = np.asarray(flux, dtype=float)
    m0 = np.asarray(m0, dtype=float)
    wts = grid.weights
    cell = grid.torus.cell_volume
    rng = np.random.default_rng(seed)
    worst, worst_scale = 0.0, 1.0
    for _ in range(samples):
        v = _time_ramp(problem, True) * random_smooth(grid, rng)
        lin = (plan.time_matrices[1] @ v + plan.hessian_contract(problem.diffusion, v)) * m
        tr = np.sum(flux * plan.gradient(v), axis=-1)
        init = v[0] * m0 * cell
        val = -float(np.sum(init)) - float(np.sum(wts * (lin - tr)))
        scale = float(np.sum(np.abs(init))) + float(np.sum(wts * (np.abs(lin) + np.abs(tr))))
        if abs(val) >= abs(worst):
            worst, worst_scale = val, scale
    return SampledMinimum(float(abs(worst)), float(worst_scale), samples)


def hj_subsolution_check(
    m,
    u,
    problem: MFGProblem,
    samples: int = 100,
    seed: int = 0,
    plan: DiffPlan | None = None,
    allow_power: bool = False,
) -> SampledMinimum:
    """Sampled maximum of the subsolution integral over ``phi >= 0`` with ``phi(0) = 0``.

    The quantity is ``-int u_T phi(T) + int int (u phi_t + u_i (a_ij phi)_j
    - V phi + H(x, Du) phi - g(m) phi)``; a weak limit keeps it ``<= 0``.
    Stated for the quadratic Hamiltonian with local exponent ``r <= 1``;
    ``allow_power`` extends it to the power Hamiltonian.
    """
    ham, cpl = problem.hamiltonian, problem.coupling
    allowed = ("quadratic", "power") if allow_power else ("quadratic",)
    if ham.variant not in allowed or cpl.r > 1:
        raise ScopeError(
            f"subsolution check is stated for a quadratic Hamiltonian and r <= 1 "
            f"(got {ham.variant}, r={cpl.r})"
        )
    if cpl.nonlocal_variant == "power":
        raise ScopeError("subsolution check covers the linear nonlocal coupling only")
    plan = _plan(problem, plan)
    grid = problem.grid
    m, u = _arr(m), _arr(u)
    wts = grid.weights
    cell = grid.torus.cell_volume
    pts = grid.torus.points
    du = plan.gradient(u)
    ham_val = eval_H(ham, pts, du)
    gval = BoundCoupling(cpl, grid.torus).value(np.maximum(m, 0.0))
    a = problem.diffusion
    rng = np.random.default_rng(seed)
    best, best_scale = -np.inf, 1.0
    best_rel = -np.inf
    for _ in range(samples):
        r = random_smooth(grid, rng)
        phi = _time_ramp(problem) * (r * r)
        phi_t = plan.time_matrices[1] @ phi
        aphi = np.einsum("sij,ts->tsij", a, phi)
        # u_i (a_ij phi)_j
        diff = 0.0 * phi
        d = grid.torus.dim
        for i in range(d):
            for j in range(d):
                if np.any(a[:, i, j]):
                    beta = [0] * d
                    beta[j] = 1
                    diff = diff + du[..., i] * plan.derivative(aphi[..., i, j], beta)
        terms = [u * phi_t, diff, -problem.potential * phi, ham_val * phi, -gval * phi]
        term_end = -problem.terminal_cost * phi[-1] * cell
        val = float(np.sum(term_end)) + sum(float(np.sum(wts * t)) for t in terms)
        scale = float(np.sum(np.abs(term_end))) + sum(float(np.sum(wts * np.abs(t))) for t in terms)
        rel = val / scale if scale > 0 else val
        if rel > best_rel:
            best_rel, best, best_scale = rel, val, scale
    return SampledMinimum(float(best), float(best_scale), samples)


def pde_residuals(
    m,
    u,
    problem: MFGProblem,
    reg: RegularizationConfig | None = None,
    plan: DiffPlan | None = None,
    threshold: float = ACTIVE_THRESHOLD,
) -> ResidualNorms:
    """Strong-form residuals of the regularized equations (``reg=None`` means ``eps = 0``).

    The ``eps``-terms use the discrete Gram operator divided by the
    quadrature weights, the strong form carrying the natural boundary
    conditions.  The HJ residual is measured on free slices where
    ``m - floor > threshold``; the FP residual on all slices but ``t = T``.

    Applying the Gram operator to nodal data amplifies rounding in the
    highest modes, so with ``reg`` the relative residuals of the discrete
    equations in reduced coordinates are reported as well (``*_dual``;
    the HJ one includes bound multipliers where the density is active).
    """
    plan = _plan(problem, plan, reg.k if reg else 3)
    grid = problem.grid
    wts = grid.weights
    m, u = _arr(m), _arr(u)
    sigma, xi = reg.sampled(grid) if reg is not None else (0.0, 0.0)
    eta = m + sigma
    hj = hj_field(problem, m, u, plan)
    fp = fp_field(problem, m, u, plan, flux_density=eta)
    duals = [None, None]
    if reg is not None:
        gram = gram_for(plan, reg.epsilon)
        for b, (y, res, pin) in enumerate(((m + sigma, hj, 0), (u + xi, fp, -1))):
            fac = gram.factor(pin)
            gz = fac.reduce_primal(y) + fac.pinned_term(y[pin])
            dual = fac.reduce_dual(wts * res)
            duals[b] = float(np.linalg.norm(gz + dual)) / (
                float(np.linalg.norm(gz)) + float(np.linalg.norm(dual)) + 1e-300
            )
        hj = hj + gram.apply(m + sigma) / wts
        fp = fp + gram.apply(u + xi) / wts
    active = m - problem.density_floor > threshold
    if problem.density_cap is not None:
        active &= problem.density_cap - m > threshold
    active[0] = False
    fp_mask = np.ones_like(active)
    fp_mask[-1] = False

    def norms(res, mask):
        if not mask.any():
            return 0.0, 0.0
        return float(np.sqrt(np.sum(wts[mask] * res[mask] ** 2))), float(np.max(np.abs(res[mask])))

    hj2, hjinf = norms(hj, active)
    fp2, fpinf = norms(fp, fp_mask)
    free = active[1:].size
    return ResidualNorms(hj2, hjinf, fp2, fpinf, float(active[1:].sum() / free), duals[0], duals[1])


def diagnose(
    m,
    u,
    problem: MFGProblem,
    reg: RegularizationConfig | None = None,
    samples: int = 50,
    seed: int = 0,
    plan: DiffPlan | None = None,
) -> DiagnosticsReport:
    """Run the full suite on a solver output ``(m, u)`` in original variables."""
    from .fixedpoint import normalize, recover_mu

    plan = _plan(problem, plan, reg.k if reg else 3)
    grid = problem.grid
    m_f = m if isinstance(m, SpaceTimeField) else SpaceTimeField(grid, m)
    u_f = u if isinstance(u, SpaceTimeField) else SpaceTimeField(grid, u)
    rep = DiagnosticsReport()
    rep.energy = energy_report(m_f, u_f, problem, reg, plan)
    rep.mass_deviation = float(np.max(np.abs(mean_in_x(m_f) - 1.0)))
    rep.monotonicity = monotonicity_probe(problem, reg, samples, seed, plan)
    u_t = normalize(u_f)
    if np.min(m_f.flat) >= 0:
        rep.minty = minty_residual(m_f, u_t, problem, samples, seed, plan)
    else:
        rep.notes.append("minty skipped: negative density")
    pts = grid.torus.points
    dens = m_f.flat if problem.hamiltonian.depends_on_density else None
    flux = m_f.flat[..., None] * eval_DpH(problem.hamiltonian, pts, plan.gradient(u_f.flat), dens)
    rep.fp_weak = fp_weak_residual(m_f, flux, problem.initial_density, problem, samples, seed, plan)
    try:
        rep.hj_subsolution = hj_subsolution_check(m_f, u_f, problem, samples, seed, plan)
    except ScopeError as exc:
        rep.notes.append(f"hj subsolution skipped: {exc}")
    rep.residuals = pde_residuals(m_f, u_f, problem, reg, plan)
    rep.mu_deviation = float(np.max(recover_mu(m_f, u_t, problem, plan).deviation))
    return rep
