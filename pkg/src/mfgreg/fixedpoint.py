"""The fixed-point map of the regularized system, its solvers and the eps-continuation.

``apply_A`` freezes the current pair ``(m~, u)``, solves the density
subproblem and the value subproblem, and returns the new pair.  A fixed
point solves the coupled regularized system.  Two solvers are provided:

* ``method="newton"`` (default): a primal-dual interior point Newton
  method on the coupled optimality system, certified afterwards by one
  application of ``apply_A``;
* ``method="picard"``: damped iteration with adaptive damping and
  optional Anderson acceleration.

Damped Picard contracts only when the coupling is weak compared with the
regularization (roughly ``eps`` not small), so continuation runs use
Newton.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import SimpleNamespace

import numpy as np

from .fields import SpaceTimeField, mean_in_x
from .problem import (
    MFGProblem,
    RegularizationConfig,
    ShiftedProblem,
    eval_H,
    terminal_shift,
)
from .subsolvers import (
    BarrierBlock,
    bilinear_residual,
    variational_inequality_check,
    IterationLimitError,
    LinearOptions,
    VIOptions,
    assemble_f,
    assemble_variational,
    barrier_newton,
    fp_operator,
    gram_for,
    hj_operator,
    solve_bilinear,
    solve_variational,
)

__all__ = [
    "IterState",
    "FixedPointOpts",
    "FixedPointReport",
    "EpsilonRecord",
    "WeakSolution",
    "MuRecovery",
    "apply_A",
    "fixed_point_solve",
    "epsilon_continuation",
    "default_schedule",
    "normalize",
    "recover_mu",
    "reconstruct_u",
    "coupled_jacobian",
    "equation_checks",
]


@dataclass(frozen=True, eq=False)
class IterState:
    """Iterate in shifted variables: ``m~ = m - m0`` (zero at ``t=0``), ``u = u_orig - u_T`` (zero at ``t=T``)."""

    m_tilde: SpaceTimeField
    u: SpaceTimeField
    iteration: int = 0
    history: tuple = ()
    reduced_m: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, grid) -> "IterState":
        z = SpaceTimeField(grid, np.zeros(grid.flat_shape))
        return cls(z, z)

    def norm(self) -> float:
        return max(float(np.max(np.abs(self.m_tilde.flat))), float(np.max(np.abs(self.u.flat))))


@dataclass(frozen=True)
class FixedPointOpts:
    """Outer solver options.

    ``tol`` is relative: success means ``|A(z) - z|_inf <= tol (1 + |z|_inf)``.
    ``damping``, ``anderson`` and the shrink rule apply to Picard.
    """

    damping: float = 0.5
    tol: float = 1e-6
    max_iter: int = 500
    anderson: int = 0
    method: str = "newton"
    newton_max_iter: int = 80
    vi: VIOptions = field(default_factory=VIOptions)
    linear: LinearOptions = field(default_factory=LinearOptions)

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError(f"damping must lie in (0, 1], got {self.damping}")
        if not 0 <= self.anderson <= 3:
            raise ValueError("Anderson depth must lie in 0..3")
        if self.method not in ("newton", "picard"):
            raise ValueError(f"unknown fixed-point method {self.method!r}")


@dataclass
class FixedPointReport:
    converged: bool
    method: str
    iterations: int
    residual: float
    history: list
    state: IterState
    newton_iterations: int = 0
    damping: float | None = None
    flags: list = field(default_factory=list)


@dataclass
class EpsilonRecord:
    epsilon: float
    m: SpaceTimeField
    u: SpaceTimeField
    residual: float
    iterations: int
    converged: bool
    du_lgamma: float
    energy_m: float
    energy_u: float
    mass_deviation: float


@dataclass
class MuRecovery:
    mu: np.ndarray
    deviation: np.ndarray
    positive: np.ndarray


@dataclass
class WeakSolution:
    history: list
    m: SpaceTimeField
    u_tilde: SpaceTimeField
    mu: np.ndarray
    mu_deviation: np.ndarray
    u: SpaceTimeField
    truncated: bool = False
    failure: str | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def epsilons(self) -> list:
        return [rec.epsilon for rec in self.history]


# ----------------------------------------------------------------------------
# the map A
# ----------------------------------------------------------------------------


def apply_A(
    state: IterState,
    shifted: ShiftedProblem,
    reg: RegularizationConfig | None = None,
    vi_opts: VIOptions | None = None,
    linear_opts: LinearOptions | None = None,
) -> IterState:
    """One evaluation of the fixed-point map at a feasible state."""
    reg = shifted.reg if reg is None else reg
    vi_opts = vi_opts or VIOptions()
    if vi_opts.initial_guess is None:
        vi_opts = replace(vi_opts, initial_guess=state.m_tilde.flat)
    vi = assemble_variational(shifted, reg, state.m_tilde, state.u)
    m_new, _ = solve_variational(vi, vi_opts)
    sys = assemble_f(shifted, reg, state.m_tilde, state.u)
    u_new, _ = solve_bilinear(sys, linear_opts)
    return IterState(m_new, u_new, state.iteration + 1, state.history)


def _residual(a: IterState, b: IterState) -> float:
    diff = max(
        float(np.max(np.abs(a.m_tilde.flat - b.m_tilde.flat))),
        float(np.max(np.abs(a.u.flat - b.u.flat))),
    )
    return diff / (1.0 + b.norm())


# ----------------------------------------------------------------------------
# coupled Newton
# ----------------------------------------------------------------------------


def _kron_time(mat: np.ndarray, size: int) -> np.ndarray:
    return np.kron(mat, np.eye(size))


def _kron_space(mat: np.ndarray, count: int) -> np.ndarray:
    return np.kron(np.eye(count), mat)


def coupled_jacobian(shifted: ShiftedProblem, y_m: np.ndarray, y_u: np.ndarray) -> dict:
    """Dense nodal Jacobians ``dN_b/dy_c`` of the coupled residual.

    ``N_m = W * hj_operator`` and ``N_u = -W * fp_operator`` in the
    variables ``y_m = m~ + sigma^`` and ``y_u = u + xi^``.
    """
    plan = shifted.plan
    grid = shifted.grid
    nt, s = grid.flat_shape
    d = grid.torus.dim
    m_t = y_m - shifted.sigma_hat
    u_sh = y_u - shifted.xi_hat
    m = np.maximum(shifted.density(m_t), shifted.problem.density_floor)
    grad = plan.gradient(u_sh)
    ham = shifted.hamiltonian
    hp = ham.grad_p(grad, m)
    hpp = ham.hess_p(grad, m)
    hm = ham.d_m(grad, m)
    hmp = ham.d_m_grad_p(grad, m)
    a = shifted.problem.diffusion
    w = grid.weights.reshape(-1)
    dt = _kron_time(plan.time_matrices[1], s)
    dx = [_kron_space(plan.gradient_matrices[i], nt) for i in range(d)]
    second = {}
    for i in range(d):
        for j in range(i, d):
            alpha = [0] * d
            alpha[i] += 1
            alpha[j] += 1
            second[i, j] = _kron_space(plan.spatial_matrix(alpha), nt)
    coupling = shifted.coupling
    local = coupling.local_derivative(m).reshape(-1) - hm.reshape(-1)
    k_mm = np.diag(local)
    jac_nl = coupling.nonlocal_jacobians(m)
    if jac_nl is not None:
        for t, blk in enumerate(jac_nl):
            k_mm[t * s:(t + 1) * s, t * s:(t + 1) * s] += blk
    k_mu = dt.copy()
    k_um = dt.copy()
    for (i, j), dij in second.items():
        mult = 1.0 if i == j else 2.0
        aij = np.tile(a[:, i, j], nt)
        if np.any(aij):
            k_mu += mult * aij[:, None] * dij
            k_um -= mult * dij * aij[None, :]
    for i in range(d):
        k_mu -= hp[..., i].reshape(-1)[:, None] * dx[i]
        k_um -= dx[i] * (hp[..., i] + y_m * hmp[..., i]).reshape(-1)[None, :]
    k_uu = np.zeros((nt * s, nt * s))
    for i in range(d):
        for j in range(d):
            coef = (y_m * hpp[..., i, j]).reshape(-1)
            k_uu -= dx[i] @ (coef[:, None] * dx[j])
    return {
        (0, 0): w[:, None] * k_mm,
        (0, 1): w[:, None] * k_mu,
        (1, 0): w[:, None] * k_um,
        (1, 1): w[:, None] * k_uu,
    }


def _coupled_blocks(shifted: ShiftedProblem, gram) -> list[BarrierBlock]:
    fac_m = gram.factor(0)
    fac_u = gram.factor(-1)
    sig = shifted.sigma_hat
    lower = shifted.lower + sig
    upper = None if shifted.upper is None else shifted.upper + sig
    return [
        BarrierBlock(fac_m, sig[0], lower, upper),
        BarrierBlock(fac_u, shifted.xi_hat[-1], None, None),
    ]


def _newton(shifted: ShiftedProblem, reg: RegularizationConfig, state: IterState, opts: FixedPointOpts):
    grid = shifted.grid
    gram = gram_for(shifted.plan, reg.epsilon)
    blocks = _coupled_blocks(shifted, gram)
    w = grid.weights
    sig, xi = shifted.sigma_hat, shifted.xi_hat

    def nonlinear(ys):
        m_t, u_sh = ys[0] - sig, ys[1] - xi
        return [w * hj_operator(shifted, m_t, u_sh), -w * fp_operator(shifted, m_t, u_sh)]

    def jacobian(ys):
        return coupled_jacobian(shifted, ys[0], ys[1])

    y0 = [state.m_tilde.flat + sig, state.u.flat + xi]
    # the rounding floor scales with the size of the individual terms
    start = nonlinear(y0)
    scale = 1.0
    for b, r, y in zip(blocks, start, y0):
        fac = b.factor
        scale += float(np.linalg.norm(fac.reduce_dual(r)))
        scale += float(np.linalg.norm(fac.reduce_primal(y) + fac.pinned_term(y[fac.pinned])))
    result = barrier_newton(
        blocks, nonlinear, jacobian, y0, w,
        tol=1e-10 * scale, comp_tol=1e-8, max_iter=opts.newton_max_iter, mu0=opts.vi.initial_barrier,
    )
    m_t = result.ys[0] - sig
    m_t = np.maximum(m_t, shifted.lower)
    if shifted.upper is not None:
        m_t = np.minimum(m_t, shifted.upper)
    m_t[0] = 0.0
    u_sh = result.ys[1] - xi
    u_sh[-1] = 0.0
    new = IterState(
        SpaceTimeField(grid, m_t), SpaceTimeField(grid, u_sh), state.iteration, state.history, result.zs[0]
    )
    return new, result


# ----------------------------------------------------------------------------
# Picard
# ----------------------------------------------------------------------------


def _project_state(shifted: ShiftedProblem, m_t: np.ndarray) -> np.ndarray:
    m_t = np.maximum(m_t, shifted.lower)
    if shifted.upper is not None:
        m_t = np.minimum(m_t, shifted.upper)
    m_t[0] = 0.0
    return m_t


def _stack(state: IterState) -> np.ndarray:
    return np.concatenate([state.m_tilde.flat.reshape(-1), state.u.flat.reshape(-1)])


def _unstack(shifted: ShiftedProblem, vec: np.ndarray, like: IterState) -> IterState:
    grid = shifted.grid
    n = grid.flat_shape[0] * grid.flat_shape[1]
    m_t = _project_state(shifted, vec[:n].reshape(grid.flat_shape).copy())
    u = vec[n:].reshape(grid.flat_shape).copy()
    u[-1] = 0.0
    return IterState(SpaceTimeField(grid, m_t), SpaceTimeField(grid, u), like.iteration, like.history)


def _picard(shifted, reg, state: IterState, opts: FixedPointOpts):
    omega = opts.damping
    mapped = apply_A(state, shifted, reg, opts.vi, opts.linear)
    res = _residual(mapped, state)
    history = [res]
    flags = []
    xs, gs = [], []
    it = 0
    for it in range(1, opts.max_iter + 1):
        if res <= opts.tol:
            it -= 1
            break
        x = _stack(state)
        g = _stack(mapped)
        xs.append(x)
        gs.append(g)
        xs, gs = xs[-(opts.anderson + 1):], gs[-(opts.anderson + 1):]
        accepted = False
        for _shrink in range(6):
            cand = (1 - omega) * x + omega * g
            if opts.anderson and len(xs) > 1:
                cand = _anderson(xs, gs, omega)
            trial = _unstack(shifted, cand, state)
            trial_map = apply_A(trial, shifted, reg, opts.vi, opts.linear)
            trial_res = _residual(trial_map, trial)
            if trial_res <= res:
                accepted = True
                break
            omega *= 0.5
            xs, gs = xs[-1:], gs[-1:]
        if not accepted:
            flags.append(f"residual increased at iteration {it} after 5 damping halvings")
        state = IterState(trial.m_tilde, trial.u, state.iteration + 1, state.history)
        mapped, res = trial_map, trial_res
        history.append(res)
        if not accepted:
            break
    return state, res, history, it, omega, flags


def _anderson(xs, gs, omega):
    """Type-II Anderson mixing of the damped map over the stored history."""
    fs = [g - x for x, g in zip(xs, gs)]
    df = np.stack([fs[i + 1] - fs[i] for i in range(len(fs) - 1)], axis=1)
    dg = np.stack([gs[i + 1] - gs[i] for i in range(len(gs) - 1)], axis=1)
    dx = np.stack([xs[i + 1] - xs[i] for i in range(len(xs) - 1)], axis=1)
    gamma, *_ = np.linalg.lstsq(df, fs[-1], rcond=None)
    x_bar = xs[-1] - dx @ gamma
    f_bar = fs[-1] - df @ gamma
    del dg
    return x_bar + omega * f_bar


# ----------------------------------------------------------------------------
# drivers
# ----------------------------------------------------------------------------


def fixed_point_solve(
    problem: MFGProblem,
    reg: RegularizationConfig,
    opts: FixedPointOpts | None = None,
    initial: IterState | None = None,
    shifted: ShiftedProblem | None = None,
):
    """Solve the regularized system at one ``eps``.

    Returns ``(m_eps, u_eps, report)`` in original variables
    (``m = m~ + m0``, ``u = u + u_T``); ``report.state`` holds the shifted
    iterate for warm starts.
    """
    opts = opts or FixedPointOpts()
    shifted = shifted or terminal_shift(problem, reg)
    state = initial or IterState.zeros(problem.grid)
    flags: list = []
    newton_its = 0
    if opts.method == "newton":
        state, result = _newton(shifted, reg, state, opts)
        newton_its = result.iterations
        if not result.converged:
            flags.append(
                f"newton stopped after {result.iterations} iterations (residual {result.residual:.3e})"
            )
        mapped = apply_A(state, shifted, reg, opts.vi, opts.linear)
        res = _residual(mapped, state)
        history = list(result.history) + [res]
        iterations = 1
        omega = None
        if res > opts.tol:
            flags.append(f"newton result not certified (fixed-point residual {res:.3e}); continuing with picard")
            state, res, more, iterations, omega, pf = _picard(shifted, reg, state, opts)
            history += more
            flags += pf
    else:
        state, res, history, iterations, omega, flags = _picard(shifted, reg, state, opts)
    converged = res <= opts.tol
    report = FixedPointReport(
        converged=converged,
        method=opts.method,
        iterations=iterations,
        residual=res,
        history=history,
        state=state,
        newton_iterations=newton_its,
        damping=omega,
        flags=flags,
    )
    m, u = shifted.unshift(state.m_tilde.flat, state.u.flat)
    return SpaceTimeField(problem.grid, m), SpaceTimeField(problem.grid, u), report


def default_schedule() -> list[float]:
    """``1e-1`` down to ``1e-4`` with ratio ``10^(-1/2)``."""
    return [10.0 ** (-1 - 0.5 * j) for j in range(7)]


def normalize(u: SpaceTimeField) -> SpaceTimeField:
    """``u~ = u - <u>`` slice by slice."""
    return SpaceTimeField(u.grid, u.flat - mean_in_x(u)[:, None])


def _du_lgamma(problem: MFGProblem, plan, u: np.ndarray) -> float:
    grad = plan.gradient(u)
    gamma = problem.hamiltonian.gamma
    norm = np.linalg.norm(grad, axis=-1)
    return float(np.sum(problem.grid.weights * norm**gamma) ** (1 / gamma))


def epsilon_continuation(
    problem: MFGProblem,
    schedule=None,
    opts: FixedPointOpts | None = None,
    reg: RegularizationConfig | None = None,
    initial: IterState | None = None,
) -> WeakSolution:
    """Solve along a decreasing ``eps`` schedule with warm starts.

    A failed ``eps`` truncates the continuation; the partial history is
    kept and ``truncated`` is set.
    """
    schedule = default_schedule() if schedule is None else [float(e) for e in schedule]
    if not schedule:
        raise ValueError("empty eps schedule")
    if any(not 0 < e < 1 for e in schedule):
        raise ValueError("eps values must lie in (0, 1)")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("eps schedule must be strictly decreasing")
    opts = opts or FixedPointOpts()
    base = reg or RegularizationConfig(schedule[0])
    grid = problem.grid
    state = initial
    history: list[EpsilonRecord] = []
    failure = None
    plan = None
    for eps in schedule:
        reg_e = base.with_epsilon(eps)
        shifted = terminal_shift(problem, reg_e, plan)
        plan = shifted.plan
        try:
            m, u, rep = fixed_point_solve(problem, reg_e, opts, initial=state, shifted=shifted)
        except (IterationLimitError, ArithmeticError, ValueError) as exc:
            failure = f"eps={eps:g}: {exc}"
            break
        gram = gram_for(plan, eps)
        history.append(
            EpsilonRecord(
                epsilon=eps,
                m=m,
                u=u,
                residual=rep.residual,
                iterations=rep.iterations + rep.newton_iterations,
                converged=rep.converged,
                du_lgamma=_du_lgamma(problem, plan, u.flat),
                energy_m=float(np.sqrt(gram.energy(m.flat))),
                energy_u=float(np.sqrt(gram.energy(u.flat))),
                mass_deviation=float(np.max(np.abs(mean_in_x(m) - 1.0))),
            )
        )
        state = rep.state
        if not rep.converged:
            failure = f"eps={eps:g}: not converged (residual {rep.residual:.3e})"
            break
    if not history:
        raise IterationLimitError(failure or "continuation produced no solution")
    last = history[-1]
    u_tilde = normalize(last.u)
    rec = recover_mu(last.m, u_tilde, problem)
    return WeakSolution(
        history=history,
        m=last.m,
        u_tilde=u_tilde,
        mu=rec.mu,
        mu_deviation=rec.deviation,
        u=reconstruct_u(u_tilde, rec.mu),
        truncated=failure is not None,
        failure=failure,
    )


def equation_checks(
    shifted: ShiftedProblem,
    state: IterState,
    reg: RegularizationConfig | None = None,
    samples: int = 50,
    seed: int = 0,
) -> dict:
    """Sampled weak-form checks of a fixed point (shifted variables).

    ``e2`` is the relative minimum of the density inequality over feasible
    ``w``; ``e3`` the worst relative defect of the value equation over
    masked ``v``.  Both are frozen at ``state`` itself.
    """
    reg = shifted.reg if reg is None else reg
    vi = assemble_variational(shifted, reg, state.m_tilde, state.u)
    cert = None
    if state.reduced_m is not None:
        cert = SimpleNamespace(reduced=state.reduced_m)
    low, scale = variational_inequality_check(vi, state.m_tilde, cert, samples, seed)
    sys = assemble_f(shifted, reg, state.m_tilde, state.u)
    e3 = bilinear_residual(sys, state.u, samples, seed)
    return {"e2": low / scale if scale > 0 else low, "e2_min": low, "e2_scale": scale, "e3": e3}


# ----------------------------------------------------------------------------
# mu and the classical candidate
# ----------------------------------------------------------------------------


def recover_mu(m: SpaceTimeField, u_tilde: SpaceTimeField, problem: MFGProblem, plan=None) -> MuRecovery:
    """Slice means (and deviations) of ``u~_t + a : D^2 u~ - H(x, Du~) + g(m, h(m)) + V``."""
    from .fields import DiffPlan
    from .problem import BoundCoupling

    plan = plan or DiffPlan(problem.grid, 3)
    grid = problem.grid
    u = u_tilde.flat
    mm = m.flat
    positive = np.min(mm, axis=1) > 0
    grad = plan.gradient(u)
    dens = mm
    if problem.hamiltonian.depends_on_density:
        dens = np.maximum(mm, problem.density_floor)
    expr = plan.time_matrices[1] @ u + plan.hessian_contract(problem.diffusion, u)
    expr = expr - eval_H(problem.hamiltonian, grid.torus.points, grad, dens)
    expr = expr + BoundCoupling(problem.coupling, grid.torus).value(np.maximum(mm, 0.0))
    expr = expr + problem.potential
    return MuRecovery(mu=expr.mean(axis=1), deviation=expr.std(axis=1), positive=positive)


def reconstruct_u(u_tilde: SpaceTimeField, mu: np.ndarray) -> SpaceTimeField:
    """``u = u~ + int_t^T mu ds`` with the trapezoid rule."""
    tail = u_tilde.grid.time.cumulative_to_end(np.asarray(mu, dtype=float))
    return SpaceTimeField(u_tilde.grid, u_tilde.flat + tail[:, None])
