"""Frozen-coefficient subproblems: the obstacle-type quadratic minimization and the SPD solve.

Both subproblems are posed on the variables ``y = w + offset`` where the
offset is ``sigma^`` (density problem) or ``xi^`` (value problem).  The
Gram operator then only ever acts on unknowns through its QR factor:
``G_FF = R^T R`` per Fourier mode, and the reduced coordinates
``z = R y_free`` turn the quadratic part into the identity.  Applying
``G`` to a nodal field is avoided on purpose, since the order-``2k``
symbols amplify rounding in high modes far beyond any useful tolerance.

Bounds are handled by a primal-dual interior point method whose
multipliers ``lambda`` are densities: at a solution
``G y + W b = W (lambda_lo - lambda_hi)`` on free nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .fields import DiffPlan, GramFactor, GramOperator, SpaceTimeField, random_smooth
from .problem import RegularizationConfig, ShiftedProblem

__all__ = [
    "SolverError",
    "IterationLimitError",
    "AssemblyError",
    "PreconditionError",
    "VIOptions",
    "LinearOptions",
    "QuadraticVI",
    "LinearSystem",
    "SolveCertificate",
    "gram_for",
    "assemble_variational",
    "solve_variational",
    "assemble_f",
    "solve_bilinear",
    "directional_derivative_check",
    "objective",
    "variational_inequality_check",
    "bilinear_residual",
    "projected_bb",
    "pcg",
    "BarrierBlock",
    "barrier_newton",
]


class SolverError(RuntimeError):
    pass


class IterationLimitError(SolverError):
    """Raised when a solver runs out of iterations; carries the best iterate."""

    def __init__(self, message: str, best=None, certificate=None):
        super().__init__(message)
        self.best = best
        self.certificate = certificate


class AssemblyError(SolverError):
    """The assembled operator is not SPD (indicates an assembly bug)."""


class PreconditionError(ValueError):
    """Frozen data violate a solver precondition."""


# ----------------------------------------------------------------------------
# options, systems and certificates
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class VIOptions:
    """Options of :func:`solve_variational`.

    ``tol`` is absolute on the stationarity residual; ``None`` means
    ``1e-7 * (1 + |linear_term|_*)`` with the dual energy norm.
    ``method`` is ``"interior-point"`` or ``"projected-gradient"``.
    """

    tol: float | None = None
    max_iter: int = 200
    method: str = "interior-point"
    initial_barrier: float = 1e-2
    initial_guess: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in ("interior-point", "projected-gradient"):
            raise ValueError(f"unknown VI method {self.method!r}")


@dataclass(frozen=True)
class LinearOptions:
    """Options of :func:`solve_bilinear` (``method`` is ``"direct"`` or ``"pcg"``)."""

    tol: float = 1e-8
    max_iter: int = 500
    method: str = "direct"
    preconditioner: str = "block"
    initial_guess: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in ("direct", "pcg"):
            raise ValueError(f"unknown linear method {self.method!r}")
        if self.preconditioner not in ("block", "lumped"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass(frozen=True, eq=False)
class QuadraticVI:
    """``min I[w] = B[w + offset]/2 + <b, w>`` over ``lower <= w <= upper``, ``w(0) = 0``.

    ``affine_offset`` holds the field ``sigma^`` itself; its Gram image is
    the strong-form offset of the objective and is never formed nodally.
    """

    gram: GramOperator
    affine_offset: SpaceTimeField
    linear_term: SpaceTimeField
    lower_bound: SpaceTimeField
    upper_bound: SpaceTimeField | None = None
    pinned: int = 0

    def __post_init__(self):
        lo = self.lower_bound.flat
        if np.any(lo > 0):
            raise PreconditionError("lower bound must be <= 0 so that w = 0 is feasible")
        if self.upper_bound is not None and np.any(self.upper_bound.flat < 0):
            raise PreconditionError("upper bound must be >= 0 so that w = 0 is feasible")

    @property
    def grid(self):
        return self.gram.grid


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``B[u + offset, v] = <rhs, v>`` for all ``v`` with ``v(T) = 0``, and ``u(T) = 0``.

    ``rhs`` is the density representer under the quadrature pairing.
    """

    gram: GramOperator
    rhs: SpaceTimeField
    offset: np.ndarray | None = None
    pinned: int = -1

    @property
    def grid(self):
        return self.gram.grid


@dataclass
class SolveCertificate:
    """Convergence record of a subproblem solve.

    For the VI, ``projected_gradient`` is the stationarity residual in the
    dual energy norm and ``complementarity`` the largest
    ``min(multiplier, distance to bound)`` over free nodes.  For linear
    solves ``cg_residual`` is the relative (recursive) CG residual and
    ``floor`` the float64 round-trip level of the grid.
    """

    kind: str
    method: str
    converged: bool
    iterations: int
    residual: float
    tolerance: float
    projected_gradient: float | None = None
    complementarity: float | None = None
    cg_residual: float | None = None
    floor: float | None = None
    reduced: np.ndarray | None = field(default=None, repr=False)
    multipliers: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.converged and not self.residual <= self.tolerance:
            raise AssertionError("converged certificate with residual above tolerance")


# ----------------------------------------------------------------------------
# assembly
# ----------------------------------------------------------------------------

_GRAM_CACHE: dict = {}


def gram_for(plan: DiffPlan, epsilon: float) -> GramOperator:
    """Shared Gram operator per ``(plan, eps)``; factorizations are expensive."""
    key = (id(plan), float(epsilon))
    hit = _GRAM_CACHE.get(key)
    if hit is None or hit[0] is not plan:
        if len(_GRAM_CACHE) > 32:
            _GRAM_CACHE.clear()
        hit = (plan, GramOperator(plan, epsilon))
        _GRAM_CACHE[key] = hit
    return hit[1]


def _arr(x) -> np.ndarray:
    return x.flat if isinstance(x, SpaceTimeField) else np.asarray(x, dtype=float)


def _frozen_density(shifted: ShiftedProblem, m1: np.ndarray) -> np.ndarray:
    m = shifted.density(m1)
    floor = shifted.problem.density_floor
    slack = 1e-10 * max(1.0, float(np.max(np.abs(m))))
    if np.min(m) < floor - slack:
        raise PreconditionError(
            f"frozen density violates the floor {floor}: min(m1 + m0) = {np.min(m):.3e}"
        )
    return np.maximum(m, floor)


def hj_operator(shifted: ShiftedProblem, m1: np.ndarray, u1: np.ndarray) -> np.ndarray:
    """``u_t + a : D^2 u - H^(x, Du[, m]) + g^(m~) + V^`` for shifted ``(m~, u)``."""
    plan = shifted.plan
    m = _frozen_density(shifted, m1)
    grad = plan.gradient(u1)
    out = plan.time_matrices[1] @ u1
    out = out + plan.hessian_contract(shifted.problem.diffusion, u1)
    out = out - shifted.hamiltonian.value(grad, m)
    out = out + shifted.coupling.value(m) + shifted.potential
    return out


def fp_operator(shifted: ShiftedProblem, m1: np.ndarray, u1: np.ndarray) -> np.ndarray:
    """``-m~_t + d_ij(a_ij y) + div(y D_pH^)`` with ``y = m~ + sigma^``.

    The divergence term is the weak form ``-<y D_pH, Dv>`` written as a
    density; spectral differentiation is exactly skew on the torus, so the
    two coincide to rounding.
    """
    plan = shifted.plan
    m = _frozen_density(shifted, m1)
    y = m1 + shifted.sigma_hat
    flux = y[..., None] * shifted.hamiltonian.grad_p(plan.gradient(u1), m)
    out = -(plan.time_matrices[1] @ m1)
    out = out + plan.divergence2(shifted.problem.diffusion, y)
    return out + plan.divergence(flux)


def assemble_variational(
    shifted: ShiftedProblem, reg: RegularizationConfig | None, m1, u1
) -> QuadraticVI:
    """Frozen density subproblem at ``(m1, u1)`` (shifted variables)."""
    reg = shifted.reg if reg is None else reg
    if reg.k != shifted.reg.k:
        raise PreconditionError("regularization order differs from the shifted problem")
    grid = shifted.grid
    m1, u1 = _arr(m1), _arr(u1)
    b = hj_operator(shifted, m1, u1)
    upper = None if shifted.upper is None else SpaceTimeField(grid, shifted.upper)
    return QuadraticVI(
        gram=gram_for(shifted.plan, reg.epsilon),
        affine_offset=SpaceTimeField(grid, shifted.sigma_hat),
        linear_term=SpaceTimeField(grid, b),
        lower_bound=SpaceTimeField(grid, shifted.lower),
        upper_bound=upper,
    )


def assemble_f(shifted: ShiftedProblem, reg: RegularizationConfig | None, m1, u1) -> LinearSystem:
    """Frozen value subproblem at ``(m1, u1)`` (shifted variables)."""
    reg = shifted.reg if reg is None else reg
    m1, u1 = _arr(m1), _arr(u1)
    return LinearSystem(
        gram=gram_for(shifted.plan, reg.epsilon),
        rhs=SpaceTimeField(shifted.grid, fp_operator(shifted, m1, u1)),
        offset=shifted.xi_hat,
    )


# ----------------------------------------------------------------------------
# barrier Newton engine
# ----------------------------------------------------------------------------


@dataclass
class BarrierBlock:
    """One unknown ``y`` with a pinned slice and optional box bounds on free nodes."""

    factor: GramFactor
    pinned_values: np.ndarray | None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    @property
    def bounded(self) -> bool:
        return self.lower is not None or self.upper is not None


@dataclass
class BarrierResult:
    ys: list
    zs: list
    lams: list
    iterations: int
    residual: float
    complementarity: float
    barrier: float
    converged: bool
    history: list


def _pinned(block: BarrierBlock) -> np.ndarray:
    fac = block.factor
    if fac.pinned is None or block.pinned_values is None:
        return np.zeros((fac.gram.grid.torus.size, fac.n_free))
    return fac.pinned_term(block.pinned_values)


def _interior_start(block: BarrierBlock, y: np.ndarray) -> np.ndarray:
    y = y.copy()
    free = block.factor.free
    lo = block.lower[free] if block.lower is not None else -np.inf
    hi = block.upper[free] if block.upper is not None else np.inf
    width = np.where(np.isfinite(hi - lo), hi - lo, np.inf)
    margin = np.minimum(1e-3, 0.25 * width)
    y[free] = np.clip(y[free], lo + margin, hi - margin)
    return y


def _distances(block: BarrierBlock, y: np.ndarray):
    free = block.factor.free
    d_lo = y[free] - block.lower[free] if block.lower is not None else None
    d_hi = block.upper[free] - y[free] if block.upper is not None else None
    return d_lo, d_hi


def barrier_newton(
    blocks: Sequence[BarrierBlock],
    nonlinear: Callable[[list], list],
    jacobian: Callable[[list], dict] | None,
    y0: Sequence[np.ndarray],
    weights: np.ndarray,
    *,
    tol: float,
    comp_tol: float,
    max_iter: int = 100,
    mu0: float = 1e-2,
) -> BarrierResult:
    """Primal-dual interior point Newton method in reduced coordinates.

    Solves, for every block ``b`` on its free nodes,

        G y_b + N_b(y) - W lambda_lo + W lambda_hi = 0,
        lambda_lo (y - lo) = 0,  lambda_hi (hi - y) = 0,  lambda >= 0,

    where ``N`` returns nodal dot representers and ``jacobian`` returns
    ``{(b, c): dN_b/dy_c}`` as dense nodal matrices (``None`` for constant
    ``N``).  The state is kept both as nodal ``y`` (for ``N`` and the
    bounds) and as reduced ``z``; the Gram part of the residual always
    uses ``z``.
    """
    nb = len(blocks)
    facs = [b.factor for b in blocks]
    sizes = [f.size for f in facs]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    pins = [_pinned(b) for b in blocks]
    w_free = [weights[f.free] for f in facs]
    ys = []
    for blk, y in zip(blocks, y0):
        y = np.array(y, dtype=float)
        if blk.factor.pinned is not None and blk.pinned_values is not None:
            y[blk.factor.pinned] = blk.pinned_values
        ys.append(_interior_start(blk, y) if blk.bounded else y)
    zs = [f.reduce_primal(y) for f, y in zip(facs, ys)]
    any_bounds = any(b.bounded for b in blocks)
    mu = mu0 if any_bounds else 0.0
    mu_floor = (0.1 * comp_tol) ** 2
    lams = []
    for blk, y in zip(blocks, ys):
        d_lo, d_hi = _distances(blk, y)
        lams.append((None if d_lo is None else mu / d_lo, None if d_hi is None else mu / d_hi))

    def residuals(ys_, zs_, lams_, mu_):
        nl = nonlinear(ys_)
        out_kkt, out_mu = [], []
        for b, blk in enumerate(blocks):
            f = facs[b]
            base = nl[b].copy()
            kkt = base.copy()
            bar = base.copy()
            d_lo, d_hi = _distances(blk, ys_[b])
            wl = np.zeros_like(base)
            wb = np.zeros_like(base)
            if d_lo is not None:
                wl[f.free] -= w_free[b] * lams_[b][0]
                wb[f.free] -= w_free[b] * (mu_ / d_lo)
            if d_hi is not None:
                wl[f.free] += w_free[b] * lams_[b][1]
                wb[f.free] += w_free[b] * (mu_ / d_hi)
            gz = zs_[b] + pins[b]
            out_kkt.append(gz + f.reduce_dual(kkt + wl))
            out_mu.append(gz + f.reduce_dual(bar + wb))
        return out_kkt, out_mu

    def complementarity(ys_, lams_):
        worst = 0.0
        for b, blk in enumerate(blocks):
            d_lo, d_hi = _distances(blk, ys_[b])
            if d_lo is not None:
                worst = max(worst, float(np.max(np.minimum(lams_[b][0], d_lo))))
            if d_hi is not None:
                worst = max(worst, float(np.max(np.minimum(lams_[b][1], d_hi))))
        return worst

    def norm(parts):
        return float(np.sqrt(sum(np.sum(p * p) for p in parts)))

    history = []
    kkt, rmu = residuals(ys, zs, lams, mu)
    solve_factor = None
    it = 0
    for it in range(1, max_iter + 1):
        res = norm(kkt)
        comp = complementarity(ys, lams) if any_bounds else 0.0
        history.append(res)
        if res <= tol and comp <= comp_tol and mu <= mu_floor:
            it -= 1
            break
        # rounding floor: no progress over several steps at the final barrier
        if (
            mu <= mu_floor
            and comp <= comp_tol
            and len(history) > 5
            and res > 0.5 * min(history[-6:-1])
            and min(history[-6:-1]) <= 100 * tol
        ):
            it -= 1
            break
        # Newton matrix in reduced coordinates
        jac = jacobian(ys) if jacobian is not None else {}
        if jac or any_bounds or solve_factor is None:
            mat = np.eye(offs[-1])
            for (b, c), k in jac.items():
                mat[offs[b]:offs[b + 1], offs[c]:offs[c + 1]] += (
                    facs[b].primal_matrix.T @ (k @ facs[c].primal_matrix)
                )
            for b, blk in enumerate(blocks):
                if not blk.bounded:
                    continue
                d_lo, d_hi = _distances(blk, ys[b])
                sig = np.zeros(weights.shape)
                if d_lo is not None:
                    sig[facs[b].free] += lams[b][0] / d_lo
                if d_hi is not None:
                    sig[facs[b].free] += lams[b][1] / d_hi
                phi = facs[b].primal_matrix
                mat[offs[b]:offs[b + 1], offs[b]:offs[b + 1]] += phi.T @ (
                    (weights * sig).reshape(-1)[:, None] * phi
                )
            solve_factor = linalg.lu_factor(mat, check_finite=True)
        rhs = -np.concatenate([r.reshape(-1) for r in rmu])
        dz_all = linalg.lu_solve(solve_factor, rhs)
        dzs = [dz_all[offs[b]:offs[b + 1]].reshape(zs[b].shape) for b in range(nb)]
        dys = [
            (facs[b].primal_matrix @ dzs[b].reshape(-1)).reshape(weights.shape) for b in range(nb)
        ]
        # multiplier steps and fraction to the boundary
        alpha_p, alpha_d = 1.0, 1.0
        dlams = []
        for b, blk in enumerate(blocks):
            if not blk.bounded:
                dlams.append((None, None))
                continue
            d_lo, d_hi = _distances(blk, ys[b])
            dy = dys[b][facs[b].free]
            pair = []
            for d, lam, sgn in ((d_lo, lams[b][0], 1.0), (d_hi, lams[b][1], -1.0)):
                if d is None:
                    pair.append(None)
                    continue
                dd = sgn * dy
                dl = mu / d - lam - lam * dd / d
                neg = dd < 0
                if np.any(neg):
                    alpha_p = min(alpha_p, float(np.min(-0.995 * d[neg] / dd[neg])))
                negl = dl < 0
                if np.any(negl):
                    alpha_d = min(alpha_d, float(np.min(-0.995 * lam[negl] / dl[negl])))
                pair.append(dl)
            dlams.append(tuple(pair))
        # backtracking on the barrier residual
        phi0 = norm(rmu)
        alpha = alpha_p
        trial = None
        for _ in range(30):
            ys_t = [ys[b] + alpha * dys[b] for b in range(nb)]
            zs_t = [zs[b] + alpha * dzs[b] for b in range(nb)]
            lams_t = []
            for b in range(nb):
                lams_t.append(tuple(
                    None if lam is None else lam + alpha_d * dl
                    for lam, dl in zip(lams[b], dlams[b])
                ))
            try:
                kkt_t, rmu_t = residuals(ys_t, zs_t, lams_t, mu)
            except (ValueError, FloatingPointError):
                alpha *= 0.5
                continue
            trial = (ys_t, zs_t, lams_t, norm(rmu_t))
            if trial[3] <= (1 - 1e-4 * alpha) * phi0 or phi0 <= 10 * tol:
                break
            alpha *= 0.5
        if trial is None:
            break
        # a stalled line search keeps its last trial; non-convergence is reported
        ys, zs, lams = trial[:3]
        # the barrier residual has a rounding floor far above tol once W lambda is large
        floor_hit = alpha < 1e-6 and norm(residuals(ys, zs, lams, mu)[0]) <= tol
        if any_bounds and (trial[3] <= 10 * max(mu, tol) or floor_hit):
            mu = max(mu_floor, min(0.2 * mu, mu**1.5))
        kkt, rmu = residuals(ys, zs, lams, mu)
    res = norm(kkt)
    comp = complementarity(ys, lams) if any_bounds else 0.0
    # stray multipliers act as forces of size lambda / eps, so the final barrier is required
    converged = res <= tol and comp <= comp_tol and (mu <= mu_floor or not any_bounds)
    return BarrierResult(ys, zs, lams, it, res, comp, mu, converged, history)


# ----------------------------------------------------------------------------
# variational subproblem
# ----------------------------------------------------------------------------


def _vi_blocks(vi: QuadraticVI) -> BarrierBlock:
    fac = vi.gram.factor(vi.pinned)
    off = vi.affine_offset.flat
    lower = vi.lower_bound.flat + off
    upper = None if vi.upper_bound is None else vi.upper_bound.flat + off
    lower = np.where(np.isfinite(lower), lower, np.nan)
    lo = None if np.all(np.isnan(lower)) else np.where(np.isnan(lower), -np.inf, lower)
    if lo is not None and np.all(np.isinf(lo[fac.free])):
        lo = None
    if upper is not None and np.all(np.isinf(upper[fac.free])):
        upper = None
    return BarrierBlock(fac, off[fac.pinned] if fac.pinned is not None else None, lo, upper)


def dual_norm(fac: GramFactor, dual_nodal: np.ndarray) -> float:
    return float(np.linalg.norm(fac.reduce_dual(dual_nodal)))


def default_vi_tol(vi: QuadraticVI) -> float:
    fac = vi.gram.factor(vi.pinned)
    return 1e-7 * (1.0 + dual_norm(fac, vi.grid.weights * vi.linear_term.flat))


def _infinite_bounds(blk: BarrierBlock) -> BarrierBlock:
    # unbounded coordinates carry no barrier
    for name in ("lower", "upper"):
        bound = getattr(blk, name)
        if bound is not None and not np.all(np.isfinite(bound[blk.factor.free])):
            if np.any(np.isfinite(bound[blk.factor.free])):
                raise PreconditionError("mixed finite/infinite bounds are not supported")
            setattr(blk, name, None)
    return blk


def solve_variational(vi: QuadraticVI, opts: VIOptions | None = None):
    """Minimize the frozen density objective; returns ``(m_star, certificate)``.

    ``m_star`` is in the variables of the VI (``w``, pinned to 0 at ``t = 0``)
    and satisfies the bounds exactly.
    """
    opts = opts or VIOptions()
    if opts.method == "projected-gradient":
        return _solve_vi_projected(vi, opts)
    grid = vi.grid
    blk = _infinite_bounds(_vi_blocks(vi))
    fac = blk.factor
    tol = default_vi_tol(vi) if opts.tol is None else float(opts.tol)
    wb = grid.weights * vi.linear_term.flat
    off = vi.affine_offset.flat
    start = off.copy() if opts.initial_guess is None else _arr(opts.initial_guess) + off
    comp_tol = tol
    result = barrier_newton(
        [blk], lambda ys: [wb], None, [start], grid.weights,
        tol=tol, comp_tol=comp_tol, max_iter=opts.max_iter, mu0=opts.initial_barrier,
    )
    w = _project(vi, result.ys[0] - off)
    cert = SolveCertificate(
        kind="variational",
        method="interior-point",
        converged=result.converged,
        iterations=result.iterations,
        residual=result.residual,
        tolerance=tol,
        projected_gradient=result.residual,
        complementarity=result.complementarity,
        reduced=result.zs[0],
        multipliers=result.lams[0],
    )
    field_ = SpaceTimeField(grid, w)
    if not result.converged:
        raise IterationLimitError(
            f"interior point stopped after {result.iterations} iterations "
            f"(residual {result.residual:.3e}, tol {tol:.3e})",
            best=field_,
            certificate=cert,
        )
    return field_, cert


def _project(vi: QuadraticVI, w: np.ndarray) -> np.ndarray:
    w = np.maximum(w, vi.lower_bound.flat)
    if vi.upper_bound is not None:
        w = np.minimum(w, vi.upper_bound.flat)
    w[vi.pinned] = 0.0
    return w


def objective(vi: QuadraticVI, w) -> float:
    """``I[w] = B[w + offset]/2 + <b, w>``."""
    w = _arr(w)
    y = w + vi.affine_offset.flat
    return 0.5 * vi.gram.energy(y) + float(np.sum(vi.grid.weights * vi.linear_term.flat * w))


def objective_derivative(vi: QuadraticVI, w, dw) -> float:
    w, dw = _arr(w), _arr(dw)
    y = w + vi.affine_offset.flat
    return vi.gram.energy(y, dw) + float(np.sum(vi.grid.weights * vi.linear_term.flat * dw))


def directional_derivative_check(vi: QuadraticVI, w, dw, step: float | None = None) -> float:
    """Relative gap between the analytic Gateaux derivative of ``I`` and a central difference."""
    w, dw = _arr(w), _arr(dw)
    analytic = objective_derivative(vi, w, dw)
    if not np.any(dw):
        return abs(analytic)
    if step is None:
        step = 1e-3 * (1.0 + float(np.max(np.abs(w)))) / float(np.max(np.abs(dw)))
    fd = (objective(vi, w + step * dw) - objective(vi, w - step * dw)) / (2 * step)
    return abs(fd - analytic) / max(abs(analytic), abs(fd), np.finfo(float).tiny)


def variational_inequality_check(
    vi: QuadraticVI,
    m_star,
    certificate: SolveCertificate | None = None,
    samples: int = 50,
    seed: int = 0,
) -> tuple[float, float]:
    """Sampled discrete variational inequality at ``m_star``.

    Returns ``(min over directions of <I'(m*), w - m*>, scale)`` with ``w``
    drawn from the feasible set: clipped random smooth fields and clipped
    perturbations of ``m_star``.  When the certificate carries reduced
    coordinates they represent ``m_star`` in the Gram pairing; otherwise
    the nodal field is reduced.
    """
    grid = vi.grid
    fac = vi.gram.factor(vi.pinned)
    m = _arr(m_star)
    off = vi.affine_offset.flat
    if certificate is not None and certificate.reduced is not None:
        z = certificate.reduced
    else:
        z = fac.reduce_primal(m + off)
    gz = z + _pinned(BarrierBlock(fac, off[fac.pinned]))
    wb = grid.weights * vi.linear_term.flat
    rng = np.random.default_rng(seed)
    worst = np.inf
    scale = 0.0
    gnorm = float(np.linalg.norm(gz + fac.reduce_dual(wb)))
    for j in range(samples):
        delta = random_smooth(grid, rng)
        if j % 2:
            w = m + delta * rng.uniform(0.01, 1.0)
        else:
            w = delta
        w = _project(vi, w)
        v = w - m
        pairing = float(np.sum(gz * fac.reduce_primal(v))) + float(np.sum(wb * v))
        worst = min(worst, pairing)
        scale = max(scale, (1.0 + gnorm) * float(np.sqrt(vi.gram.energy(v))))
    return worst, scale


def _solve_vi_projected(vi: QuadraticVI, opts: VIOptions):
    """Projected Barzilai-Borwein warm-up, finished by an active-set polish.

    In reduced coordinates the objective is ``|A y - c|^2 / 2`` with ``A``
    the nodal-to-reduced map, so the box QP is a bounded least squares
    problem.  BB on nodal values stalls on the conditioning of the Gram
    operator, so once its active set has settled for a few iterations the
    working-set loop finishes with equality-constrained least squares
    solves on ``A`` rather than ``A^T A``.  Dense in the number of free
    nodes (small problems only).
    """
    grid = vi.grid
    fac = vi.gram.factor(vi.pinned)
    free = fac.free
    off = vi.affine_offset.flat
    wts = grid.weights
    wb = wts * vi.linear_term.flat
    tol = default_vi_tol(vi) if opts.tol is None else float(opts.tol)
    pinned_values = off[fac.pinned] if fac.pinned is not None else None

    def full(x):
        y = off.copy()
        y[free] = x.reshape(len(free), -1)
        return y

    def grad(x):
        return (vi.gram.apply(full(x)) + wb)[free].reshape(-1)

    lo_full = vi.lower_bound.flat + off
    hi_full = np.full(lo_full.shape, np.inf) if vi.upper_bound is None else vi.upper_bound.flat + off
    lo = lo_full[free].reshape(-1)
    hi = hi_full[free].reshape(-1)
    x0 = off[free].reshape(-1) if opts.initial_guess is None else (_arr(opts.initial_guess) + off)[free].reshape(-1)
    x, info = projected_bb(grad, lo, hi, x0, tol=tol, max_iter=opts.max_iter, metric=wts[free].reshape(-1), freeze=5)
    iterations = info["iterations"]

    pins = _pinned(BarrierBlock(fac, pinned_values))
    target = -(pins + fac.reduce_dual(wb))
    amat = np.empty((fac.size, x.size))
    unit = np.zeros(grid.flat_shape)
    for col, e in enumerate(np.eye(x.size)):
        unit[free] = e.reshape(len(free), -1)
        amat[:, col] = fac.reduce_primal(unit).reshape(-1)
    rows = np.ravel_multi_index(
        (np.repeat(free, grid.torus.size), np.tile(np.arange(grid.torus.size), len(free))), grid.flat_shape
    )

    def kkt(x, at_lo, at_hi):
        # multipliers on the working set, fitted in reduced coordinates
        active = np.flatnonzero(at_lo | at_hi)
        gap = (amat @ x - target.reshape(-1))
        lam = np.zeros(x.size)
        if active.size:
            unit = np.zeros((wts.size, active.size))
            unit[rows[active], np.arange(active.size)] = 1.0
            k = fac.rows_to_reduced(unit)
            lam[active] = linalg.lstsq(k, gap)[0]
            gap = gap - k @ lam[active]
        # densities: positive at the lower bound and negative at the upper bound
        lam = lam / wts[free].reshape(-1)
        wrong = np.where(at_lo, np.maximum(-lam, 0.0), 0.0) + np.where(at_hi, np.maximum(lam, 0.0), 0.0)
        return lam, float(np.linalg.norm(gap)), wrong

    # nodes within rounding of a bound start in the working set
    near = 1e-9 * (1.0 + float(np.max(np.abs(x))))
    at_lo = x - lo <= near
    at_hi = hi - x <= near
    x, at_lo, at_hi, polish = _polish_active_set(amat, target.reshape(-1), lo, hi, x, at_lo, at_hi, kkt, tol)
    iterations += polish
    lam, residual, wrong = kkt(x, at_lo, at_hi)
    z = (amat @ x).reshape(target.shape)
    y = full(x)
    dist = np.where(at_lo | at_hi, 0.0, np.minimum(x - lo, hi - x))
    comp = max(
        float(np.max(wrong, initial=0.0)),
        float(np.max(np.minimum(np.abs(lam), dist), initial=0.0)),
    )
    converged = residual <= tol and comp <= tol
    w = _project(vi, y - off)
    cert = SolveCertificate(
        kind="variational",
        method="projected-gradient",
        converged=converged,
        iterations=iterations,
        residual=residual,
        tolerance=tol,
        projected_gradient=residual,
        complementarity=comp,
        reduced=z,
    )
    field_ = SpaceTimeField(grid, w)
    if not converged:
        raise IterationLimitError(
            f"projected gradient stopped after {iterations} iterations "
            f"(residual {residual:.3e}, tol {tol:.3e})",
            best=field_,
            certificate=cert,
        )
    return field_, cert


def _polish_active_set(amat, target, lo, hi, x, at_lo, at_hi, kkt, tol, max_iter=None):
    """Lawson-Hanson style working-set loop for ``min |A x - target|`` over a box.

    Each step solves the equality-constrained least squares problem with
    the working set fixed at its bounds, stepping back to the first
    blocking bound when the candidate leaves the box, and releases the
    node whose multiplier has the worst wrong sign.
    """
    n = x.size
    max_iter = 10 * n if max_iter is None else max_iter

    def candidate(at_lo, at_hi):
        fixed = at_lo | at_hi
        y = np.where(at_lo, lo, np.where(at_hi, hi, 0.0))
        if np.any(~fixed):
            rhs = target - amat[:, fixed] @ y[fixed]
            y[~fixed] = linalg.lstsq(amat[:, ~fixed], rhs)[0]
        return y

    it = 0
    release = False
    while it < max_iter:
        it += 1
        if release:
            _, _, wrong = kkt(x, at_lo, at_hi)
            if np.max(wrong, initial=0.0) <= tol:
                break
            i = int(np.argmax(wrong))
            at_lo[i] = at_hi[i] = False
        cand = candidate(at_lo, at_hi)
        free = ~(at_lo | at_hi)
        below = free & (cand < lo)
        above = free & (cand > hi)
        if not np.any(below | above):
            x = cand
            release = True
            continue
        # step back to the first bound the candidate crosses
        step = cand - x
        ratio = np.full(n, np.inf)
        ratio[below] = (lo[below] - x[below]) / step[below]
        ratio[above] = (hi[above] - x[above]) / step[above]
        j = int(np.argmin(ratio))
        x = np.clip(x + max(0.0, min(1.0, ratio[j])) * step, lo, hi)
        if below[j]:
            at_lo[j] = True
        else:
            at_hi[j] = True
        release = False
    return x, at_lo, at_hi, it


def projected_bb(
    grad: Callable[[np.ndarray], np.ndarray],
    lower: np.ndarray,
    upper: np.ndarray,
    x0: np.ndarray,
    *,
    tol: float,
    max_iter: int = 1000,
    metric: np.ndarray | None = None,
    memory: int = 10,
    freeze: int | None = None,
):
    """Projected Barzilai-Borwein gradient for a convex quadratic over a box.

    ``grad`` returns the plain-dot gradient; ``metric`` (diagonal, e.g.
    quadrature weights) turns it into a density so the step is mesh
    independent.  Non-monotone Armijo test on the quadratic model.  The
    stopping quantity is the norm of the projected-gradient step at unit
    step length.  With ``freeze``, also stops once the set of nodes at a
    bound has been unchanged for that many iterations.
    """
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    metric = np.ones_like(x0) if metric is None else np.asarray(metric, float)
    proj = lambda v: np.clip(v, lower, upper)  # noqa: E731
    x = proj(np.asarray(x0, float))
    g = grad(x)
    # objective differences of a quadratic from gradients: f(x+d) - f(x) = d.(g + g_new)/2
    values = [0.0]
    step = 1.0
    pg = np.inf
    it = 0
    last_active, repeats = None, 0
    for it in range(1, max_iter + 1):
        pgv = proj(x - g / metric) - x
        pg = float(np.sqrt(np.sum(metric * pgv**2)))
        if pg <= tol:
            it -= 1
            break
        if freeze is not None:
            active = ((x <= lower) | (x >= upper)).tobytes()
            repeats = repeats + 1 if active == last_active else 0
            last_active = active
            if repeats >= freeze:
                break
        d = proj(x - step * g / metric) - x
        lam = 1.0
        ref = max(values[-memory:])
        while True:
            xn = x + lam * d
            gn = grad(xn)
            df = float(np.dot(lam * d, 0.5 * (g + gn)))
            if values[-1] + df <= ref + 1e-4 * lam * float(np.dot(g, d)) or lam < 1e-12:
                break
            lam *= 0.5
        s = xn - x
        yv = gn - g
        sy = float(np.dot(s, yv))
        ss = float(np.dot(s * metric, s))
        step = ss / sy if sy > 0 else 1e3 * step
        values.append(values[-1] + df)
        x, g = xn, gn
    pgv = proj(x - g / metric) - x
    comp = float(np.max(np.minimum(np.abs(g / metric), np.minimum(x - lower, upper - x)), initial=0.0))
    return x, {"converged": pg <= tol, "iterations": it, "residual": pg, "complementarity": comp}


# ----------------------------------------------------------------------------
# bilinear subproblem
# ----------------------------------------------------------------------------


def _linear_parts(sys: LinearSystem):
    fac = sys.gram.factor(sys.pinned)
    grid = sys.grid
    offset = np.zeros(grid.flat_shape) if sys.offset is None else np.asarray(sys.offset, float)
    dual = grid.weights * sys.rhs.flat
    pinned_values = offset[fac.pinned] if fac.pinned is not None else None
    return fac, offset, dual, pinned_values


def solve_bilinear(sys: LinearSystem, opts: LinearOptions | None = None):
    """Solve the masked SPD system; returns ``(u_star, certificate)`` with ``u_star(T) = 0``."""
    opts = opts or LinearOptions()
    fac, offset, dual, pinned_values = _linear_parts(sys)
    grid = sys.grid
    target = fac.reduce_dual(dual)
    if pinned_values is not None:
        target = target - fac.pinned_term(pinned_values)
    if opts.method == "direct":
        z = target
        backward, floor = fac.backward_error(z)
        residual, iters, cg_res = backward, 1, None
        converged = residual <= opts.tol
    else:
        z, info = _pcg_modal(sys, fac, dual, pinned_values, opts)
        residual, iters, cg_res = info["residual"], info["iterations"], info["residual"]
        floor = info["floor"]
        converged = info["converged"]
    y = fac.expand(z, pinned_values)
    u = y - offset
    if fac.pinned is not None:
        u[fac.pinned] = 0.0
    cert = SolveCertificate(
        kind="linear",
        method=opts.method,
        converged=converged,
        iterations=iters,
        residual=residual,
        tolerance=opts.tol,
        cg_residual=cg_res,
        floor=floor,
        reduced=z,
    )
    field_ = SpaceTimeField(grid, u)
    if not converged:
        raise IterationLimitError(
            f"linear solve did not reach tol {opts.tol:.1e} (residual {residual:.3e})",
            best=field_,
            certificate=cert,
        )
    return field_, cert


def _pcg_modal(sys: LinearSystem, fac: GramFactor, dual, pinned_values, opts: LinearOptions):
    """PCG on the free modal coefficients, one Gram block per Fourier mode."""
    gram = sys.gram
    plan = gram.plan
    free = fac.free
    rhs = plan.to_modes(dual)[free]
    blocks = [a[:, free] for a in gram._factors]
    if pinned_values is not None:
        pc = plan.to_modes(pinned_values[None, :])[0]
        for g, grp in enumerate(gram._groups):
            a = gram._factors[g]
            rhs[:, grp] -= blocks[g].T @ np.outer(a[:, fac.pinned], pc[grp])

    def apply(x):
        out = np.empty_like(x)
        for g, grp in enumerate(gram._groups):
            out[:, grp] = blocks[g].T @ (blocks[g] @ x[:, grp])
        return out

    if opts.preconditioner == "block":
        precond = lambda r: fac.upper_solve(fac.lower_solve(r))  # noqa: E731
    else:
        diag = np.empty(rhs.shape)
        for g, grp in enumerate(gram._groups):
            diag[:, grp] = np.sum(blocks[g] ** 2, axis=0)[:, None]
        precond = lambda r: r / diag  # noqa: E731
    x0 = None
    if opts.initial_guess is not None:
        offset = np.zeros(sys.grid.flat_shape) if sys.offset is None else sys.offset
        x0 = plan.to_modes(_arr(opts.initial_guess) + offset)[free]
    x, info = pcg(apply, rhs, precond, x0=x0, tol=opts.tol, max_iter=opts.max_iter)
    true = rhs - apply(x)
    r0 = np.sqrt(max(float(np.sum(rhs * precond(rhs))), np.finfo(float).tiny))
    info["floor"] = float(np.sqrt(abs(np.sum(true * precond(true))))) / r0
    return fac.upper(x), info


def pcg(apply, rhs, precond, *, x0=None, tol=1e-8, max_iter=500):
    """Preconditioned conjugate gradients on arrays of any shape.

    Relative residual in the preconditioned norm; raises
    :class:`AssemblyError` when a non-positive curvature ``p.Ap`` appears.
    """
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - apply(x) if x0 is not None else rhs.copy()
    z = precond(r)
    rz = float(np.sum(r * z))
    ref = float(np.sum(rhs * precond(rhs)))
    if ref <= 0:
        if ref == 0:
            return x, {"converged": True, "iterations": 0, "residual": 0.0}
        raise AssemblyError("preconditioner is not positive definite")
    p = z.copy()
    rel = np.sqrt(max(rz, 0.0) / ref)
    it = 0
    while rel > tol and it < max_iter:
        it += 1
        ap = apply(p)
        curv = float(np.sum(p * ap))
        if not curv > 0:
            raise AssemblyError(f"non-positive curvature {curv:.3e} in CG: operator is not SPD")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * ap
        z = precond(r)
        rz_new = float(np.sum(r * z))
        rel = np.sqrt(max(rz_new, 0.0) / ref)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, {"converged": rel <= tol, "iterations": it, "residual": float(rel)}


def bilinear_residual(
    sys: LinearSystem, u_star, samples: int = 50, seed: int = 0, use_reduced: np.ndarray | None = None
) -> float:
    """Worst ``|B[u + offset, v] - <rhs, v>| / scale`` over random masked smooth ``v``.

    ``scale = sqrt(B[u + offset] B[v]) + |<rhs, v>|``.  By default ``B`` is
    evaluated on the nodal field, independent of the solver internals;
    pass the certificate's reduced coordinates to pair in the solver's
    own representation.
    """
    grid = sys.grid
    gram = sys.gram
    fac, offset, dual, pinned_values = _linear_parts(sys)
    y = _arr(u_star) + offset
    rng = np.random.default_rng(seed)
    if use_reduced is not None:
        gz = use_reduced + (fac.pinned_term(pinned_values) if pinned_values is not None else 0.0)
        energy_y = float(np.sum(gz * gz))
    else:
        energy_y = gram.energy(y)
    worst = 0.0
    for _ in range(samples):
        v = random_smooth(grid, rng)
        v[fac.pinned] = 0.0
        if use_reduced is not None:
            bval = float(np.sum(gz * fac.reduce_primal(v)))
        else:
            bval = gram.energy(y, v)
        fval = float(np.sum(dual * v))
        scale = np.sqrt(energy_y * gram.energy(v)) + abs(fval)
        worst = max(worst, abs(bval - fval) / scale if scale > 0 else abs(bval - fval))
    return worst
