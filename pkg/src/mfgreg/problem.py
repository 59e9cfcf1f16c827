"""Problem data: Hamiltonians, couplings, kernels, the two data shifts and assumption probes.

Spatial callables receive coordinate arrays ``f(x)`` (``f(x1, x2)`` for
``d = 2``); space-time callables receive ``f(t, x)``.  Constants and
pre-sampled arrays are accepted wherever a callable is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .fields import (
    DiffPlan,
    SpaceTimeField,
    SpaceTimeGrid,
    TorusGrid,
    _convolve_array,
    convolution_matrix,
    random_smooth,
)

__all__ = [
    "ProblemError",
    "DomainError",
    "HamiltonianSpec",
    "CouplingSpec",
    "MFGProblem",
    "RegularizationConfig",
    "ShiftedProblem",
    "BoundHamiltonian",
    "BoundCoupling",
    "ProbeReport",
    "eval_H",
    "eval_DpH",
    "eval_coupling",
    "builtin_kernel",
    "terminal_shift",
    "assumption_probe",
]

Data = Union[float, np.ndarray, Callable]

HAMILTONIAN_VARIANTS = ("quadratic", "power", "congestion")
NONLOCAL_VARIANTS = ("off", "linear", "power")

# Hessians of |p|^gamma with gamma < 2 are evaluated at |p| >= this floor.
_HESSIAN_FLOOR = 1e-8


class ProblemError(ValueError):
    """Invalid problem data; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


class DomainError(ValueError):
    """A constitutive function was evaluated outside its domain."""


# ----------------------------------------------------------------------------
# sampling helpers
# ----------------------------------------------------------------------------


def _sample_space(data: Data, torus: TorusGrid, key: str) -> np.ndarray:
    """Spatial data on flattened torus points, shape ``(S,)``."""
    if callable(data):
        coords = [torus.points[:, i] for i in range(torus.dim)]
        values = np.asarray(data(*coords), dtype=float)
    else:
        values = np.asarray(data, dtype=float)
        if values.shape == torus.shape:
            values = values.reshape(-1)
    try:
        values = np.broadcast_to(values, (torus.size,)).astype(float)
    except ValueError:
        raise ProblemError(key, f"shape {np.shape(values)} does not match the torus") from None
    if not np.all(np.isfinite(values)):
        raise ProblemError(key, "contains non-finite values")
    return values


def _sample_spacetime(data: Data, grid: SpaceTimeGrid, key: str) -> np.ndarray:
    try:
        values = grid.sample(data)
    except ValueError:
        raise ProblemError(key, "shape does not match the space-time grid") from None
    if not np.all(np.isfinite(values)):
        raise ProblemError(key, "contains non-finite values")
    return values


def _coefficient(data: Data, points: np.ndarray) -> np.ndarray:
    if callable(data):
        return np.asarray(data(*[points[..., i] for i in range(points.shape[-1])]), dtype=float)
    return np.asarray(data, dtype=float)


def _drift(data: Data, points: np.ndarray) -> np.ndarray:
    """Drift vector field ``b(x)`` broadcast to ``points.shape``."""
    if callable(data):
        vals = np.asarray(data(*[points[..., i] for i in range(points.shape[-1])]), dtype=float)
        if vals.shape == points.shape[:-1] and points.shape[-1] == 1:
            vals = vals[..., None]
    else:
        vals = np.asarray(data, dtype=float)
    return np.broadcast_to(vals, points.shape)


# ----------------------------------------------------------------------------
# Hamiltonians
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class HamiltonianSpec:
    """Closed-form Hamiltonian family.

    ``quadratic``: ``H = |p|^2 / 2``.
    ``power``: ``H = c(x)|p|^gamma + b(x).p``.
    ``congestion``: ``H = c(x)|p|^gamma / m^tau``.
    """

    variant: str = "quadratic"
    coefficient: Data = 1.0
    drift: Data = 0.0
    gamma: float = 2.0
    tau: float = 0.5

    def __post_init__(self):
        if self.variant not in HAMILTONIAN_VARIANTS:
            raise ProblemError(
                "hamiltonian.variant", f"unknown variant {self.variant!r}; use {HAMILTONIAN_VARIANTS}"
            )
        if self.variant == "quadratic":
            object.__setattr__(self, "gamma", 2.0)
        if not (np.isfinite(self.gamma) and self.gamma > 1):
            raise ProblemError("hamiltonian.gamma", f"gamma > 1 is required, got {self.gamma}")
        if self.variant == "congestion" and not (0 < self.tau < 1):
            raise ProblemError("hamiltonian.tau", f"tau must lie in (0, 1), got {self.tau}")

    @property
    def depends_on_density(self) -> bool:
        return self.variant == "congestion"


def _power_parts(spec: HamiltonianSpec, x: np.ndarray, p: np.ndarray, m):
    """Common factors ``(c / m^tau, |p|)`` of the power-type variants."""
    if spec.variant == "quadratic":
        c = 0.5
    else:
        c = _coefficient(spec.coefficient, x)
    if spec.variant == "congestion":
        if m is None:
            raise DomainError("congestion Hamiltonian needs the density")
        m = np.asarray(m, dtype=float)
        if np.any(m <= 0):
            raise DomainError("congestion Hamiltonian evaluated at nonpositive density")
        c = c / m**spec.tau
    return c, np.linalg.norm(p, axis=-1)


def eval_H(spec: HamiltonianSpec, x: np.ndarray, p: np.ndarray, m=None) -> np.ndarray:
    """Pointwise ``H(x, p[, m])``; ``p`` has a trailing axis of length ``d``."""
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    c, norm = _power_parts(spec, x, p, m)
    out = c * norm**spec.gamma
    if spec.variant == "power":
        out = out + np.sum(_drift(spec.drift, np.broadcast_to(x, p.shape)) * p, axis=-1)
    return out


def eval_DpH(spec: HamiltonianSpec, x: np.ndarray, p: np.ndarray, m=None) -> np.ndarray:
    """Analytic ``D_p H``, same shape as ``p``."""
    p = np.asarray(p, dtype=float)
    x = np.asarray(x, dtype=float)
    if spec.variant == "quadratic":
        return p.copy()
    c, norm = _power_parts(spec, x, p, m)
    g = spec.gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(norm > 0, c * g * norm ** (g - 2), 0.0)
    out = scale[..., None] * p
    if spec.variant == "power":
        out = out + _drift(spec.drift, np.broadcast_to(x, p.shape))
    return out


def _eval_hess(spec: HamiltonianSpec, x: np.ndarray, p: np.ndarray, m=None) -> np.ndarray:
    d = p.shape[-1]
    eye = np.eye(d)
    if spec.variant == "quadratic":
        return np.broadcast_to(eye, p.shape + (d,)).copy()
    c, norm = _power_parts(spec, x, p, m)
    g = spec.gamma
    r = np.maximum(norm, _HESSIAN_FLOOR)
    unit = p / r[..., None]
    outer = unit[..., :, None] * unit[..., None, :]
    base = (c * g * r ** (g - 2))[..., None, None]
    return base * (eye + (g - 2) * outer)


class BoundHamiltonian:
    """A Hamiltonian bound to grid points, optionally shifted by ``offset`` in ``p``.

    ``value(p)`` returns ``H(x, p + offset)``; ``offset`` is ``D u_T`` for
    the terminal shift.  Density-dependent variants take the actual
    density ``m`` as a second argument.
    """

    def __init__(self, spec: HamiltonianSpec, points: np.ndarray, offset: np.ndarray | None = None):
        self.spec = spec
        self.points = np.asarray(points, dtype=float)
        self.offset = np.zeros_like(self.points) if offset is None else np.asarray(offset, float)

    def _p(self, p):
        return np.asarray(p, dtype=float) + self.offset

    def value(self, p, m=None):
        return eval_H(self.spec, self.points, self._p(p), m)

    def grad_p(self, p, m=None):
        return eval_DpH(self.spec, self.points, self._p(p), m)

    def hess_p(self, p, m=None):
        return _eval_hess(self.spec, self.points, self._p(p), m)

    def d_m(self, p, m=None):
        """``dH/dm`` (zero unless the variant depends on the density)."""
        if not self.spec.depends_on_density:
            return np.zeros(np.shape(p)[:-1])
        return -self.spec.tau * self.value(p, m) / m

    def d_m_grad_p(self, p, m=None):
        """``d(D_p H)/dm``."""
        if not self.spec.depends_on_density:
            return np.zeros(np.shape(p))
        return -self.spec.tau * self.grad_p(p, m) / np.asarray(m)[..., None]


# ----------------------------------------------------------------------------
# couplings
# ----------------------------------------------------------------------------


def builtin_kernel(name: str, torus: TorusGrid, width: float = 0.1) -> np.ndarray:
    """Named kernels on the torus: wrapped ``gaussian`` or compact ``bump``."""
    if not width > 0:
        raise ProblemError("coupling.kernel_width", "must be positive")
    dist = np.abs(torus.points)
    dist = np.minimum(dist, 1.0 - dist)
    r2 = np.sum(dist**2, axis=1)
    if name == "gaussian":
        # wrap over neighbouring images as well, which keeps the kernel smooth
        shifts = np.arange(-3, 4)
        vals = np.zeros(torus.size)
        for img in np.array(np.meshgrid(*([shifts] * torus.dim), indexing="ij")).reshape(torus.dim, -1).T:
            y = torus.points - img
            vals += np.exp(-np.sum(y**2, axis=1) / (2 * width**2))
    elif name == "bump":
        if width > 0.5:
            raise ProblemError("coupling.kernel_width", "bump width must not exceed 1/2")
        s = r2 / width**2
        vals = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1 - s, 1.0)), 0.0)
    else:
        raise ProblemError("coupling.kernel", f"unknown built-in kernel {name!r}")
    return vals / (vals.sum() * torus.cell_volume)


def _symmetric_partner(torus: TorusGrid) -> np.ndarray:
    """Flat index of ``-x`` for every grid point."""
    idx = np.indices(torus.shape).reshape(torus.dim, -1)
    neg = (-idx) % torus.points_per_dim
    return np.ravel_multi_index(tuple(neg), torus.shape)


@dataclass(frozen=True)
class CouplingSpec:
    """``g(m, theta) = s * m^r + theta`` with ``theta = h(m)`` from a convolution.

    ``nonlocal`` selects ``h``: ``off`` (zero), ``linear``
    (``c * zeta * (zeta * m)``) or ``power`` (``c * zeta * ((zeta * m)^tau)``).
    ``kernel`` is a name understood by :func:`builtin_kernel` or grid samples.
    ``local_scale`` must be positive unless ``allow_nonmonotone`` is set,
    which exists only to build negative controls.
    """

    r: float = 1.0
    nonlocal_variant: str = "off"
    kernel: Union[str, np.ndarray] = "gaussian"
    kernel_width: float = 0.1
    nonlocal_scale: float = 1.0
    nonlocal_exponent: float = 0.5
    local_scale: float = 1.0
    allow_nonmonotone: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.r) and self.r > 0):
            raise ProblemError("coupling.r", f"local exponent r > 0 is required, got {self.r}")
        if self.nonlocal_variant not in NONLOCAL_VARIANTS:
            raise ProblemError(
                "coupling.nonlocal", f"unknown variant {self.nonlocal_variant!r}; use {NONLOCAL_VARIANTS}"
            )
        if not self.nonlocal_scale >= 0:
            raise ProblemError("coupling.nonlocal_scale", "must be nonnegative")
        if self.nonlocal_variant == "power" and not (0 < self.nonlocal_exponent <= 1):
            raise ProblemError("coupling.nonlocal_exponent", "must lie in (0, 1]")
        if self.local_scale <= 0 and not self.allow_nonmonotone:
            raise ProblemError(
                "coupling.local_scale", "must be positive (non-monotone couplings are test-only)"
            )

    def resolve_kernel(self, torus: TorusGrid) -> np.ndarray:
        """Kernel samples renormalized to exact discrete unit mass."""
        if isinstance(self.kernel, str):
            return builtin_kernel(self.kernel, torus, self.kernel_width)
        vals = np.asarray(self.kernel, dtype=float).reshape(-1)
        if vals.size != torus.size:
            raise ProblemError("coupling.kernel", "kernel samples do not match the torus")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ProblemError("coupling.kernel", "kernel must be finite and nonnegative")
        if np.max(np.abs(vals - vals[_symmetric_partner(torus)])) > 1e-12 * np.max(vals):
            raise ProblemError("coupling.kernel", "kernel must be even: zeta(x) = zeta(-x)")
        mass = vals.sum() * torus.cell_volume
        if not mass > 0:
            raise ProblemError("coupling.kernel", "kernel has zero mass")
        return vals / mass


class BoundCoupling:
    """A coupling bound to a torus: values and derivatives on ``(N_t, S)`` arrays."""

    def __init__(self, spec: CouplingSpec, torus: TorusGrid):
        self.spec = spec
        self.torus = torus
        self.kernel = spec.resolve_kernel(torus) if spec.nonlocal_variant != "off" else None

    def _conv(self, arr):
        return _convolve_array(self.kernel, arr, self.torus)

    def nonlocal_value(self, m: np.ndarray) -> np.ndarray:
        spec = self.spec
        if spec.nonlocal_variant == "off":
            return np.zeros_like(m)
        inner_ = self._conv(m)
        if spec.nonlocal_variant == "power":
            inner_ = np.maximum(inner_, 0.0) ** spec.nonlocal_exponent
        return spec.nonlocal_scale * self._conv(inner_)

    def value(self, m: np.ndarray) -> np.ndarray:
        m = np.asarray(m, dtype=float)
        if np.any(m < 0):
            raise DomainError("coupling evaluated at negative density")
        return self.spec.local_scale * m**self.spec.r + self.nonlocal_value(m)

    def local_derivative(self, m: np.ndarray) -> np.ndarray:
        r = self.spec.r
        if r == 1:
            return np.full_like(np.asarray(m, float), self.spec.local_scale)
        return self.spec.local_scale * r * np.asarray(m, float) ** (r - 1)

    def nonlocal_jacobians(self, m: np.ndarray) -> list[np.ndarray] | None:
        """Per-slice ``S x S`` Jacobians of ``h`` (``None`` when off)."""
        spec = self.spec
        if spec.nonlocal_variant == "off":
            return None
        c = convolution_matrix(self.kernel, self.torus)
        if spec.nonlocal_variant == "linear":
            j = spec.nonlocal_scale * (c @ c)
            return [j] * m.shape[0]
        inner_ = np.maximum(self._conv(m), 1e-300)
        tau = spec.nonlocal_exponent
        return [spec.nonlocal_scale * (c * (tau * s ** (tau - 1))[None, :]) @ c for s in inner_]


def eval_coupling(spec: CouplingSpec, m: SpaceTimeField) -> SpaceTimeField:
    """``g(m, h(m))`` pointwise."""
    bound = BoundCoupling(spec, m.grid.torus)
    return SpaceTimeField(m.grid, bound.value(m.flat))


# ----------------------------------------------------------------------------
# problem and regularization
# ----------------------------------------------------------------------------


def _diffusion_field(data: Data, torus: TorusGrid) -> np.ndarray:
    """Diffusion matrices ``(S, d, d)``; scalars mean isotropic ``a I``."""
    d = torus.dim
    if callable(data):
        coords = [torus.points[:, i] for i in range(d)]
        vals = np.asarray(data(*coords), dtype=float)
    else:
        vals = np.asarray(data, dtype=float)
    if vals.shape in ((), (torus.size,)) or vals.shape == torus.shape:
        scal = np.broadcast_to(vals.reshape(-1) if vals.ndim else vals, (torus.size,))
        out = scal[:, None, None] * np.eye(d)[None]
    elif vals.shape == (d, d):
        out = np.broadcast_to(vals, (torus.size, d, d)).copy()
    elif vals.shape == (torus.size, d, d):
        out = vals.copy()
    else:
        raise ProblemError("diffusion", f"unsupported shape {vals.shape}")
    if not np.all(np.isfinite(out)):
        raise ProblemError("diffusion", "contains non-finite values")
    if np.max(np.abs(out - np.swapaxes(out, 1, 2))) > 1e-14:
        raise ProblemError("diffusion", "diffusion matrix must be symmetric")
    if np.min(np.linalg.eigvalsh(out)) < -1e-14:
        raise ProblemError("diffusion", "diffusion must be positive semi-definite")
    return out


@dataclass(frozen=True, eq=False)
class MFGProblem:
    """Validated problem data sampled on a space-time grid.

    ``density_cap`` turns on the constraint ``m <= M``; ``congestion_floor``
    is the density floor used with the congestion Hamiltonian (defaults to
    ``min(m0) / 2``).
    """

    grid: SpaceTimeGrid
    hamiltonian: HamiltonianSpec = field(default_factory=HamiltonianSpec)
    coupling: CouplingSpec = field(default_factory=CouplingSpec)
    diffusion: Data = 0.0
    potential: Data = 0.0
    initial_density: Data = 1.0
    terminal_cost: Data = 0.0
    density_cap: float | None = None
    congestion_floor: float | None = None

    def __post_init__(self):
        grid = self.grid
        torus = grid.torus
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("diffusion", _diffusion_field(self.diffusion, torus))
        set_("potential", _sample_spacetime(self.potential, grid, "potential"))
        m0 = _sample_space(self.initial_density, torus, "initial_density")
        if np.min(m0) <= 0:
            raise ProblemError("initial_density", "m0 must be strictly positive")
        mass = float(np.sum(m0) * torus.cell_volume)
        if abs(mass - 1.0) > 1e-10:
            raise ProblemError("initial_density", f"m0 must have unit mass, got {mass:.12g}")
        set_("initial_density", m0)
        set_("terminal_cost", _sample_space(self.terminal_cost, torus, "terminal_cost"))
        if self.density_cap is not None:
            cap = float(self.density_cap)
            if not cap > 1:
                raise ProblemError("density_cap", f"M > 1 is required, got {cap}")
            if np.max(m0) > cap:
                raise ProblemError("density_cap", "m0 exceeds the density cap")
            set_("density_cap", cap)
        if self.hamiltonian.variant == "congestion":
            floor = self.congestion_floor
            if floor is None:
                floor = float(np.min(m0)) / 2
            floor = float(floor)
            if not 0 < floor < 1:
                raise ProblemError("congestion_floor", "delta0 must lie in (0, 1)")
            if np.min(m0) < floor:
                raise ProblemError("congestion_floor", "m0 must be >= delta0")
            set_("congestion_floor", floor)
        elif self.congestion_floor is not None:
            raise ProblemError("congestion_floor", "only used with the congestion Hamiltonian")
        if self.hamiltonian.variant != "quadratic":
            c = _coefficient(self.hamiltonian.coefficient, torus.points)
            if np.min(np.broadcast_to(c, (torus.size,))) <= 0:
                raise ProblemError("hamiltonian.coefficient", "c(x) must be strictly positive")

    @property
    def dim(self) -> int:
        return self.grid.torus.dim

    @property
    def horizon(self) -> float:
        return self.grid.time.horizon

    @property
    def density_floor(self) -> float:
        """Lower bound on the density: ``delta0`` for congestion, else 0."""
        return self.congestion_floor if self.congestion_floor is not None else 0.0


@dataclass(frozen=True, eq=False)
class RegularizationConfig:
    """``eps``, the regularity order ``k`` and the shift fields ``sigma >= 0``, ``xi``."""

    epsilon: float
    k: int = 3
    sigma: Data = 0.0
    xi: Data = 0.0

    def __post_init__(self):
        if not (0 < self.epsilon < 1):
            raise ProblemError("regularization.epsilon", f"eps must lie in (0, 1), got {self.epsilon}")
        if int(self.k) != self.k or self.k < 1:
            raise ProblemError("regularization.k", "k must be a positive integer")
        if not callable(self.sigma) and np.min(np.asarray(self.sigma, dtype=float)) < 0:
            raise ProblemError("regularization.sigma", "sigma must be nonnegative")

    def sampled(self, grid: SpaceTimeGrid) -> tuple[np.ndarray, np.ndarray]:
        sigma = _sample_spacetime(self.sigma, grid, "regularization.sigma")
        if np.min(sigma) < 0:
            raise ProblemError("regularization.sigma", "sigma must be nonnegative")
        return sigma, _sample_spacetime(self.xi, grid, "regularization.xi")

    def with_epsilon(self, epsilon: float) -> "RegularizationConfig":
        return RegularizationConfig(epsilon, self.k, self.sigma, self.xi)


# ----------------------------------------------------------------------------
# shifts
# ----------------------------------------------------------------------------


class ShiftedProblem:
    """Problem rewritten with zero terminal cost and density measured from ``m0``.

    Terminal shift: ``H^(x, p) = H(x, p + Du_T)``, ``V^ = V + a : D^2 u_T``,
    ``xi^ = xi + u_T``.  Density shift: ``sigma^ = sigma + m0`` and
    ``g^(m~) = g(m~ + m0, h(m~ + m0))``.  The unknowns are ``m~ = m - m0``
    (zero at ``t = 0``) and ``u = u_orig - u_T`` (zero at ``t = T``).
    """

    def __init__(self, problem: MFGProblem, reg: RegularizationConfig, plan: DiffPlan | None = None):
        grid = problem.grid
        self.problem = problem
        self.reg = reg
        self.plan = plan if plan is not None and plan.k == reg.k else DiffPlan(grid, reg.k)
        if self.plan.grid is not grid and self.plan.grid.shape != grid.shape:
            raise ProblemError("grid", "plan and problem live on different grids")
        torus = grid.torus
        u_t = problem.terminal_cost
        slab = np.broadcast_to(u_t, grid.flat_shape)
        self.terminal_gradient = self.plan.gradient(u_t[None, :])[0]
        self.hamiltonian = BoundHamiltonian(problem.hamiltonian, torus.points, self.terminal_gradient)
        self.coupling = BoundCoupling(problem.coupling, torus)
        shift_v = self.plan.hessian_contract(problem.diffusion, u_t[None, :])[0]
        self.potential = problem.potential + shift_v[None, :]
        sigma, xi = reg.sampled(grid)
        self.sigma = sigma
        self.xi = xi
        self.xi_hat = xi + slab
        self.sigma_hat = sigma + problem.initial_density[None, :]
        m0 = problem.initial_density[None, :]
        self.lower = np.broadcast_to(problem.density_floor - m0, grid.flat_shape).copy()
        self.upper = (
            None
            if problem.density_cap is None
            else np.broadcast_to(problem.density_cap - m0, grid.flat_shape).copy()
        )

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.problem.grid

    def density(self, m_tilde: np.ndarray) -> np.ndarray:
        return m_tilde + self.problem.initial_density[None, :]

    def coupling_value(self, m_tilde: np.ndarray) -> np.ndarray:
        """``g^(m~)``."""
        return self.coupling.value(self.density(m_tilde))

    def unshift(self, m_tilde: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.density(m_tilde), u + self.problem.terminal_cost[None, :]

    def shift(self, m: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return m - self.problem.initial_density[None, :], u - self.problem.terminal_cost[None, :]


def terminal_shift(problem: MFGProblem, reg: RegularizationConfig, plan: DiffPlan | None = None) -> ShiftedProblem:
    """Build the :class:`ShiftedProblem` used by the solvers."""
    return ShiftedProblem(problem, reg, plan)


# ----------------------------------------------------------------------------
# assumption probes
# ----------------------------------------------------------------------------


@dataclass
class ProbeReport:
    """Sampled checks of the standing assumptions; constants are the smallest sample-valid ones."""

    convexity_gap_min: float
    dph_monotonicity_min: float
    coercivity_constant: float
    coercivity_slope: float
    growth_constant: float
    gradient_constant: float
    coupling_monotonicity_min: float
    coupling_monotonicity_scale: float
    samples: int
    flags: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "convexity_gap_min", "dph_monotonicity_min", "coercivity_constant", "coercivity_slope",
            "growth_constant", "gradient_constant", "coupling_monotonicity_min",
            "coupling_monotonicity_scale", "samples",
        )}
        out["flags"] = dict(self.flags)
        out["passed"] = self.passed
        return out


def assumption_probe(problem: MFGProblem, samples: int = 100, seed: int = 0) -> ProbeReport:
    """Probe convexity, coercivity, growth and monotonicity at random points.

    Coercivity is ``-H + D_pH.p >= |p|^gamma / C - C``; the reported
    ``coercivity_constant`` is the smallest such ``C`` over the sample and
    ``coercivity_slope`` the smallest ``C`` with zero offset.  Growth
    ``|H| <= C(|p|^gamma + 1)`` and ``|D_pH| <= C(|p|^(gamma-1) + 1)`` are
    reported the same way.  A probe never raises.
    """
    rng = np.random.default_rng(seed)
    spec = problem.hamiltonian
    torus = problem.grid.torus
    d = torus.dim
    g = spec.gamma
    x = torus.points[rng.integers(0, torus.size, samples)]
    mag = 10.0 ** rng.uniform(-1, 1, samples)
    p = rng.standard_normal((samples, d)) * mag[:, None]
    q = rng.standard_normal((samples, d)) * mag[:, None]
    m = None
    if spec.depends_on_density:
        m = problem.density_floor + rng.uniform(0, 3, samples)
    h = lambda pp: eval_H(spec, x, pp, m)  # noqa: E731
    dh = lambda pp: eval_DpH(spec, x, pp, m)  # noqa: E731
    gap = 0.5 * h(p) + 0.5 * h(q) - h(0.5 * (p + q))
    mono = np.sum((dh(p) - dh(q)) * (p - q), axis=-1)
    norm = np.linalg.norm(p, axis=-1)
    weight = norm**g
    if spec.depends_on_density:
        weight = weight / m**spec.tau
    s = -h(p) + np.sum(dh(p) * p, axis=-1)
    coerc = np.max((-s + np.sqrt(s * s + 4 * weight)) / 2)
    slope = np.inf if np.any(s <= 0) else float(np.max(weight / s))
    growth = float(np.max(np.abs(h(p)) / (weight + 1)))
    grad = float(np.max(np.linalg.norm(dh(p), axis=-1) / (norm ** (g - 1) + 1)))

    grid = problem.grid
    coupling = BoundCoupling(problem.coupling, torus)
    pair_min = np.inf
    pair_scale = 0.0
    for _ in range(50):
        m1 = random_smooth(grid, rng) ** 2
        m2 = random_smooth(grid, rng) ** 2
        diff = m1 - m2
        g1, g2 = coupling.value(m1), coupling.value(m2)
        val = float(np.sum(grid.weights * (g1 - g2) * diff))
        scale = float(np.sum(grid.weights * np.abs((g1 - g2) * diff)))
        pair_min = min(pair_min, val)
        pair_scale = max(pair_scale, scale)
    flags = {
        "convexity": bool(np.min(gap) >= -1e-10 * (1 + np.max(np.abs(h(p))))),
        "dph_monotone": bool(np.min(mono) >= -1e-10 * (1 + np.max(np.abs(mono)))),
        "coercivity_finite": bool(np.isfinite(coerc)),
        "coupling_monotone": bool(pair_min >= -1e-10 * max(pair_scale, 1.0)),
    }
    return ProbeReport(
        convexity_gap_min=float(np.min(gap)),
        dph_monotonicity_min=float(np.min(mono)),
        coercivity_constant=float(coerc),
        coercivity_slope=slope,
        growth_constant=growth,
        gradient_constant=grad,
        coupling_monotonicity_min=float(pair_min),
        coupling_monotonicity_scale=pair_scale,
        samples=int(samples),
        flags=flags,
    )
