"""Space-time grids, discrete calculus, quadrature and the regularizing Gram operator.

Fields live on a uniform tensor grid over ``[0, T] x T^d`` (``d`` in {1, 2}).
Space is treated by Fourier collocation on the unit torus.  Time uses a
diagonal-norm summation-by-parts (SBP) first derivative together with
Fornberg stencils for higher derivatives.  The SBP norm doubles as the time
quadrature, so discrete integration by parts in ``t`` holds to rounding.

The Gram operator ``G`` represents the bilinear form

    B[w, v] = eps * ( <w, v> + sum_{|beta| = 2k} <D^beta w, D^beta v> )

and is block diagonal in the real Fourier basis: one small ``N_t x N_t``
block per spatial mode.  Solves never form ``D^T W D`` explicitly; they go
through a QR factorization of the stacked square-root factor, which keeps
the order-``2k`` time derivatives usable in double precision.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.polynomial import legendre
from scipy import linalg

__all__ = [
    "FieldError",
    "ShapeMismatchError",
    "OrderExceededError",
    "NonFiniteError",
    "TimeGrid",
    "TorusGrid",
    "SpaceTimeGrid",
    "SpaceTimeField",
    "DiffPlan",
    "GramOperator",
    "GramFactor",
    "partial",
    "inner",
    "gram_apply",
    "convolve_x",
    "convolution_matrix",
    "mean_in_x",
    "mass_per_slice",
    "fornberg_weights",
    "random_smooth",
]


class FieldError(ValueError):
    """Base class for invalid grid or field input."""


class ShapeMismatchError(FieldError):
    pass


class OrderExceededError(FieldError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an operation would return NaN or Inf."""


def _check_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError(f"{what}: {bad} non-finite value(s)")
    return values


# ----------------------------------------------------------------------------
# one-dimensional time operators
# ----------------------------------------------------------------------------


def fornberg_weights(z: float, x: np.ndarray, order: int) -> np.ndarray:
    """Finite-difference weights at ``z`` on nodes ``x`` for derivatives 0..order.

    Returns an array of shape ``(len(x), order + 1)``; column ``j`` holds the
    weights of the ``j``-th derivative.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    c = np.zeros((n, order + 1))
    c1 = 1.0
    c4 = x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


def _stencil_matrix(nodes: np.ndarray, order: int, width: int) -> np.ndarray:
    """Dense derivative matrix from centred stencils, shifted one-sided at the ends."""
    n = len(nodes)
    mat = np.zeros((n, n))
    for i in range(n):
        start = min(max(i - width // 2, 0), n - width)
        idx = np.arange(start, start + width)
        mat[i, idx] = fornberg_weights(nodes[i], nodes[idx], order)[:, order]
    return mat


def _legendre_basis(nodes: np.ndarray, horizon: float, degree: int):
    s = 2.0 * nodes / horizon - 1.0
    eye = np.eye(degree + 1)
    values = np.stack([legendre.legval(s, eye[j]) for j in range(degree + 1)], axis=1)
    slopes = np.stack(
        [legendre.legval(s, legendre.legder(eye[j])) * (2.0 / horizon) for j in range(degree + 1)],
        axis=1,
    )
    return values, slopes


def _sbp_norm(nodes: np.ndarray, horizon: float, order: int) -> np.ndarray:
    """Positive quadrature exact to degree ``2*order - 1``.

    Smallest boundary-localized correction of the trapezoid rule that reaches
    the target degree of exactness.
    """
    n = len(nodes)
    h = horizon / (n - 1)
    trap = np.full(n, h)
    trap[0] = trap[-1] = h / 2
    values, _ = _legendre_basis(nodes, horizon, 2 * order - 1)
    moments = np.zeros(2 * order)
    moments[0] = horizon
    dist = np.minimum(np.arange(n), np.arange(n)[::-1])
    locality = np.exp(-dist / 3.0)
    a = values.T
    defect = moments - a @ trap
    return trap + locality * (a.T @ np.linalg.solve((a * locality) @ a.T, defect))


@lru_cache(maxsize=32)
def _sbp_operators(node_count: int, horizon: float, order: int):
    nodes = np.linspace(0.0, horizon, node_count)
    weights = _sbp_norm(nodes, horizon, order)
    h = horizon / (node_count - 1)
    if weights.min() <= 0.05 * h:
        raise FieldError(
            f"time grid with {node_count} nodes is too coarse for time order {order}: "
            "no positive quadrature of the required degree; use more nodes"
        )
    values, slopes = _legendre_basis(nodes, horizon, order)
    boundary = np.zeros((node_count, node_count))
    boundary[0, 0] = -1.0
    boundary[-1, -1] = 1.0
    # S skew with (S + B/2) P = W P'; unknowns are the strict upper triangle of S.
    rows, cols = np.triu_indices(node_count, 1)
    system = np.zeros((node_count, order + 1, len(rows)))
    for q, (i, j) in enumerate(zip(rows, cols)):
        system[i, :, q] += values[j]
        system[j, :, q] -= values[i]
    system = system.reshape(node_count * (order + 1), len(rows))
    target = (weights[:, None] * slopes - 0.5 * boundary @ values).ravel()
    # favour short-range couplings so the operator stays banded-like
    scale = (1.0 + (cols - rows)) ** -4.0
    coef = scale * np.linalg.lstsq(system * scale, target, rcond=None)[0]
    skew = np.zeros((node_count, node_count))
    skew[rows, cols] = coef
    skew -= skew.T
    first = (skew + 0.5 * boundary) / weights[:, None]
    residual = np.abs(first @ values - slopes).max() * h
    if residual > 1e-9:
        raise FieldError(
            f"time derivative of order {order} could not be built on {node_count} nodes "
            f"(exactness defect {residual:.1e}); use more nodes"
        )
    nodes.setflags(write=False)
    weights.setflags(write=False)
    first.setflags(write=False)
    return nodes, weights, first


# ----------------------------------------------------------------------------
# grids and fields
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform nodes on ``[0, T]`` with an SBP-compatible quadrature.

    ``order`` is the polynomial degree reproduced exactly by the first
    derivative; the quadrature integrates polynomials up to degree
    ``2 * order - 1`` exactly.  It must be at least ``2k`` of any plan built
    on this grid.
    """

    horizon: float
    node_count: int
    order: int = 6

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise FieldError(f"horizon must be positive, got {self.horizon}")
        if int(self.node_count) != self.node_count or self.node_count < 8:
            raise FieldError(f"time node count must be an integer >= 8, got {self.node_count}")
        if self.order < 2:
            raise FieldError("time order must be at least 2")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "node_count", int(self.node_count))
        _sbp_operators(self.node_count, self.horizon, self.order)

    @property
    def nodes(self) -> np.ndarray:
        return _sbp_operators(self.node_count, self.horizon, self.order)[0]

    @property
    def quad_weights(self) -> np.ndarray:
        return _sbp_operators(self.node_count, self.horizon, self.order)[1]

    @property
    def first_derivative(self) -> np.ndarray:
        return _sbp_operators(self.node_count, self.horizon, self.order)[2]

    @property
    def spacing(self) -> float:
        return self.horizon / (self.node_count - 1)

    def cumulative_to_end(self, series: np.ndarray) -> np.ndarray:
        """Trapezoid integral of ``series`` from each node to ``T``."""
        h = self.spacing
        pieces = 0.5 * h * (series[1:] + series[:-1])
        out = np.zeros_like(np.asarray(series, dtype=float))
        out[:-1] = np.cumsum(pieces[::-1])[::-1]
        return out


@dataclass(frozen=True, eq=False)
class TorusGrid:
    """Uniform grid on the unit torus ``T^d``."""

    dim: int
    points_per_dim: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise FieldError(f"torus dimension must be 1 or 2, got {self.dim}")
        n = self.points_per_dim
        if int(n) != n or n < 8 or n % 2:
            raise FieldError(f"points per dimension must be an even integer >= 8, got {n}")
        object.__setattr__(self, "points_per_dim", int(n))

    @property
    def spacing(self) -> float:
        return 1.0 / self.points_per_dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_dim,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_dim**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def measure(self) -> float:
        return self.cell_volume * self.size

    @cached_property
    def axis(self) -> np.ndarray:
        return np.arange(self.points_per_dim) * self.spacing

    @cached_property
    def points(self) -> np.ndarray:
        """Coordinates of shape ``(size, dim)`` in C order."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([c.ravel() for c in mesh], axis=1)

    def wrap(self, index):
        return np.mod(index, self.points_per_dim)


@dataclass(frozen=True, eq=False)
class SpaceTimeGrid:
    time: TimeGrid
    torus: TorusGrid

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.time.node_count,) + self.torus.shape

    @property
    def flat_shape(self) -> tuple[int, int]:
        return (self.time.node_count, self.torus.size)

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights on the flattened grid, shape ``(N_t, S)``."""
        w = np.outer(self.time.quad_weights, np.full(self.torus.size, self.torus.cell_volume))
        w.setflags(write=False)
        return w

    def sample(self, func: Callable | float | np.ndarray) -> np.ndarray:
        """Evaluate ``func(t, x)`` (or ``func(t, x1, x2)``) on the flattened grid."""
        if callable(func):
            t = self.time.nodes[:, None]
            coords = [self.torus.points[None, :, i] for i in range(self.torus.dim)]
            values = np.asarray(func(t, *coords), dtype=float)
            return np.broadcast_to(values, self.flat_shape).copy()
        values = np.asarray(func, dtype=float)
        if values.shape == self.shape:
            values = values.reshape(self.flat_shape)
        return np.broadcast_to(values, self.flat_shape).copy()

    def flatten(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape == self.flat_shape:
            return values
        if values.shape == self.shape:
            return values.reshape(self.flat_shape)
        raise ShapeMismatchError(f"array of shape {values.shape} does not match grid {self.shape}")


class SpaceTimeField:
    """Immutable samples of a scalar function on a :class:`SpaceTimeGrid`."""

    __slots__ = ("grid", "_values")

    def __init__(self, grid: SpaceTimeGrid, values):
        flat = grid.flatten(values).astype(float, copy=True)
        _check_finite(flat, "field")
        flat.setflags(write=False)
        self.grid = grid
        self._values = flat

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, func) -> "SpaceTimeField":
        return cls(grid, grid.sample(func))

    @property
    def flat(self) -> np.ndarray:
        """Values with space flattened, shape ``(N_t, S)`` (read-only)."""
        return self._values

    @property
    def values(self) -> np.ndarray:
        """Values on the natural grid shape ``(N_t, N_x[, N_x])`` (read-only)."""
        return self._values.reshape(self.grid.shape)

    def _same_grid(self, other: "SpaceTimeField"):
        if other.grid is not self.grid and (
            other.grid.shape != self.grid.shape
            or other.grid.time.horizon != self.grid.time.horizon
        ):
            raise ShapeMismatchError("fields live on different grids")

    def __add__(self, other):
        if isinstance(other, SpaceTimeField):
            self._same_grid(other)
            other = other.flat
        return SpaceTimeField(self.grid, self.flat + other)

    def __sub__(self, other):
        if isinstance(other, SpaceTimeField):
            self._same_grid(other)
            other = other.flat
        return SpaceTimeField(self.grid, self.flat - other)

    def __mul__(self, scalar: float):
        return SpaceTimeField(self.grid, self.flat * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return SpaceTimeField(self.grid, -self.flat)

    def __repr__(self):
        return f"SpaceTimeField(shape={self.grid.shape})"


def _values_of(field, grid: SpaceTimeGrid | None = None) -> np.ndarray:
    if isinstance(field, SpaceTimeField):
        if grid is not None and field.grid.shape != grid.shape:
            raise ShapeMismatchError(
                f"field shape {field.grid.shape} does not match grid {grid.shape}"
            )
        return field.flat
    if grid is None:
        raise TypeError("raw arrays need an explicit grid")
    return grid.flatten(field)


# ----------------------------------------------------------------------------
# spatial Fourier machinery
# ----------------------------------------------------------------------------


def _real_fourier_basis(n: int):
    """Orthonormal real trigonometric basis on ``n`` nodes, with mode frequencies."""
    x = np.arange(n) / n
    cols = [np.full(n, 1.0 / np.sqrt(n))]
    freqs = [0]
    for kap in range(1, n // 2):
        cols.append(np.sqrt(2.0 / n) * np.cos(2 * np.pi * kap * x))
        freqs.append(kap)
        cols.append(np.sqrt(2.0 / n) * np.sin(2 * np.pi * kap * x))
        freqs.append(kap)
    cols.append(np.cos(np.pi * n * x) / np.sqrt(n))
    freqs.append(n // 2)
    return np.stack(cols, axis=1), np.array(freqs)


def _symbol_magnitude(freq: np.ndarray, order: int, n: int) -> np.ndarray:
    """|symbol| of the ``order``-th spectral derivative per basis frequency."""
    mag = (2 * np.pi * freq.astype(float)) ** order
    if order % 2:
        mag = np.where(freq == n // 2, 0.0, mag)
    return mag


def _spectral_matrix(n: int, order: int) -> np.ndarray:
    """Dense ``order``-th derivative matrix on the 1D periodic grid."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    sym = (2j * np.pi * k) ** order
    if order % 2:
        sym[n // 2] = 0.0
    eye = np.eye(n)
    return np.real(np.fft.ifft(sym[:, None] * np.fft.fft(eye, axis=0), axis=0))


class DiffPlan:
    """Discrete partial derivatives up to total order ``2k``.

    Spatial factors are applied spectrally; the time factor uses the SBP
    first derivative for order one and Fornberg stencils of width
    ``order + 1`` for higher orders.
    """

    def __init__(self, grid: SpaceTimeGrid, k: int = 3):
        d = grid.torus.dim
        if int(k) != k or not 2 * k > (d + 1) / 2 + 3:
            raise FieldError(f"regularity order k={k} violates 2k > (d+1)/2 + 3 for d={d}")
        k = int(k)
        if grid.time.order < 2 * k:
            raise FieldError(
                f"time grid order {grid.time.order} is below 2k={2 * k}; "
                "build the TimeGrid with order >= 2k"
            )
        if grid.time.node_count < grid.time.order + 2:
            raise FieldError("too few time nodes for the requested time order")
        self.grid = grid
        self.k = k
        self.top = 2 * k
        width = grid.time.order + 1
        nodes = grid.time.nodes
        mats = [np.eye(grid.time.node_count), np.array(grid.time.first_derivative)]
        for ell in range(2, self.top + 1):
            mats.append(_stencil_matrix(nodes, ell, width))
        for m in mats:
            m.setflags(write=False)
        self.time_matrices: tuple[np.ndarray, ...] = tuple(mats)

    # --- multi-indices -------------------------------------------------------
    @cached_property
    def top_multi_indices(self) -> tuple[tuple[int, ...], ...]:
        """All ``beta = (beta_t, beta_x1, ..)`` with ``|beta| = 2k``."""
        d = self.grid.torus.dim
        out = [
            beta
            for beta in itertools.product(range(self.top + 1), repeat=d + 1)
            if sum(beta) == self.top
        ]
        return tuple(out)

    # --- spatial operators ---------------------------------------------------
    @cached_property
    def fourier_basis(self) -> np.ndarray:
        """Orthonormal real basis ``F`` (S x S); nodal ``w = w_hat @ F.T``."""
        f1, _ = _real_fourier_basis(self.grid.torus.points_per_dim)
        basis = f1
        for _ in range(self.grid.torus.dim - 1):
            basis = np.kron(basis, f1)
        basis.setflags(write=False)
        return basis

    @cached_property
    def mode_frequencies(self) -> np.ndarray:
        """Per-dimension frequency of each basis function, shape ``(S, d)``."""
        _, f1 = _real_fourier_basis(self.grid.torus.points_per_dim)
        grids = np.meshgrid(*([f1] * self.grid.torus.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @cached_property
    def mode_weights(self) -> np.ndarray:
        """``Lambda[l, j]``: summed squared spatial symbols of order ``2k - l`` on mode ``j``."""
        n = self.grid.torus.points_per_dim
        d = self.grid.torus.dim
        freqs = self.mode_frequencies
        lam = np.zeros((self.top + 1, freqs.shape[0]))
        for beta in self.top_multi_indices:
            prod = np.ones(freqs.shape[0])
            for i in range(d):
                prod = prod * _symbol_magnitude(freqs[:, i], beta[1 + i], n) ** 2
            lam[beta[0]] += prod
        return lam

    def spatial_matrix(self, alpha: Sequence[int]) -> np.ndarray:
        """Dense matrix of the spatial derivative ``d^alpha`` on flattened points."""
        n = self.grid.torus.points_per_dim
        mat = np.ones((1, 1))
        for a in alpha:
            mat = np.kron(mat, _spectral_matrix(n, a))
        return mat

    @cached_property
    def gradient_matrices(self) -> tuple[np.ndarray, ...]:
        d = self.grid.torus.dim
        return tuple(self.spatial_matrix(tuple(int(i == j) for j in range(d))) for i in range(d))

    # --- derivatives of arrays ----------------------------------------------
    def _spatial(self, arr: np.ndarray, alpha: Sequence[int]) -> np.ndarray:
        if not any(alpha):
            return arr
        n = self.grid.torus.points_per_dim
        shaped = arr.reshape((arr.shape[0],) + self.grid.torus.shape)
        k = np.fft.fftfreq(n, d=1.0 / n)
        spec = np.fft.fftn(shaped, axes=tuple(range(1, 1 + len(alpha))))
        for i, a in enumerate(alpha):
            if a == 0:
                continue
            sym = (2j * np.pi * k) ** a
            if a % 2:
                sym[n // 2] = 0.0
            shape = [1] * shaped.ndim
            shape[1 + i] = n
            spec = spec * sym.reshape(shape)
        out = np.real(np.fft.ifftn(spec, axes=tuple(range(1, 1 + len(alpha)))))
        return out.reshape(arr.shape)

    def derivative(self, arr: np.ndarray, beta: Sequence[int]) -> np.ndarray:
        """Mixed derivative of a flattened ``(N_t, S)`` array."""
        beta = tuple(int(b) for b in beta)
        if len(beta) != self.grid.torus.dim + 1:
            raise FieldError(f"multi-index {beta} must have {self.grid.torus.dim + 1} entries")
        if min(beta) < 0:
            raise FieldError("multi-index entries must be nonnegative")
        if sum(beta) > self.top:
            raise OrderExceededError(f"|beta|={sum(beta)} exceeds 2k={self.top}")
        out = self._spatial(arr, beta[1:])
        if beta[0]:
            out = self.time_matrices[beta[0]] @ out
        return out

    def gradient(self, arr: np.ndarray) -> np.ndarray:
        """Spatial gradient, shape ``(N_t, S, d)``."""
        d = self.grid.torus.dim
        return np.stack(
            [self._spatial(arr, tuple(int(i == j) for j in range(d))) for i in range(d)], axis=-1
        )

    def divergence(self, vec: np.ndarray) -> np.ndarray:
        d = self.grid.torus.dim
        return sum(
            self._spatial(vec[..., i], tuple(int(i == j) for j in range(d))) for i in range(d)
        )

    def hessian_contract(self, coeff: np.ndarray, arr: np.ndarray) -> np.ndarray:
        """``sum_ij a_ij d_ij arr`` with ``coeff`` of shape ``(S, d, d)``."""
        d = self.grid.torus.dim
        out = np.zeros_like(arr)
        for i in range(d):
            for j in range(d):
                alpha = [0] * d
                alpha[i] += 1
                alpha[j] += 1
                out += coeff[None, :, i, j] * self._spatial(arr, alpha)
        return out

    def divergence2(self, coeff: np.ndarray, arr: np.ndarray) -> np.ndarray:
        """``sum_ij d_ij (a_ij arr)``."""
        d = self.grid.torus.dim
        out = np.zeros_like(arr)
        for i in range(d):
            for j in range(d):
                alpha = [0] * d
                alpha[i] += 1
                alpha[j] += 1
                out += self._spatial(coeff[None, :, i, j] * arr, alpha)
        return out

    # --- modal transforms ----------------------------------------------------
    def to_modes(self, arr: np.ndarray) -> np.ndarray:
        """Coefficients in the orthonormal real Fourier basis (FFT based)."""
        torus = self.grid.torus
        lead = arr.shape[:-1]
        x = arr.reshape(lead + torus.shape)
        for axis in range(len(lead), x.ndim):
            x = _real_forward(x, axis)
        return x.reshape(arr.shape)

    def from_modes(self, coef: np.ndarray) -> np.ndarray:
        torus = self.grid.torus
        lead = coef.shape[:-1]
        x = coef.reshape(lead + torus.shape)
        for axis in range(len(lead), x.ndim):
            x = _real_inverse(x, axis)
        return x.reshape(coef.shape)


def _real_forward(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    c = np.moveaxis(np.fft.rfft(x, axis=axis), axis, -1)
    out = np.empty(c.shape[:-1] + (n,))
    out[..., 0] = c[..., 0].real / np.sqrt(n)
    root = np.sqrt(2.0 / n)
    out[..., 1:-1:2] = root * c[..., 1:-1].real
    out[..., 2:-1:2] = -root * c[..., 1:-1].imag
    out[..., -1] = c[..., -1].real / np.sqrt(n)
    return np.moveaxis(out, -1, axis)


def _real_inverse(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    y = np.moveaxis(x, axis, -1)
    c = np.empty(y.shape[:-1] + (n // 2 + 1,), dtype=complex)
    c[..., 0] = y[..., 0] * np.sqrt(n)
    half = np.sqrt(n / 2.0)
    c[..., 1:-1] = half * (y[..., 1:-1:2] - 1j * y[..., 2:-1:2])
    c[..., -1] = y[..., -1] * np.sqrt(n)
    return np.moveaxis(np.fft.irfft(c, n=n, axis=-1), -1, axis)


def partial(plan: DiffPlan, field: SpaceTimeField, beta: Sequence[int]) -> SpaceTimeField:
    """Discrete mixed partial derivative ``d^beta`` of a field."""
    arr = _values_of(field, plan.grid)
    return SpaceTimeField(plan.grid, _check_finite(plan.derivative(arr, beta), "partial"))


def inner(f: SpaceTimeField, g: SpaceTimeField) -> float:
    """Quadrature approximation of the space-time integral of ``f * g``."""
    if f.grid.shape != g.grid.shape:
        raise ShapeMismatchError("inner product of fields on different grids")
    return float(np.sum(f.grid.weights * f.flat * g.flat))


def mean_in_x(u: SpaceTimeField | np.ndarray) -> np.ndarray:
    """Spatial average of each time slice."""
    arr = u.flat if isinstance(u, SpaceTimeField) else np.asarray(u)
    return arr.reshape(arr.shape[0], -1).mean(axis=1)


def mass_per_slice(m: SpaceTimeField | np.ndarray) -> np.ndarray:
    """Total mass of each time slice (unit torus, so equal to :func:`mean_in_x`)."""
    return mean_in_x(m)


def _check_kernel(kernel: np.ndarray, torus: TorusGrid) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape not in (torus.shape, (torus.size,)):
        raise ShapeMismatchError(f"kernel shape {kernel.shape} does not match torus {torus.shape}")
    kernel = kernel.reshape(torus.shape)
    if np.any(kernel < 0):
        raise FieldError("convolution kernel must be nonnegative")
    mass = kernel.sum() * torus.cell_volume
    if abs(mass - 1.0) > 1e-10:
        raise FieldError(f"convolution kernel must have unit discrete mass, got {mass!r}")
    return kernel


def convolve_x(kernel: np.ndarray, f: SpaceTimeField) -> SpaceTimeField:
    """Periodic convolution ``zeta * f`` in space, applied slice by slice."""
    torus = f.grid.torus
    kernel = _check_kernel(kernel, torus)
    return SpaceTimeField(f.grid, _convolve_array(kernel, f.flat, torus))


def _convolve_array(kernel: np.ndarray, arr: np.ndarray, torus: TorusGrid) -> np.ndarray:
    axes = tuple(range(1, 1 + torus.dim))
    shaped = arr.reshape((arr.shape[0],) + torus.shape)
    spec = np.fft.fftn(shaped, axes=axes) * np.fft.fftn(kernel.reshape(torus.shape))[None]
    out = np.real(np.fft.ifftn(spec, axes=axes)) * torus.cell_volume
    return out.reshape(arr.shape)


def convolution_matrix(kernel: np.ndarray, torus: TorusGrid) -> np.ndarray:
    """Dense ``S x S`` matrix of ``f -> zeta * f`` on one slice."""
    kernel = np.asarray(kernel, dtype=float).reshape(torus.shape)
    eye = np.eye(torus.size)
    return _convolve_array(kernel, eye.T, torus).T


# ----------------------------------------------------------------------------
# Gram operator
# ----------------------------------------------------------------------------


class GramOperator:
    """The ``eps``-weighted ``H^{2k}`` Gram operator of a :class:`DiffPlan`.

    ``apply`` returns the plain-dot representer: ``sum(apply(w) * v)`` equals
    ``B[w, v]``.  Mode blocks share their factor whenever the spatial
    symbols coincide (cosine/sine pairs, symmetric 2D frequencies).
    """

    def __init__(self, plan: DiffPlan, epsilon: float):
        if not (np.isfinite(epsilon) and epsilon > 0):
            raise FieldError(f"epsilon must be positive, got {epsilon}")
        self.plan = plan
        self.epsilon = float(epsilon)
        lam = plan.mode_weights
        keys: dict[bytes, int] = {}
        labels = np.empty(lam.shape[1], dtype=int)
        for j in range(lam.shape[1]):
            labels[j] = keys.setdefault(lam[:, j].tobytes(), len(keys))
        self._labels = labels
        self._groups = [np.flatnonzero(labels == g) for g in range(len(keys))]
        self._terms = [self._factor_terms(lam[:, grp[0]]) for grp in self._groups]
        self._factors = [self._stack(terms) for terms in self._terms]
        self._cache: dict = {}

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.plan.grid

    def _factor_terms(self, lam_col: np.ndarray):
        """Square-root factor of one mode block as (diagonal part, [(ell, row scale)])."""
        grid = self.plan.grid
        root_w = np.sqrt(grid.time.quad_weights)
        scale = np.sqrt(self.epsilon * grid.torus.cell_volume)
        diag = scale * root_w * np.sqrt(1.0 + lam_col[0])
        terms = [
            (ell, scale * np.sqrt(lam_col[ell]) * root_w)
            for ell in range(1, self.plan.top + 1)
            if lam_col[ell] > 0
        ]
        return diag, terms

    def _stack(self, terms) -> np.ndarray:
        diag, rows = terms
        mats = [np.diag(diag)] + [w[:, None] * self.plan.time_matrices[ell] for ell, w in rows]
        return np.vstack(mats)

    def _factor_apply(self, coef: np.ndarray) -> list[list[np.ndarray]]:
        # time derivatives act on x - x[0] so constants are annihilated exactly
        out = []
        for (diag, rows), grp in zip(self._terms, self._groups):
            x = coef[:, grp]
            dx = x - x[:1]
            parts = [diag[:, None] * x]
            parts += [w[:, None] * (self.plan.time_matrices[ell] @ dx) for ell, w in rows]
            out.append(parts)
        return out

    def block(self, mode: int) -> np.ndarray:
        """Explicit ``N_t x N_t`` block of one mode (diagnostic use only)."""
        a = self._factors[self._labels[mode]]
        return a.T @ a

    def apply(self, arr: np.ndarray) -> np.ndarray:
        coef = self.plan.to_modes(np.asarray(arr, dtype=float))
        out = np.empty_like(coef)
        for (diag, rows), grp, parts in zip(self._terms, self._groups, self._factor_apply(coef)):
            acc = diag[:, None] * parts[0]
            for (ell, w), part in zip(rows, parts[1:]):
                acc = acc + self.plan.time_matrices[ell].T @ (w[:, None] * part)
            out[:, grp] = acc
        return self.plan.from_modes(out)

    def energy(self, a_arr: np.ndarray, b_arr: np.ndarray | None = None) -> float:
        """``B[a, b]`` evaluated through the square-root factor."""
        fa = self._factor_apply(self.plan.to_modes(np.asarray(a_arr, dtype=float)))
        if b_arr is None:
            return float(sum(np.sum(x * x) for parts in fa for x in parts))
        fb = self._factor_apply(self.plan.to_modes(np.asarray(b_arr, dtype=float)))
        return float(
            sum(np.sum(x * y) for pa, pb in zip(fa, fb) for x, y in zip(pa, pb))
        )

    def energy_terms(self, arr: np.ndarray) -> dict[str, float]:
        """Split of ``B[w, w]`` into the zeroth-order and top-order contributions."""
        coef = self.plan.to_modes(np.asarray(arr, dtype=float))
        grid = self.grid
        base = self.epsilon * grid.torus.cell_volume * float(
            np.sum(grid.time.quad_weights[:, None] * coef * coef)
        )
        return {"zeroth": base, "top": self.energy(arr) - base}

    def lumped_inverse(self, arr: np.ndarray) -> np.ndarray:
        """Fourier-symbol-in-x times Jacobi-in-t approximate inverse."""
        key = "lumped"
        if key not in self._cache:
            diag = np.empty(self.grid.flat_shape)
            for g, grp in enumerate(self._groups):
                a = self._factors[g]
                diag[:, grp] = np.sum(a * a, axis=0)[:, None]
            self._cache[key] = diag
        coef = self.plan.to_modes(arr)
        return self.plan.from_modes(coef / self._cache[key])

    def factor(self, pinned: int | None) -> "GramFactor":
        """QR factorization restricted to free time indices (``pinned`` slice removed)."""
        if pinned not in self._cache:
            self._cache[pinned] = GramFactor(self, pinned)
        return self._cache[pinned]


class GramFactor:
    """Per-mode QR factors of the Gram operator with one pinned time slice.

    Reduced coordinates are arrays of shape ``(S, n_free)``: for each mode
    ``j`` the vector ``R_j @ y_hat_j[free]``.  In these coordinates the Gram
    operator restricted to free entries is the identity.
    """

    def __init__(self, gram: GramOperator, pinned: int | None):
        nt = gram.grid.time.node_count
        if pinned is not None:
            pinned = int(pinned) % nt
        self.gram = gram
        self.pinned = pinned
        self.free = np.array([i for i in range(nt) if i != pinned])
        self.q = []
        self.r = []
        self.pinned_cols = []
        for a in gram._factors:
            q, r = linalg.qr(a[:, self.free], mode="economic")
            self.q.append(q)
            self.r.append(r)
            self.pinned_cols.append(a[:, pinned] if pinned is not None else None)

    @property
    def plan(self) -> DiffPlan:
        return self.gram.plan

    @property
    def n_free(self) -> int:
        return len(self.free)

    @property
    def size(self) -> int:
        return self.n_free * self.gram.grid.torus.size

    # vectors ------------------------------------------------------------------
    def upper(self, coef_free: np.ndarray) -> np.ndarray:
        """``R y`` for modal coefficients of shape ``(n_free, S)``; returns ``(S, n_free)``."""
        out = np.empty(coef_free.shape[::-1])
        for g, grp in enumerate(self.gram._groups):
            out[grp] = (self.r[g] @ coef_free[:, grp]).T
        return out

    def upper_solve(self, z: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`upper`."""
        out = np.empty(z.shape[::-1])
        for g, grp in enumerate(self.gram._groups):
            out[:, grp] = linalg.solve_triangular(self.r[g], z[grp].T, lower=False)
        return out

    def lower_solve(self, dual_free: np.ndarray) -> np.ndarray:
        """``R^{-T} r`` for modal dual vectors of shape ``(n_free, S)``."""
        out = np.empty(dual_free.shape[::-1])
        for g, grp in enumerate(self.gram._groups):
            out[grp] = linalg.solve_triangular(self.r[g], dual_free[:, grp], trans="T").T
        return out

    def pinned_term(self, pinned_values: np.ndarray) -> np.ndarray:
        """``R^{-T} G_{free,pinned} y_pinned`` computed stably as ``Q^T a_p y_p``."""
        out = np.zeros((self.gram.grid.torus.size, self.n_free))
        if self.pinned is None:
            return out
        coef = self.plan.to_modes(pinned_values[None, :])[0]
        for g, grp in enumerate(self.gram._groups):
            out[grp] = np.outer(coef[grp], self.q[g].T @ self.pinned_cols[g])
        return out

    def reduce_dual(self, dual_nodal: np.ndarray) -> np.ndarray:
        """Dot representer (nodal, full grid) to reduced coordinates."""
        return self.lower_solve(self.plan.to_modes(dual_nodal)[self.free])

    def reduce_primal(self, nodal: np.ndarray) -> np.ndarray:
        return self.upper(self.plan.to_modes(nodal)[self.free])

    def expand(self, z: np.ndarray, pinned_values: np.ndarray | None) -> np.ndarray:
        """Reduced coordinates back to a nodal array with the pinned slice filled in."""
        grid = self.gram.grid
        coef = np.zeros(grid.flat_shape)
        coef[self.free] = self.upper_solve(z)
        nodal = self.plan.from_modes(coef)
        if self.pinned is not None:
            nodal[self.pinned] = 0.0 if pinned_values is None else pinned_values
        return nodal

    def solve(self, dual_nodal: np.ndarray, pinned_values: np.ndarray | None = None) -> np.ndarray:
        """Solve ``(G y)_free = r_free`` with ``y[pinned] = pinned_values``."""
        z = self.reduce_dual(dual_nodal)
        if self.pinned is not None and pinned_values is not None:
            z = z - self.pinned_term(pinned_values)
        return self.expand(z, pinned_values)

    def residual_norm(
        self, y: np.ndarray, dual_nodal: np.ndarray
    ) -> tuple[float, float]:
        """Dual-norm residual ``|R^{-T}(G y - r)_free|`` and the reference ``|R^{-T} r_free|``."""
        z = self.reduce_primal(y)
        if self.pinned is not None:
            z = z + self.pinned_term(y[self.pinned])
        rz = self.reduce_dual(dual_nodal)
        return float(np.linalg.norm(z - rz)), float(np.linalg.norm(rz))

    # matrices -----------------------------------------------------------------
    def _order(self) -> np.ndarray:
        """Permutation from (t_free, mode) flattening to (mode, t_free)."""
        s = self.gram.grid.torus.size
        nf = self.n_free
        return (np.arange(nf)[None, :] * s + np.arange(s)[:, None]).ravel()

    def _modal_free_rows(self, mat: np.ndarray) -> np.ndarray:
        """Nodal-row matrix ``(N_t*S, c)`` to modal free rows ordered (t_free, mode)."""
        grid = self.gram.grid
        nt, s = grid.flat_shape
        c = mat.shape[1]
        x = mat.reshape(nt, s, c).transpose(0, 2, 1)
        x = self.plan.to_modes(x).transpose(0, 2, 1)
        return x[self.free].reshape(self.n_free * s, c)

    def rows_to_reduced(self, mat: np.ndarray) -> np.ndarray:
        """Left-multiply nodal-row dual matrix by ``R^{-T}``; rows become reduced coordinates."""
        s = self.gram.grid.torus.size
        nf = self.n_free
        c = mat.shape[1]
        x = self._modal_free_rows(mat).reshape(nf, s, c)
        out = np.empty((s, nf, c))
        for g, grp in enumerate(self.gram._groups):
            blk = x[:, grp, :].reshape(nf, len(grp) * c)
            sol = linalg.solve_triangular(self.r[g], blk, trans="T")
            out[grp] = sol.reshape(nf, len(grp), c).transpose(1, 0, 2)
        return out.reshape(s * nf, c)

    def cols_to_reduced(self, mat: np.ndarray) -> np.ndarray:
        """Right-multiply a nodal-column matrix by the primal map ``R^{-1}`` (columns reduced)."""
        out = self.rows_to_reduced(np.ascontiguousarray(mat.T))
        return out.T

    def reduced_to_nodal_cols(self, z_cols: np.ndarray) -> np.ndarray:
        """Columns in reduced coordinates to nodal vectors (pinned entries zero)."""
        s = self.gram.grid.torus.size
        nf = self.n_free
        c = z_cols.shape[1]
        out = np.zeros((self.gram.grid.time.node_count, s, c))
        zz = z_cols.reshape(s, nf, c)
        for g, grp in enumerate(self.gram._groups):
            blk = zz[grp].transpose(1, 0, 2).reshape(nf, len(grp) * c)
            sol = linalg.solve_triangular(self.r[g], blk, lower=False)
            out[self.free[:, None], grp[None, :], :] = sol.reshape(nf, len(grp), c)
        nodal = self.plan.from_modes(out.transpose(0, 2, 1)).transpose(0, 2, 1)
        return nodal.reshape(-1, c)

    @cached_property
    def primal_matrix(self) -> np.ndarray:
        """Dense map from reduced coordinates to nodal values, ``(N_t*S, size)``."""
        mat = self.reduced_to_nodal_cols(np.eye(self.size))
        mat.setflags(write=False)
        return mat

    def modal_solution(self, z: np.ndarray) -> np.ndarray:
        """Free modal coefficients ``R^{-1} z`` of shape ``(n_free, S)``."""
        return self.upper_solve(z)

    def backward_error(self, z: np.ndarray) -> tuple[float, float]:
        """Round-trip errors of the triangular solves behind :meth:`expand`.

        Returns the componentwise backward error ``|R y - z| / (|R| |y|)``
        (machine precision for a stable solve) and the plain relative
        discrepancy ``|R y - z| / |z|``, which is the float64 floor of any
        energy-norm residual on this grid.
        """
        y = self.upper_solve(z)
        back = self.upper(y) - z
        ref = np.empty(z.shape)
        for g, grp in enumerate(self.gram._groups):
            ref[grp] = (np.abs(self.r[g]) @ np.abs(y[:, grp])).T
        znorm = float(np.linalg.norm(z))
        bnorm = float(np.linalg.norm(back))
        return (
            float(np.max(np.abs(back) / np.maximum(ref, np.finfo(float).tiny))),
            bnorm / znorm if znorm > 0 else 0.0,
        )


def gram_apply(gram: GramOperator, w: SpaceTimeField) -> SpaceTimeField:
    """Plain-dot representer of ``v -> B[w, v]``."""
    arr = _values_of(w, gram.grid)
    return SpaceTimeField(gram.grid, _check_finite(gram.apply(arr), "gram_apply"))


def random_smooth(
    grid: SpaceTimeGrid,
    rng: np.random.Generator,
    *,
    max_freq: int | None = None,
    degree: int = 4,
    zero_mean: bool = False,
) -> np.ndarray:
    """Band-limited random field: trigonometric in x, polynomial in t (flattened)."""
    torus = grid.torus
    if max_freq is None:
        max_freq = max(1, torus.points_per_dim // 4)
    s = grid.time.nodes / grid.time.horizon
    tpoly = np.stack([s**j for j in range(degree + 1)], axis=1)
    out = np.zeros(grid.flat_shape)
    freqs = itertools.product(range(-max_freq, max_freq + 1), repeat=torus.dim)
    for kap in freqs:
        kap = np.array(kap)
        if zero_mean and not kap.any():
            continue
        phase = 2 * np.pi * (torus.points @ kap)
        decay = 1.0 / (1.0 + np.abs(kap).sum()) ** 2
        ca = tpoly @ rng.standard_normal(degree + 1)
        cb = tpoly @ rng.standard_normal(degree + 1)
        out += decay * (np.outer(ca, np.cos(phase)) + np.outer(cb, np.sin(phase)))
    return out


def iter_multi_indices(total: int, dim: int) -> Iterable[tuple[int, ...]]:
    for beta in itertools.product(range(total + 1), repeat=dim + 1):
        if sum(beta) == total:
            yield beta
