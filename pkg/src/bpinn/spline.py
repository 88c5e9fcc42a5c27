"""Uniform B-splines, tensor-product interpolation and approximation rates.

Knots are the uniform extension t_i = i / l.  The basis on [0, 1] is
N_i, i in {-k+1, ..., l-1}, with

    N_i(x) = 1/(k-1)! * sum_j (-1)^j C(k, j) (l x - i - j)_+^(k-1).

Coefficients of a d-variate spline are stored as an array of shape
(l+k-1,)*d whose entry [i_1 + k - 1, ..., i_d + k - 1] belongs to the
multi-index (i_1, ..., i_d).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import comb

from .jet import Jet2


@dataclass(frozen=True)
class SplineSpec:
    k: int
    l: int
    d: int = 1

    def __post_init__(self):
        if self.k < 2 or self.l < 1 or self.d < 1:
            raise ValueError(f"invalid spline spec k={self.k}, l={self.l}, d={self.d}")

    @property
    def n_basis(self) -> int:
        return self.l + self.k - 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(-self.k + 1, self.l)

    def knot(self, i) -> np.ndarray:
        return np.asarray(i, dtype=float) / self.l

    @property
    def compilable(self) -> bool:
        return (self.k - 1) % 3 == 0

    def check_index(self, i: int) -> None:
        if not -self.k + 1 <= i <= self.l - 1:
            raise IndexError(f"basis index {i} outside {{{-self.k + 1}, ..., {self.l - 1}}}")


@dataclass(frozen=True)
class SplineCoeffs:
    spec: SplineSpec
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.shape != (self.spec.n_basis,) * self.spec.d:
            raise ValueError(f"coefficient array {c.shape} does not match {self.spec}")
        object.__setattr__(self, "coefficients", c)

    def coefficient(self, multi_index) -> float:
        offset = self.spec.k - 1
        return float(self.coefficients[tuple(int(i) + offset for i in multi_index)])

    @property
    def sup_bound(self) -> float:
        """max |lambda_i|, a bound on the sup-norm (partition of unity)."""
        return float(np.abs(self.coefficients).max()) if self.coefficients.size else 0.0


def _falling(p: int, r: int) -> int:
    return math.perm(p, r) if r <= p else 0


def _truncated_power(s: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return (s > 0).astype(float)
    return np.maximum(s, 0.0) ** p


def _basis_block(k: int, l: int, idx: np.ndarray, x: np.ndarray, r: int) -> np.ndarray:
    """r-th derivative of N_idx at x, shape x.shape + idx.shape.

    Per point the sum is taken in whichever direction keeps |l x - i - j|
    small: (s)_+^p + (-1)^p (-s)_+^p = s^p is a polynomial, which the k-th
    difference annihilates.
    """
    p = k - 1
    if r > p:
        return np.zeros(x.shape + idx.shape)
    j = np.arange(k + 1)
    c = (-1.0) ** j * comb(k, j, exact=False)
    s = l * x[..., None, None] - idx[:, None] - j  # (..., nb, k+1)
    q = p - r
    left = _truncated_power(s, q) @ c
    right = -((-1.0) ** q) * (_truncated_power(-s, q) @ c)
    centre = idx + k / 2.0
    use_left = l * x[..., None] <= centre
    scale = float(l) ** r * _falling(p, r) / math.factorial(p)
    return scale * np.where(use_left, left, right)


def bspline_eval(spec: SplineSpec, i: int, x, deriv_order: int = 0):
    """N_i^(k) or its first/second derivative by the explicit formula."""
    spec.check_index(i)
    if deriv_order not in (0, 1, 2):
        raise ValueError("deriv_order must be 0, 1 or 2")
    x = np.asarray(x, dtype=float)
    out = _basis_block(spec.k, spec.l, np.array([i]), x, deriv_order)[..., 0]
    return float(out) if out.ndim == 0 else out


def basis_matrix(spec: SplineSpec, x, deriv_order: int = 0) -> np.ndarray:
    """All basis functions at x: shape (len(x), l+k-1)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return _basis_block(spec.k, spec.l, spec.indices, x, deriv_order)


def cox_de_boor(knots: Sequence[float], i: int, k: int, x) -> np.ndarray:
    """Order-k B-spline on knots[i..i+k] by the Cox-de Boor recursion (oracle)."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(knots, dtype=float)
    if k == 1:
        return ((t[i] <= x) & (x < t[i + 1])).astype(float)
    out = np.zeros_like(x)
    if t[i + k - 1] > t[i]:
        out = out + (x - t[i]) / (t[i + k - 1] - t[i]) * cox_de_boor(t, i, k - 1, x)
    if t[i + k] > t[i + 1]:
        out = out + (t[i + k] - x) / (t[i + k] - t[i + 1]) * cox_de_boor(t, i + 1, k - 1, x)
    return out


def uniform_knots(spec: SplineSpec) -> np.ndarray:
    """t_i for i = -k+1, ..., l+k-1; entry m holds t_{m-k+1}."""
    return np.arange(-spec.k + 1, spec.l + spec.k) / spec.l


def interpolation_sites(spec: SplineSpec) -> np.ndarray:
    """Greville abscissae of the endpoint-clamped knot vector.

    The plain averages of uniform-extension knots leave [0, 1] for the
    boundary basis functions; clamping the knots to [0, 1] first keeps every
    site in the domain and still puts site i inside supp N_i.
    """
    k = spec.k
    t = np.clip(uniform_knots(spec), 0.0, 1.0)
    m = np.arange(spec.n_basis)
    return np.array([t[mi + 1 : mi + k].mean() for mi in m])


def _collocation_banded(spec: SplineSpec) -> tuple[np.ndarray, int]:
    M = basis_matrix(spec, interpolation_sites(spec))
    bw = spec.k - 1
    n = spec.n_basis
    ab = np.zeros((2 * bw + 1, n))
    for col in range(n):
        for row in range(max(0, col - bw), min(n, col + bw + 1)):
            ab[bw + row - col, col] = M[row, col]
    return ab, bw, M


def quasi_interpolant(f: Callable[[np.ndarray], np.ndarray], spec: SplineSpec) -> SplineCoeffs:
    """Coefficients of the tensor spline interpolating f at the site grid.

    ``f`` maps points of shape (n, d) to values of shape (n,).  The
    collocation system is solved one axis at a time with banded LU.
    """
    sites = interpolation_sites(spec)
    d, nb = spec.d, spec.n_basis
    grids = np.meshgrid(*([sites] * d), indexing="ij")
    X = np.stack([g.ravel() for g in grids], axis=1)
    values = np.asarray(f(X), dtype=float).reshape((nb,) * d)
    if not np.all(np.isfinite(values)):
        raise ValueError("f returned non-finite values at the interpolation sites")
    ab, bw, M = _collocation_banded(spec)
    coeffs = values
    for axis in range(d):
        moved = np.moveaxis(coeffs, axis, 0).reshape(nb, -1)
        try:
            sol = solve_banded((bw, bw), ab, moved)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"singular interpolation system for {spec}") from exc
        resid = np.abs(M @ sol - moved).max() if moved.size else 0.0
        if resid > 1e-10 * max(1.0, np.abs(moved).max()):
            raise np.linalg.LinAlgError(f"interpolation residual {resid} too large for {spec}")
        coeffs = np.moveaxis(sol.reshape((nb,) + tuple(np.delete(coeffs.shape, axis))), 0, axis)
    return SplineCoeffs(spec, coeffs)


def _contract(mats: list, C: np.ndarray) -> np.ndarray:
    """sum_{i_1..i_d} C[i_1..i_d] prod_a mats[a][n, i_a], shape (n,)."""
    out = np.einsum("ni,i...->n...", mats[0], C)
    for M in mats[1:]:
        out = np.einsum("ni,ni...->n...", M, out)
    return out


def spline_eval(coeffs: SplineCoeffs, x) -> Jet2:
    """Jet of the tensor spline at points of shape (d,) or (n, d) in [0,1]^d."""
    spec = coeffs.spec
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != spec.d:
        raise ValueError(f"expected points of dimension {spec.d}, got {X.shape}")
    if np.any(X < 0.0) or np.any(X > 1.0):
        raise ValueError("spline evaluation points must lie in [0, 1]^d")
    d, n = spec.d, X.shape[0]
    B = [[basis_matrix(spec, X[:, a], r) for r in range(3)] for a in range(d)]
    C = coeffs.coefficients

    def term(orders):
        return _contract([B[a][orders[a]] for a in range(d)], C)

    value = term([0] * d)
    grad = np.empty((n, d))
    hess = np.empty((n, d, d))
    for a in range(d):
        o = [0] * d
        o[a] = 1
        grad[:, a] = term(o)
        for b in range(a, d):
            o2 = [0] * d
            o2[a] += 1
            o2[b] += 1
            hess[:, a, b] = hess[:, b, a] = term(o2)
    jet = Jet2(value, grad, hess)
    return jet[0] if single else jet


@dataclass(frozen=True)
class ApproximationReport:
    k: int
    d: int
    l_values: tuple
    c0_errors: tuple
    c2_errors: tuple
    c0_slope: float
    c2_slope: float

    def rows(self) -> list[dict]:
        return [
            {"l": l, "c0_error": e0, "c2_error": e2}
            for l, e0, e2 in zip(self.l_values, self.c0_errors, self.c2_errors)
        ]


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def approximation_report(
    f_jet: Callable[[np.ndarray], Jet2],
    k: int,
    l_values: Sequence[int],
    d: int = 1,
    n_grid: int = 1001,
) -> ApproximationReport:
    """C^0 and C^2 errors of the interpolant on a uniform grid, per l.

    The C^2 error is the largest of the value, gradient and Hessian gaps.
    """
    if d == 1:
        X = np.linspace(0.0, 1.0, n_grid)[:, None]
    else:
        g = np.linspace(0.0, 1.0, max(2, int(round(n_grid ** (1.0 / d)))))
        X = np.stack([m.ravel() for m in np.meshgrid(*([g] * d), indexing="ij")], axis=1)
    truth = f_jet(X)
    c0, c2 = [], []
    for l in l_values:
        coeffs = quasi_interpolant(lambda P: f_jet(P).value, SplineSpec(k, l, d))
        approx = spline_eval(coeffs, X)
        e0 = np.abs(approx.value - truth.value).max()
        e1 = np.abs(approx.grad - truth.grad).max()
        e2 = np.abs(approx.hess - truth.hess).max()
        c0.append(float(e0))
        c2.append(float(max(e0, e1, e2)))
    return ApproximationReport(k, d, tuple(l_values), tuple(c0), tuple(c2),
                               loglog_slope(l_values, c0), loglog_slope(l_values, c2))


def basis_jets(spec: SplineSpec, X) -> Jet2:
    """Jets of every tensor basis function at X (n, d): batch shape (n, nb^d).

    Column order matches ``SplineCoeffs.coefficients.ravel()``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    if d != spec.d:
        raise ValueError(f"expected points of dimension {spec.d}, got {X.shape}")
    B = [[basis_matrix(spec, X[:, a], r) for r in range(3)] for a in range(d)]

    def outer(orders):
        out = np.ones((n, 1))
        for a in range(d):
            out = (out[:, :, None] * B[a][orders[a]][:, None, :]).reshape(n, -1)
        return out

    value = outer([0] * d)
    nf = value.shape[1]
    grad = np.empty((n, nf, d))
    hess = np.empty((n, nf, d, d))
    for a in range(d):
        o = [0] * d
        o[a] = 1
        grad[:, :, a] = outer(o)
        for b in range(a, d):
            o2 = [0] * d
            o2[a] += 1
            o2[b] += 1
            hess[:, :, a, b] = hess[:, :, b, a] = outer(o2)
    return Jet2(value, grad, hess)
