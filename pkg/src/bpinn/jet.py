"""Second-order forward-mode jets over a d-dimensional spatial input.

A :class:`Jet2` carries a value together with its gradient and Hessian with
respect to the spatial variable ``x``.  All fields may carry leading batch
dimensions, so one jet can describe a scalar at many points (and many
neurons) at once::

    value: (*batch,)   grad: (*batch, d)   hess: (*batch, d, d)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse


@dataclass(frozen=True)
class Jet2:
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    def __post_init__(self):
        value = np.asarray(self.value, dtype=float)
        grad = np.asarray(self.grad, dtype=float)
        hess = np.asarray(self.hess, dtype=float)
        if grad.shape[:-1] != value.shape or hess.shape[:-2] != value.shape:
            raise ValueError(
                f"inconsistent jet shapes: value {value.shape}, grad {grad.shape}, "
                f"hess {hess.shape}"
            )
        if hess.shape[-2:] != (grad.shape[-1], grad.shape[-1]):
            raise ValueError(f"hessian must be d x d, got {hess.shape[-2:]}")
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "grad", grad)
        object.__setattr__(self, "hess", hess)

    @property
    def dim(self) -> int:
        return self.grad.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __getitem__(self, idx) -> "Jet2":
        if not isinstance(idx, tuple):
            idx = (idx,)
        full = slice(None)
        return Jet2(self.value[idx], self.grad[idx + (full,)], self.hess[idx + (full, full)])

    def __add__(self, other):
        if isinstance(other, Jet2):
            return jet_add(self, other)
        return Jet2(self.value + other, self.grad, self.hess)

    __radd__ = __add__

    def __neg__(self):
        return jet_scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Jet2):
            return jet_add(self, jet_scale(other, -1.0))
        return Jet2(self.value - other, self.grad, self.hess)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet2):
            return jet_mul(self, other)
        return jet_scale(self, other)

    __rmul__ = __mul__


def zero_jet(d: int, shape: tuple = ()) -> Jet2:
    return Jet2(np.zeros(shape), np.zeros(shape + (d,)), np.zeros(shape + (d, d)))


def constant_jet(c, d: int) -> Jet2:
    c = np.asarray(c, dtype=float)
    return Jet2(c, np.zeros(c.shape + (d,)), np.zeros(c.shape + (d, d)))


def lift_variable(x, axis_weights) -> Jet2:
    """Jet of the linear functional ``w . x`` at the point(s) ``x``.

    ``x`` may be a single point of shape (d,) or a batch of shape (n, d).
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(axis_weights, dtype=float)
    if w.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"dimension mismatch: x {x.shape} vs weights {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("axis weights must be finite")
    d = w.shape[0]
    batch = x.shape[:-1]
    grad = np.broadcast_to(w, batch + (d,)).copy()
    return Jet2(x @ w, grad, np.zeros(batch + (d, d)))


def coordinates(x) -> Jet2:
    """Jets of every coordinate function; batch shape (*x.shape[:-1], d)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    eye = np.eye(d)
    grad = np.broadcast_to(eye, x.shape + (d,)).copy()
    return Jet2(x.copy(), grad, np.zeros(x.shape + (d, d)))


def _check_dims(a: Jet2, b: Jet2):
    if a.dim != b.dim:
        raise ValueError(f"jet dimension mismatch: {a.dim} vs {b.dim}")


def jet_add(a: Jet2, b: Jet2) -> Jet2:
    _check_dims(a, b)
    return Jet2(a.value + b.value, a.grad + b.grad, a.hess + b.hess)


def jet_scale(a: Jet2, c) -> Jet2:
    c = np.asarray(c, dtype=float)
    return Jet2(a.value * c, a.grad * c[..., None], a.hess * c[..., None, None])


def jet_mul(a: Jet2, b: Jet2) -> Jet2:
    """Product rule up to second order."""
    _check_dims(a, b)
    av, bv = a.value[..., None], b.value[..., None]
    outer = a.grad[..., :, None] * b.grad[..., None, :]
    hess = av[..., None] * b.hess + bv[..., None] * a.hess + outer + np.swapaxes(outer, -1, -2)
    return Jet2(a.value * b.value, av * b.grad + bv * a.grad, hess)


def jet_sigma3(a: Jet2) -> Jet2:
    """Chain rule through sigma_3(s) = max(s, 0)^3.

    Points with ``s <= 0`` get an all-zero jet; sigma_3 is C^2 with all three
    derivative orders vanishing at the kink.
    """
    s = np.maximum(a.value, 0.0)
    d1 = 3.0 * s * s
    d2 = 6.0 * s
    g = a.grad
    hess = d1[..., None, None] * a.hess + d2[..., None, None] * (g[..., :, None] * g[..., None, :])
    return Jet2(s * s * s, d1[..., None] * g, hess)


def affine(a: Jet2, weights: np.ndarray, bias: np.ndarray) -> Jet2:
    """Apply ``z -> z @ weights + bias`` along the last batch axis of ``a``.

    ``a`` has batch shape (..., n_in); the result has batch shape (..., n_out).
    """
    if not sparse.issparse(weights):
        weights = np.asarray(weights, dtype=float)

    def matmul(z):
        # flatten to 2-d so scipy sparse matrices work as well as arrays
        n_in = z.shape[-1]
        out = z.reshape(-1, n_in) @ weights
        return np.asarray(out).reshape(z.shape[:-1] + (weights.shape[1],))

    value = matmul(a.value) + bias
    # move the neuron axis last so each product is a plain matmul
    grad = np.moveaxis(matmul(np.moveaxis(a.grad, -2, -1)), -1, -2)
    hess = np.moveaxis(matmul(np.moveaxis(a.hess, -3, -1)), -1, -3)
    return Jet2(value, grad, hess)
