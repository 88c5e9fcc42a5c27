"""Exact compilation of tensor-product splines into sigma_3 networks.

Building blocks are cubic gadgets, i.e. fixed combinations
``bias + sum_m w_m sigma_3(a_m . z + c_m)`` that reproduce z, z^2 or x*y
exactly on the nonnegative orthant.  A small circuit builder keeps track of
which layer every intermediate quantity lives on, shares identical neurons,
and finally lowers the circuit to :class:`NetworkParams`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .network import Architecture, ClipSpec, NetworkParams, count_params
from .spline import SplineCoeffs, SplineSpec


def _sigma3(z):
    return np.maximum(z, 0.0) ** 3


# ---------------------------------------------------------------------------
# gadgets


@dataclass(frozen=True)
class CubicGadget:
    """f(z) = scale * (bias + sum_m weights[m] * sigma_3(arg[m] . z + shifts[m]))."""

    name: str
    arg: np.ndarray  # (m, n_inputs)
    shifts: np.ndarray  # (m,)
    weights: np.ndarray  # (m,)
    bias: float
    scale: float = 1.0

    @property
    def n_inputs(self) -> int:
        return self.arg.shape[1]

    def __call__(self, *z):
        Z = np.stack(np.broadcast_arrays(*[np.asarray(v, float) for v in z]), axis=-1)
        atoms = _sigma3(Z @ self.arg.T + self.shifts)
        return self.scale * (self.bias + atoms @ self.weights)


@dataclass(frozen=True)
class GadgetCheck:
    name: str
    max_error: float
    passed: bool


@dataclass(frozen=True)
class GadgetCoefficients:
    linear: CubicGadget
    square: CubicGadget
    product: CubicGadget
    domain: tuple = (0.0, 10.0)
    checks: tuple = field(default=())

    def check(self, name: str) -> GadgetCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


PRINTED_LINEAR = CubicGadget(
    "printed-linear", np.ones((4, 1)), np.array([3.0, 2.0, 1.0, 0.0]),
    np.array([1.0, -5.0, 7.0, -3.0]), 6.0, -0.5,
)
PRINTED_SQUARE = CubicGadget(
    "printed-square", np.ones((3, 1)), np.array([2.0, 1.0, 0.0]),
    np.array([1.0, -4.0, 3.0]), -4.0, -1.0 / 6.0,
)
PRINTED_PRODUCT = CubicGadget(
    "printed-product",
    np.array([[1, 1], [1, 1], [1, 1], [1, 0], [1, 0], [1, 0], [0, 1], [0, 1], [0, 1]], float),
    np.array([-2.0, -1.0, 0.0, 2.0, 1.0, 0.0, 2.0, 1.0, 0.0]),
    np.array([1.0, -4.0, 3.0, -1.0, 4.0, -3.0, -1.0, 4.0, -3.0]), 4.0, -1.0 / 12.0,
)


def solve_linear_gadget(shifts=(0, 1, 2, 3)) -> tuple:
    """Exact weights w with sum_m w_m (z + c_m)^3 = z for all z.

    Matching the z^3, z^2, z^1 and z^0 coefficients gives a Vandermonde-type
    system, solved over the rationals.
    """
    c = [Fraction(s) for s in shifts]
    if len(set(c)) != 4:
        raise ValueError("the linear gadget needs four distinct shifts")
    # rows: coefficient of z^3, z^2, z, 1 in (z + c)^3 = z^3 + 3c z^2 + 3c^2 z + c^3
    A = [[Fraction(1)] * 4, [3 * ci for ci in c], [3 * ci * ci for ci in c], [ci**3 for ci in c]]
    rhs = [Fraction(0), Fraction(0), Fraction(1), Fraction(0)]
    n = 4
    M = [row[:] + [r] for row, r in zip(A, rhs)]
    for col in range(n):
        piv = next((r for r in range(col, n) if M[r][col] != 0), None)
        if piv is None:
            raise ValueError("singular linear-gadget system")
        M[col], M[piv] = M[piv], M[col]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col] / M[col][col]
                M[r] = [a - f * b for a, b in zip(M[r], M[col])]
    return tuple(M[i][n] / M[i][i] for i in range(n))


def validate_gadget(g: CubicGadget, target, domain=(0.0, 10.0), n: int = 1000, tol: float = 1e-9) -> GadgetCheck:
    """Magnitude-scaled error max |g - target| / max(1, |target|) on a grid."""
    lo, hi = domain
    if g.n_inputs == 1:
        pts = (np.linspace(lo, hi, n),)
    else:
        side = int(math.ceil(math.sqrt(n)))
        u = np.linspace(lo, hi, side)
        pts = tuple(m.ravel() for m in np.meshgrid(u, u, indexing="ij"))
    want = target(*pts)
    err = np.abs(g(*pts) - want) / np.maximum(1.0, np.abs(want))
    worst = float(err.max())
    return GadgetCheck(g.name, worst, bool(worst <= tol))


def derive_gadgets(domain=(0.0, 10.0), tol: float = 1e-9) -> GadgetCoefficients:
    """Validated linear, square and product gadgets.

    The square gadget is taken as printed.  The linear gadget comes from
    :func:`solve_linear_gadget`; the product gadget from polarization
    xy = ((x+y)^2 - x^2 - y^2)/2 with the square gadget, so every sigma_3
    argument is nonnegative for x, y >= 0.  The printed linear and product
    identities are validated and reported but never used.
    """
    w = solve_linear_gadget()
    linear = CubicGadget("linear", np.ones((4, 1)), np.arange(4.0), np.array([float(x) for x in w]), 0.0)
    square = CubicGadget("square", PRINTED_SQUARE.arg, PRINTED_SQUARE.shifts, PRINTED_SQUARE.weights,
                         PRINTED_SQUARE.bias, PRINTED_SQUARE.scale)
    sw, ss = PRINTED_SQUARE.weights, PRINTED_SQUARE.shifts
    product = CubicGadget(
        "product",
        np.repeat(np.array([[1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]), 3, axis=0),
        np.tile(ss, 3),
        np.concatenate([sw, -sw, -sw]),
        PRINTED_SQUARE.bias * (1 - 1 - 1),
        0.5 * PRINTED_SQUARE.scale,
    )
    checks = (
        validate_gadget(linear, lambda z: z, domain, tol=tol),
        validate_gadget(square, lambda z: z * z, domain, tol=tol),
        validate_gadget(product, lambda x, y: x * y, domain, tol=tol),
        validate_gadget(PRINTED_LINEAR, lambda z: z, domain, tol=tol),
        validate_gadget(PRINTED_SQUARE, lambda z: z * z, domain, tol=tol),
        validate_gadget(PRINTED_PRODUCT, lambda x, y: x * y, domain, tol=tol),
    )
    for c in checks[:3]:
        if not c.passed:
            raise RuntimeError(f"gadget {c.name} failed validation: error {c.max_error:.3g}")
    return GadgetCoefficients(linear, square, product, tuple(domain), checks)


# ---------------------------------------------------------------------------
# circuit builder

CONST = -1  # layer tag for pure constants


@dataclass(frozen=True)
class Value:
    """Affine combination of the neurons of one layer (layer 0 = inputs)."""

    layer: int
    coeffs: tuple  # ((neuron index, weight), ...) sorted by index
    const: float = 0.0
    nonneg: bool = False

    @property
    def is_const(self) -> bool:
        return self.layer == CONST


class CircuitBuilder:
    """Incrementally builds a layered sigma_3 circuit over d inputs."""

    def __init__(self, d: int, gadgets: Optional[GadgetCoefficients] = None):
        self.d = d
        self.gadgets = gadgets or derive_gadgets()
        self.layers: list[list[tuple]] = []  # hidden layer -> [(coeffs, bias)]
        self._neuron_ids: dict = {}
        self._square_memo: dict = {}

    def input(self, axis: int) -> Value:
        return Value(0, ((axis, 1.0),), 0.0)

    @staticmethod
    def const(c: float) -> Value:
        return Value(CONST, (), float(c), c >= 0)

    def lincomb(self, terms, const: float = 0.0, nonneg: bool = False) -> Value:
        """sum_t c_t v_t + const; all non-constant values must share a layer."""
        layers = {v.layer for _, v in terms if not v.is_const}
        if len(layers) > 1:
            raise ValueError(f"cannot combine values from layers {sorted(layers)}")
        acc: dict = {}
        consts = [float(const)]
        for c, v in terms:
            consts.append(c * v.const)
            for idx, w in v.coeffs:
                acc.setdefault(idx, []).append(c * w)
        coeffs = tuple((i, s) for i in sorted(acc) if (s := math.fsum(acc[i])) != 0.0)
        total = math.fsum(consts)
        if not layers or not coeffs:
            return Value(CONST, (), total, nonneg or total >= 0)
        return Value(layers.pop(), coeffs, total, nonneg)

    def sigma3(self, v: Value) -> Value:
        if v.is_const:
            return self.const(max(v.const, 0.0) ** 3)
        target = v.layer  # new neuron sits on hidden layer v.layer + 1
        while len(self.layers) <= target:
            self.layers.append([])
        key = (target, v.coeffs, v.const)
        idx = self._neuron_ids.get(key)
        if idx is None:
            idx = len(self.layers[target])
            self.layers[target].append((v.coeffs, v.const))
            self._neuron_ids[key] = idx
        return Value(target + 1, ((idx, 1.0),), 0.0, True)

    def _apply(self, g: CubicGadget, args: tuple) -> Value:
        terms = []
        for row, shift, w in zip(g.arg, g.shifts, g.weights):
            inner = self.lincomb([(float(a), v) for a, v in zip(row, args) if a != 0.0], float(shift))
            terms.append((g.scale * float(w), self.sigma3(inner)))
        return self.lincomb(terms, g.scale * g.bias, nonneg=True)

    def _require_nonneg(self, *values):
        for v in values:
            if not v.nonneg:
                raise ValueError("gadget input is not known to be nonnegative")

    def square(self, v: Value) -> Value:
        self._require_nonneg(v)
        if v.is_const:
            return self.const(v.const**2)
        key = (v.layer, v.coeffs, v.const)
        if key not in self._square_memo:
            self._square_memo[key] = self._apply(self.gadgets.square, (v,))
        return self._square_memo[key]

    def product(self, u: Value, v: Value) -> Value:
        """u * v via polarization; squares of shared factors are reused."""
        self._require_nonneg(u, v)
        if u.is_const and v.is_const:
            return self.const(u.const * v.const)
        if u == v:
            return self.square(u)
        s = self.lincomb([(1.0, u), (1.0, v)], nonneg=True)
        return self.lincomb([(0.5, self.square(s)), (-0.5, self.square(u)), (-0.5, self.square(v))],
                            nonneg=True)

    def transport(self, v: Value) -> Value:
        """Carry a nonnegative value one layer down with the linear gadget."""
        self._require_nonneg(v)
        if v.is_const:
            return v
        return self._apply(self.gadgets.linear, (v,))

    def product_tree(self, factors: list) -> Value:
        """Balanced product; the leaf count is padded to a power of two with 1."""
        n = len(factors)
        depth = max(0, math.ceil(math.log2(n))) if n > 1 else 0
        level = list(factors) + [self.const(1.0)] * (2**depth - n)
        while len(level) > 1:
            level = [self.product(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        return level[0]

    def to_params(self, out: Value, bound: Optional[float] = None) -> NetworkParams:
        """Lower the circuit with output ``out`` (which must sit on the last layer)."""
        if not self.layers:
            # no hidden neuron was ever needed; use one dead neuron
            self.layers.append([((), -1.0)])
        depth = len(self.layers)
        if not out.is_const and out.layer != depth:
            raise ValueError(f"output lives on layer {out.layer}, circuit has {depth} hidden layers")
        widths = tuple(len(layer) for layer in self.layers)
        sizes = [self.d, *widths, 1]
        theta = np.zeros(count_params(self.d, widths))
        pos = 0
        for li, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = np.zeros((n_in, n_out))
            b = np.zeros(n_out)
            if li < depth:
                for j, (coeffs, bias) in enumerate(self.layers[li]):
                    for i, w in coeffs:
                        W[i, j] = w
                    b[j] = bias
            else:
                for i, w in out.coeffs:
                    W[i, 0] = w
                b[0] = out.const
            theta[pos : pos + W.size] = W.ravel()
            pos += W.size
            theta[pos : pos + n_out] = b
            pos += n_out
        max_abs = float(np.abs(theta).max()) if theta.size else 0.0
        B = max(max_abs, 1e-300) if bound is None else bound
        if B < max_abs:
            raise ValueError(f"bound {B} below max |theta| = {max_abs}")
        return NetworkParams(Architecture(self.d, widths, theta != 0.0), theta, B)


# ---------------------------------------------------------------------------
# truncated powers and splines


def _truncated_power_value(cb: CircuitBuilder, affine: Value, degree: int) -> Value:
    """max(affine, 0)^degree as a product tree of degree/3 sigma_3 copies."""
    if degree % 3 != 0 or degree < 3:
        raise ValueError(f"degree must be a positive multiple of 3, got {degree}")
    cube = cb.sigma3(affine)
    return cb.product_tree([cube] * (degree // 3))


def compile_truncated_power(shift: float, degree: int, gadgets: Optional[GadgetCoefficients] = None,
                            scale: float = 1.0) -> NetworkParams:
    """Network computing max(scale * (x - shift), 0)^degree for scalar x."""
    cb = CircuitBuilder(1, gadgets)
    affine = cb.lincomb([(scale, cb.input(0))], -scale * shift)
    return cb.to_params(_truncated_power_value(cb, affine, degree))


def truncated_power_depth(degree: int) -> int:
    m = degree // 3
    return 1 + (math.ceil(math.log2(m)) if m > 1 else 0)


def _basis_value(cb: CircuitBuilder, spec: SplineSpec, axis: int, i: int) -> Value:
    """N_i(x_axis) as a Value on layer truncated_power_depth(k - 1).

    The truncated-power sum is written in whichever direction keeps the
    first-layer arguments below (l + k) / 2 in magnitude on [0, 1]; terms
    that vanish on [0, 1] are dropped.
    """
    k, l = spec.k, spec.l
    p = k - 1
    x = cb.input(axis)
    use_left = l - i <= i + k
    terms = []
    for j in range(k + 1):
        c = (-1) ** j * math.comb(k, j) / math.factorial(p)
        shift = i + j
        if use_left:
            if shift >= l:
                continue
            arg = cb.lincomb([(float(l), x)], -float(shift))
        else:
            if shift <= 0:
                continue
            arg = cb.lincomb([(-float(l), x)], float(shift))
            c = -((-1) ** p) * c
        terms.append((c, _truncated_power_value(cb, arg, p)))
    return cb.lincomb(terms, nonneg=True)


def spline_clip(coeffs: SplineCoeffs, margin: float = 1.0) -> ClipSpec:
    """Cutoff whose identity region contains the spline's range."""
    return ClipSpec.standard(coeffs.sup_bound + margin)


def compile_spline_network(coeffs: SplineCoeffs, gadgets: Optional[GadgetCoefficients] = None,
                           clip: Optional[ClipSpec] = None) -> NetworkParams:
    """sigma_3 network equal to the tensor spline on [0, 1]^d.

    Each univariate basis function is a signed sum of truncated powers, the
    d-variate basis is a product tree over axes, and the spline is the
    output-layer combination with weights lambda_i.  If ``clip`` is given
    its scale must exceed max |lambda_i|, which bounds the spline sup-norm.
    """
    spec = coeffs.spec
    if not spec.compilable:
        raise ValueError(f"k - 1 = {spec.k - 1} is not a multiple of 3")
    if clip is not None and clip.scale <= coeffs.sup_bound:
        raise ValueError(f"clip scale {clip.scale} does not exceed the spline bound {coeffs.sup_bound}")
    cb = CircuitBuilder(spec.d, gadgets)
    per_axis = [[_basis_value(cb, spec, a, int(i)) for i in spec.indices] for a in range(spec.d)]
    terms = []
    for multi in np.ndindex(*coeffs.coefficients.shape):
        lam = float(coeffs.coefficients[multi])
        if lam == 0.0:
            continue
        basis = cb.product_tree([per_axis[a][m] for a, m in enumerate(multi)])
        terms.append((lam, basis))
    if not terms:
        return cb.to_params(cb.const(0.0))
    return cb.to_params(cb.lincomb(terms))


def deepen(params: NetworkParams, depth: int, gadgets: Optional[GadgetCoefficients] = None) -> NetworkParams:
    """Equivalent network with ``depth`` hidden layers.

    Hidden sigma_3 outputs are nonnegative, so each extra layer transports
    every last-layer neuron with the four-atom linear gadget.
    """
    L = params.arch.depth
    if depth < L:
        raise ValueError(f"cannot reduce depth {L} to {depth}")
    g = (gadgets or derive_gadgets()).linear
    d = params.arch.d
    layers = [(W.copy(), b.copy()) for W, b in params.layers()]
    W_out, b_out = layers.pop()
    n = W_out.shape[0]
    m = len(g.shifts)
    # R maps the current last layer onto the n original last-layer values
    R = np.eye(n)
    shift = np.zeros(n)
    for _ in range(depth - L):
        W_mid = np.repeat(R, m, axis=1)
        b_mid = np.repeat(shift, m) + np.tile(g.shifts, n)
        layers.append((W_mid, b_mid))
        R = np.zeros((n * m, n))
        for h in range(n):
            R[h * m : (h + 1) * m, h] = g.scale * g.weights
        shift = np.full(n, g.scale * g.bias)
    layers.append((R @ W_out, b_out + shift @ W_out))
    theta = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])
    widths = tuple(W.shape[1] for W, _ in layers[:-1])
    B = max(params.bound, float(np.abs(theta).max()))
    return NetworkParams(Architecture(d, widths, theta != 0.0), theta, B)


# ---------------------------------------------------------------------------
# size accounting


@dataclass(frozen=True)
class SizeReport:
    depth: int
    width: int
    sparsity: int
    n_params: int
    max_weight: float
    sparsity_ratio: float  # S / (d beta l^d)
    width_ratio: float  # W / (d beta l^d)
    weight_ratio: float  # max|theta| / l^d

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def size_report(net: NetworkParams, spec: SplineSpec, beta: float) -> SizeReport:
    scale = spec.d * beta * spec.l**spec.d
    max_w = float(np.abs(net.theta).max()) if net.theta.size else 0.0
    arch = net.arch
    return SizeReport(arch.depth, arch.width, arch.sparsity, arch.n_params, max_w,
                      arch.sparsity / scale, arch.width / scale, max_w / spec.l**spec.d)
