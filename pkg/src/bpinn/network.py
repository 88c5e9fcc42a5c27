"""Sparse sigma_3 networks, the C^2 cutoff, and parameter (de)serialization.

Parameter layout is layer-major.  For every affine map ``z -> z @ W + b`` the
weight matrix ``W`` (shape ``n_in x n_out``) is stored row-major, followed by
the bias ``b``.  The affine maps are: input -> hidden 1, hidden l -> hidden
l+1 for l < L, and hidden L -> scalar output.  The architecture mask indexes
the same flat layout.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np
from scipy import sparse

from .jet import Jet2, affine, coordinates, jet_sigma3


def count_params(d: int, widths) -> int:
    sizes = [d, *widths, 1]
    return sum((n_in + 1) * n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))


def uniform_param_count(d: int, width: int, depth: int) -> int:
    """T = dW + W + (L-1)(W^2 + W) + W + 1."""
    return d * width + width + (depth - 1) * (width * width + width) + width + 1


@dataclass(frozen=True)
class Architecture:
    d: int
    widths: tuple
    gamma: np.ndarray = field(repr=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if self.d < 1 or not widths or min(widths) < 1:
            raise ValueError(f"invalid architecture d={self.d}, widths={widths}")
        object.__setattr__(self, "widths", widths)
        gamma = np.asarray(self.gamma, dtype=bool)
        if gamma.shape != (count_params(self.d, widths),):
            raise ValueError(
                f"mask length {gamma.shape} does not match T={count_params(self.d, widths)}"
            )
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def uniform(cls, d: int, width: int, depth: int, gamma=None) -> "Architecture":
        widths = (width,) * depth
        if gamma is None:
            gamma = np.ones(count_params(d, widths), dtype=bool)
        return cls(d, widths, gamma)

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def width(self) -> int:
        return max(self.widths)

    @property
    def is_uniform(self) -> bool:
        return len(set(self.widths)) == 1

    @property
    def n_params(self) -> int:
        return self.gamma.shape[0]

    @property
    def sparsity(self) -> int:
        return int(self.gamma.sum())

    @cached_property
    def layer_slices(self) -> list:
        """Per affine map: (weight slice, weight shape, bias slice)."""
        sizes = [self.d, *self.widths, 1]
        out, pos = [], 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            w_sl = slice(pos, pos + n_in * n_out)
            pos += n_in * n_out
            b_sl = slice(pos, pos + n_out)
            pos += n_out
            out.append((w_sl, (n_in, n_out), b_sl))
        return out

    def neuron_param_indices(self, layer: int, neuron: int) -> np.ndarray:
        """Flat indices of every parameter touching hidden ``neuron`` of ``layer``
        (0-based hidden layer): incoming weights, bias and outgoing weights."""
        w_in, shape_in, b_in = self.layer_slices[layer]
        w_out, shape_out, _ = self.layer_slices[layer + 1]
        incoming = w_in.start + np.arange(shape_in[0]) * shape_in[1] + neuron
        outgoing = w_out.start + neuron * shape_out[1] + np.arange(shape_out[1])
        return np.concatenate([incoming, [b_in.start + neuron], outgoing])


@dataclass(frozen=True)
class NetworkParams:
    arch: Architecture
    theta: np.ndarray = field(repr=False)
    bound: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (self.arch.n_params,):
            raise ValueError(f"theta has length {theta.size}, expected {self.arch.n_params}")
        if not self.bound > 0:
            raise ValueError("weight bound B must be positive")
        if np.any(theta[~self.arch.gamma] != 0.0):
            raise ValueError("theta is nonzero off the architecture mask")
        if theta.size and np.max(np.abs(theta)) > self.bound:
            raise ValueError(f"max |theta| = {np.max(np.abs(theta))} exceeds B = {self.bound}")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_dense(cls, d: int, widths, theta, bound=None) -> "NetworkParams":
        """Build params whose mask is the support of ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if bound is None:
            bound = float(np.max(np.abs(theta))) if np.any(theta) else 1.0
        return cls(Architecture(d, tuple(widths), theta != 0.0), theta, float(bound))

    def layers(self):
        """Yield (W, b) per affine map as views into theta."""
        for w_sl, shape, b_sl in self.arch.layer_slices:
            yield self.theta[w_sl].reshape(shape), self.theta[b_sl]

    def to_dict(self) -> dict:
        bits = np.packbits(self.arch.gamma.astype(np.uint8))
        return {
            "L": self.arch.depth,
            "d": self.arch.d,
            "widths": list(self.arch.widths),
            "gamma": base64.b64encode(bits.tobytes()).decode("ascii"),
            "theta": self.theta.tolist(),
            "B": self.bound,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkParams":
        d, widths = int(doc["d"]), tuple(doc["widths"])
        if len(widths) != int(doc["L"]):
            raise ValueError("L does not match the number of hidden widths")
        T = count_params(d, widths)
        raw = np.frombuffer(base64.b64decode(doc["gamma"]), dtype=np.uint8)
        gamma = np.unpackbits(raw)[:T].astype(bool)
        return cls(Architecture(d, widths, gamma), np.array(doc["theta"], dtype=float), float(doc["B"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "NetworkParams":
        return cls.from_dict(json.loads(text))


def pad_to_width(params: NetworkParams, width: int) -> NetworkParams:
    """Embed every hidden layer into ``width`` neurons; new neurons are inactive."""
    arch = params.arch
    if width < arch.width:
        raise ValueError(f"cannot pad width {arch.width} down to {width}")
    new_widths = (width,) * arch.depth
    new_arch = Architecture(arch.d, new_widths, np.zeros(count_params(arch.d, new_widths), bool))
    theta = np.zeros(new_arch.n_params)
    gamma = np.zeros(new_arch.n_params, dtype=bool)
    for (w_old, b_old), (w_sl, shape, b_sl), (ow_sl, oshape, ob_sl) in zip(
        params.layers(), new_arch.layer_slices, arch.layer_slices
    ):
        w_new = np.zeros(shape)
        w_new[: oshape[0], : oshape[1]] = w_old
        g_new = np.zeros(shape, dtype=bool)
        g_new[: oshape[0], : oshape[1]] = params.arch.gamma[ow_sl].reshape(oshape)
        theta[w_sl] = w_new.ravel()
        gamma[w_sl] = g_new.ravel()
        theta[b_sl][: oshape[1]] = b_old
        gamma[b_sl.start : b_sl.start + oshape[1]] = params.arch.gamma[ob_sl]
    return NetworkParams(Architecture(arch.d, new_widths, gamma), theta, params.bound)


# ---------------------------------------------------------------------------
# C^2 cutoff built from eight sigma_3 atoms

_CLIP_KNOTS = (Fraction(-2), Fraction(-7, 4), Fraction(-3, 2), Fraction(-1))
_CLIP_WEIGHTS = (Fraction(14, 3), Fraction(-32, 3), Fraction(20, 3), Fraction(-2, 3))


@dataclass(frozen=True)
class ClipSpec:
    knots: tuple
    weights: tuple
    bias: float
    scale: float

    @classmethod
    def standard(cls, scale: float = 1.0) -> "ClipSpec":
        """Cutoff that is the identity on (-F, F) and equals +-2F beyond +-2F."""
        if not scale > 0:
            raise ValueError("clip scale F must be positive")
        knots = _CLIP_KNOTS + tuple(-t for t in reversed(_CLIP_KNOTS))
        weights = _CLIP_WEIGHTS + tuple(-a for a in reversed(_CLIP_WEIGHTS))
        return cls(tuple(float(t) for t in knots), tuple(float(a) for a in weights), -2.0, float(scale))

    def check(self, tol: float = 1e-12) -> None:
        """Raise unless the knot/weight symmetry and moment conditions hold."""
        t, a = np.array(self.knots), np.array(self.weights)
        if t.shape != (8,) or a.shape != (8,):
            raise ValueError("clip needs exactly eight knots and weights")
        if not (np.allclose(t[::-1], -t, atol=tol) and np.allclose(a[::-1], -a, atol=tol)):
            raise ValueError("clip knots/weights must be antisymmetric")
        moments = (a.sum(), (a * t).sum(), (a[:4] * t[:4] ** 2).sum() - 1.0 / 3.0)
        if max(abs(m) for m in moments) > tol:
            raise ValueError(f"clip moment conditions violated: {moments}")


def clip_eval(spec: ClipSpec, x: Jet2) -> Jet2:
    """F * phi(x / F) with phi(z) = b + sum_i a_i sigma_3(z - t_i)."""
    F = spec.scale
    t = np.asarray(spec.knots)
    a = np.asarray(spec.weights)
    value = x.value[..., None] / F - t
    d = x.dim
    z = Jet2(
        value,
        np.broadcast_to(x.grad[..., None, :] / F, value.shape + (d,)),
        np.broadcast_to(x.hess[..., None, :, :] / F, value.shape + (d, d)),
    )
    atoms = jet_sigma3(z)
    return Jet2(
        F * (spec.bias + atoms.value @ a),
        F * np.einsum("...kd,k->...d", atoms.grad, a),
        F * np.einsum("...kde,k->...de", atoms.hess, a),
    )


def _maybe_sparse(W: np.ndarray):
    """CSR copy of a large, mostly-zero weight matrix; ``W`` otherwise."""
    if W.size >= 4096 and np.count_nonzero(W) < 0.1 * W.size:
        return sparse.csr_matrix(W)
    return W


def forward_raw(params: NetworkParams, x) -> Jet2:
    """Jet of f_theta (no cutoff) at point(s) x of shape (d,) or (n, d)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.arch.d:
        raise ValueError(f"input dimension {x.shape[-1]} != network d={params.arch.d}")
    single = x.ndim == 1
    X = np.atleast_2d(x)
    layers = [(_maybe_sparse(W), b) for W, b in params.layers()]
    # bound the size of the widest hidden jet to about 32 MB
    widest = max([W.shape[1] for W, _ in layers] + [1])
    chunk = max(256, (1 << 22) // (widest * (1 + X.shape[1]) ** 2))
    parts = []
    for start in range(0, len(X), chunk):
        h = coordinates(X[start:start + chunk])
        for W, b in layers[:-1]:
            h = jet_sigma3(affine(h, W, b))
        W, b = layers[-1]
        parts.append(affine(h, W, b)[:, 0])
    if len(parts) == 1:
        out = parts[0]
    else:
        out = Jet2(*(np.concatenate(c) for c in zip(*((p.value, p.grad, p.hess) for p in parts))))
    return out[0] if single else out


def forward_jet(params: NetworkParams, clip: ClipSpec, x) -> Jet2:
    """Jet of clip o f_theta at point(s) x."""
    return clip_eval(clip, forward_raw(params, x))


def network_function(params: NetworkParams, clip: ClipSpec):
    """Callable ``X -> Jet2`` for use with the loss functions."""
    return lambda X: forward_jet(params, clip, X)


def parameter_lipschitz_estimate(arch: Architecture, B: float, d: int, c0: float = 1.0) -> float:
    """Envelope C0 * W^((3^L - 1)/2) * (B v d)^((5 * 3^L - 1)/2).

    Bounds the sup over the domain of the value/gradient/Hessian change of
    clip o f_theta per unit of ||theta_1 - theta_2||_inf.  The O(.) constant
    is ``c0``; the lemma-level form with 3^(L-1) is
    :func:`parameter_lipschitz_estimate_lemma`.
    """
    if not B > 0:
        raise ValueError("B must be positive")
    L, W = arch.depth, arch.width
    return c0 * float(W) ** ((3**L - 1) / 2) * float(max(B, d)) ** ((5 * 3**L - 1) / 2)


def parameter_lipschitz_estimate_lemma(arch: Architecture, B: float, d: int, c0: float = 1.0) -> float:
    if not B > 0:
        raise ValueError("B must be positive")
    L, W = arch.depth, arch.width
    return c0 * float(W) ** ((3 ** (L - 1) - 1) / 2) * float(max(B, d)) ** ((5 * 3 ** (L - 1) - 1) / 2)
