"""Elliptic Dirichlet problems on the unit box and their PINN losses.

The operator is ``L u = -div(A grad u) + V u`` expanded as

    L u = -sum_ij A_ji d_ij u - sum_i (div A)_i d_i u + V u,
    (div A)_i = sum_j d_j A_ji.

Functions ``u`` are passed around as callables ``X -> Jet2`` with ``X`` of
shape (n, d) and the returned jet of batch shape (n,).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.legendre import leggauss

from .jet import Jet2


@dataclass(frozen=True)
class Domain:
    """The open unit box (0, 1)^d.

    For d = 1 the boundary {0, 1} carries counting measure, so |dOmega| = 2,
    which matches 2d for every d.
    """

    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be positive")

    @property
    def volume(self) -> float:
        return 1.0

    @property
    def boundary_measure(self) -> float:
        return 2.0 * self.d

    def sample_interior(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((n, self.d))

    def sample_boundary(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform over the 2d faces (each face has unit measure)."""
        faces = rng.integers(0, 2 * self.d, size=n)
        pts = rng.random((n, self.d))
        axis, side = faces // 2, (faces % 2).astype(float)
        pts[np.arange(n), axis] = side
        return pts

    def face_index(self, Y: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Face id 2*axis + side for boundary points (first matching face)."""
        Y = np.atleast_2d(Y)
        on_lo = np.abs(Y) <= tol
        on_hi = np.abs(Y - 1.0) <= tol
        hits = np.concatenate([on_lo[:, :, None], on_hi[:, :, None]], axis=2).reshape(len(Y), -1)
        if not hits.any(axis=1).all():
            raise ValueError("some points are not on the boundary")
        return hits.argmax(axis=1)


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    interior_nodes: np.ndarray
    interior_weights: np.ndarray
    boundary_nodes: np.ndarray
    boundary_weights: np.ndarray


@dataclass(frozen=True)
class LossConfig:
    """Boundary weight ``lam`` and the quadrature used for population losses.

    ``method`` is ``"gauss"`` (composite tensor Gauss-Legendre with ``order``
    nodes on each of ``panels`` sub-intervals per axis), ``"monte-carlo"``
    (``mc_points`` uniform nodes drawn with ``seed``), or ``"auto"``: Gauss
    for d <= 2, Monte Carlo for d >= 3.
    """

    lam: float = 1.0
    method: str = "auto"
    order: int = 32
    panels: int = 1
    mc_points: int = 100_000
    seed: int = 0

    @classmethod
    def for_dimension(cls, d: int, **overrides) -> "LossConfig":
        """Cheaper rule for repeated evaluation of network losses.

        Composite Gauss with order 8 on 64 panels in d = 1 and 8 panels in
        d = 2 (spline-compiled networks are only piecewise smooth), and
        20 000 Monte Carlo points in d >= 3.
        """
        if d == 1:
            base = dict(method="gauss", order=8, panels=64)
        elif d == 2:
            base = dict(method="gauss", order=8, panels=8)
        else:
            base = dict(method="monte-carlo", mc_points=20_000)
        return cls(**{**base, **overrides})

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("boundary weight lambda must be positive")
        if self.method not in ("auto", "gauss", "monte-carlo"):
            raise ValueError(f"unknown quadrature method {self.method!r}")


def gauss_legendre_01(order: int, panels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = leggauss(order)
    h = 1.0 / panels
    starts = np.arange(panels) * h
    nodes = (starts[:, None] + (x[None, :] + 1.0) * h / 2).ravel()
    weights = np.tile(w * h / 2, panels)
    return nodes, weights


def tensor_gauss(d: int, order: int, panels: int = 1) -> tuple[np.ndarray, np.ndarray]:
    x, w = gauss_legendre_01(order, panels)
    if d == 0:
        return np.zeros((1, 0)), np.ones(1)
    grids = np.meshgrid(*([x] * d), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.ones(1)
    for _ in range(d):
        weights = np.outer(weights, w).ravel()
    return nodes, weights


def _faces_from(face_nodes: np.ndarray, d: int) -> np.ndarray:
    """Lift (m, d-1) face coordinates onto all 2d faces -> (2d*m, d)."""
    out = []
    for axis in range(d):
        for side in (0.0, 1.0):
            pts = np.insert(face_nodes, axis, side, axis=1)
            out.append(pts)
    return np.concatenate(out, axis=0)


@lru_cache(maxsize=32)
def quadrature_rule(d: int, cfg: LossConfig) -> QuadratureRule:
    method = cfg.method
    if method == "auto":
        method = "gauss" if d <= 2 else "monte-carlo"
    if method == "gauss":
        nodes, weights = tensor_gauss(d, cfg.order, cfg.panels)
        if d == 1:
            b_nodes, b_weights = np.array([[0.0], [1.0]]), np.ones(2)
        else:
            f_nodes, f_weights = tensor_gauss(d - 1, cfg.order, cfg.panels)
            b_nodes = _faces_from(f_nodes, d)
            b_weights = np.tile(f_weights, 2 * d)
    else:
        rng = np.random.default_rng(cfg.seed)
        dom = Domain(d)
        nodes = dom.sample_interior(cfg.mc_points, rng)
        weights = np.full(cfg.mc_points, dom.volume / cfg.mc_points)
        b_nodes = dom.sample_boundary(cfg.mc_points, rng)
        b_weights = np.full(cfg.mc_points, dom.boundary_measure / cfg.mc_points)
    for arr in (nodes, weights, b_nodes, b_weights):
        arr.setflags(write=False)
    return QuadratureRule(nodes, weights, b_nodes, b_weights)


# ---------------------------------------------------------------------------
# problems

ArrayFn = Callable[[np.ndarray], np.ndarray]
JetFn = Callable[[np.ndarray], Jet2]


def _identity_matrix(d):
    return lambda X: np.broadcast_to(np.eye(d), (len(X), d, d))


def _zeros_vec(d):
    return lambda X: np.zeros((len(X), d))


def _const(c):
    return lambda X: np.full(len(X), float(c))


@dataclass(frozen=True)
class EllipticProblem:
    """-div(A grad u) + V u = f in (0,1)^d, u = g on the boundary."""

    domain: Domain
    A: ArrayFn
    divA: ArrayFn
    V: ArrayFn
    f: ArrayFn
    g: ArrayFn
    u_star: Optional[JetFn] = None
    beta: float = 4.0
    K: float = 1.0
    r_min: float = 1.0
    C_A: float = 1.0
    V_min: float = 1.0
    V_max: float = 1.0
    name: str = "custom"
    description: dict = field(default_factory=dict, compare=False)

    @property
    def d(self) -> int:
        return self.domain.d

    def validate(self, n_grid: int = 17, tol: float = 1e-10) -> None:
        """Check coefficient bounds and, when u_star is known, consistency."""
        X, _ = tensor_gauss(self.d, n_grid) if self.d <= 2 else (
            np.random.default_rng(0).random((4096, self.d)), None)
        A, divA, V = self.A(X), self.divA(X), self.V(X)
        if not np.allclose(A, np.swapaxes(A, 1, 2), atol=1e-12):
            raise ValueError("A must be symmetric")
        lam_min = np.linalg.eigvalsh(A).min()
        if lam_min < self.r_min - 1e-12:
            raise ValueError(f"ellipticity violated: min eigenvalue {lam_min} < r_min {self.r_min}")
        sup_A = max(np.abs(A).max(), np.abs(divA).max())
        if sup_A > self.C_A + 1e-12:
            raise ValueError(f"coefficient bound violated: {sup_A} > C_A {self.C_A}")
        if not self.V_min > 0:
            raise ValueError("V_min must be strictly positive")
        if V.min() < self.V_min - 1e-12 or V.max() > self.V_max + 1e-12:
            raise ValueError(f"V outside [{self.V_min}, {self.V_max}]")
        if self.u_star is not None:
            res = residual_at(self, self.u_star(X), X)
            if np.abs(res).max() > tol * max(1.0, np.abs(self.f(X)).max()):
                raise ValueError(f"u_star does not solve the PDE: max residual {np.abs(res).max()}")
            Y = quadrature_rule(self.d, LossConfig(order=5, method="gauss" if self.d <= 2 else "monte-carlo",
                                                   mc_points=512)).boundary_nodes
            gap = np.abs(self.u_star(Y).value - self.g(Y)).max()
            if gap > tol * max(1.0, np.abs(self.g(Y)).max()):
                raise ValueError(f"u_star does not match g on the boundary: {gap}")


def apply_operator(problem: EllipticProblem, u: Jet2, X) -> np.ndarray:
    """-div(A grad u) + V u at the points X, given the jet of u there."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if u.dim != problem.d or X.shape[1] != problem.d:
        raise ValueError(f"dimension mismatch: jet d={u.dim}, X {X.shape}, problem d={problem.d}")
    value, grad, hess = u.value, u.grad, u.hess
    scalar = value.ndim == 0
    if scalar:
        value, grad, hess = value[None], grad[None], hess[None]
    A, divA, V = problem.A(X), problem.divA(X), problem.V(X)
    out = -np.einsum("nji,nij->n", A, hess) - np.einsum("ni,ni->n", divA, grad) + V * value
    return out[0] if scalar else out


def residual_at(problem: EllipticProblem, u: Jet2, x) -> np.ndarray:
    """Pointwise PDE residual -div(A grad u) + V u - f."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    res = apply_operator(problem, u, X) - problem.f(X)
    return res[0] if u.value.ndim == 0 else res


def manufactured_problem(
    u_star: JetFn,
    A: ArrayFn,
    divA: ArrayFn,
    V: ArrayFn,
    domain: Domain,
    *,
    beta: float = 4.0,
    K: float = 1.0,
    r_min: float = 1.0,
    C_A: float = 1.0,
    V_min: float = 1.0,
    V_max: float = 1.0,
    name: str = "manufactured",
    description: Optional[dict] = None,
    validate: bool = True,
) -> EllipticProblem:
    """Problem whose data are f := L u_star and g := u_star on the boundary."""

    def f(X):
        X = np.atleast_2d(X)
        jet = u_star(X)
        A_, divA_, V_ = A(X), divA(X), V(X)
        return (-np.einsum("nji,nij->n", A_, jet.hess) - np.einsum("ni,ni->n", divA_, jet.grad)
                + V_ * jet.value)

    def g(Y):
        return u_star(np.atleast_2d(Y)).value

    problem = EllipticProblem(domain, A, divA, V, f, g, u_star, beta, K, r_min, C_A, V_min, V_max,
                              name, description or {})
    if validate:
        problem.validate()
    return problem


# ---------------------------------------------------------------------------
# losses


def _interior_residuals(u: JetFn, X, obs, problem) -> np.ndarray:
    return apply_operator(problem, u(X), X) - obs


def empirical_loss(u: JetFn, dataset, problem: EllipticProblem, cfg: LossConfig = LossConfig()) -> float:
    """(|Omega|/n) sum (L u(X_i) - f_i)^2 + lam (|dOmega|/n) sum (u(Y_j) - g_j)^2."""
    if len(dataset.X) == 0 or len(dataset.Y) == 0:
        raise ValueError("empirical loss needs interior and boundary observations")
    dom = problem.domain
    r1 = _interior_residuals(u, dataset.X, dataset.f_obs, problem)
    r2 = u(dataset.Y).value - dataset.g_obs
    return float(dom.volume * np.mean(r1**2) + cfg.lam * dom.boundary_measure * np.mean(r2**2))


def empirical_distances(u: JetFn, dataset, problem: EllipticProblem) -> tuple[float, float]:
    """Empirical norms of L(u - u*) at the X_i and of u - u* at the Y_j."""
    if len(dataset.X) == 0 or len(dataset.Y) == 0:
        raise ValueError("empirical distances need interior and boundary sites")
    dom = problem.domain
    r1 = _interior_residuals(u, dataset.X, problem.f(dataset.X), problem)
    r2 = u(dataset.Y).value - problem.g(dataset.Y)
    return (float(np.sqrt(dom.volume * np.mean(r1**2))),
            float(np.sqrt(dom.boundary_measure * np.mean(r2**2))))


def population_loss_terms(u: JetFn, problem: EllipticProblem, cfg: LossConfig = LossConfig()):
    """(interior L2^2 of the residual, boundary L2^2 of u - g)."""
    rule = quadrature_rule(problem.d, cfg)
    X, Y = rule.interior_nodes, rule.boundary_nodes
    r1 = residual_at(problem, u(X), X)
    r2 = u(Y).value - problem.g(Y)
    return float(rule.interior_weights @ r1**2), float(rule.boundary_weights @ r2**2)


def population_loss(u: JetFn, problem: EllipticProblem, cfg: LossConfig = LossConfig()) -> float:
    interior, boundary = population_loss_terms(u, problem, cfg)
    return interior + cfg.lam * boundary


# ---------------------------------------------------------------------------
# presets


def _sin_1d_star(X):
    x = np.atleast_2d(X)[:, 0]
    s, c = np.sin(np.pi * x), np.cos(np.pi * x)
    return Jet2(s, (np.pi * c)[:, None], (-np.pi**2 * s)[:, None, None])


def _quadratic_star(X):
    X = np.atleast_2d(X)
    n, d = X.shape
    return Jet2((X**2).sum(axis=1), 2 * X, np.broadcast_to(2 * np.eye(d), (n, d, d)).copy())


def _varcoef_A(X):
    x1, x2 = X[:, 0], X[:, 1]
    A = np.empty((len(X), 2, 2))
    A[:, 0, 0] = 1 + 0.5 * x1**2
    A[:, 1, 1] = 1 + 0.5 * x2**2
    A[:, 0, 1] = A[:, 1, 0] = 0.25 * x2
    return A


def _varcoef_divA(X):
    # (div A)_1 = d1 A11 + d2 A21 = x1 + 0.25 ; (div A)_2 = d1 A12 + d2 A22 = x2
    return np.stack([X[:, 0] + 0.25, X[:, 1]], axis=1)


def _varcoef_star(X):
    X = np.atleast_2d(X)
    x1, x2 = X[:, 0], X[:, 1]
    e, s, c = np.exp(0.5 * x1), np.sin(np.pi * x2), np.cos(np.pi * x2)
    value = e * s + x1 * x2
    grad = np.stack([0.5 * e * s + x2, np.pi * e * c + x1], axis=1)
    hess = np.empty((len(X), 2, 2))
    hess[:, 0, 0] = 0.25 * e * s
    hess[:, 1, 1] = -np.pi**2 * e * s
    hess[:, 0, 1] = hess[:, 1, 0] = 0.5 * np.pi * e * c + 1.0
    return Jet2(value, grad, hess)


def _sin_product_star(X):
    X = np.atleast_2d(X)
    n, d = X.shape
    s, c = np.sin(np.pi * X), np.cos(np.pi * X)
    value = np.prod(s, axis=1)
    grad = np.empty((n, d))
    hess = np.empty((n, d, d))
    for i in range(d):
        others = np.prod(np.delete(s, i, axis=1), axis=1)
        grad[:, i] = np.pi * c[:, i] * others
        for j in range(d):
            if i == j:
                hess[:, i, i] = -np.pi**2 * value
            else:
                rest = np.prod(np.delete(s, [i, j], axis=1), axis=1)
                hess[:, i, j] = np.pi**2 * c[:, i] * c[:, j] * rest
    return Jet2(value, grad, hess)


def _holder_bound_sin(freq: float, beta: float) -> float:
    # sum of sup |u^(j)| for j <= ceil(beta), a crude C^beta bound
    return float(sum(freq**j for j in range(int(np.ceil(beta)) + 1)))


PRESETS = ("sin-1d", "quadratic-2d", "variable-coeff-2d", "sin-3d")


def get_preset(name: str, **overrides) -> EllipticProblem:
    """Manufactured problems selectable by name."""
    if name == "sin-1d":
        problem = manufactured_problem(
            _sin_1d_star, _identity_matrix(1), _zeros_vec(1), _const(1.0), Domain(1),
            beta=4.0, K=_holder_bound_sin(np.pi, 4.0), name=name,
            description={"u_star": "sin(pi x)", "A": "1", "V": "1"},
        )
    elif name == "quadratic-2d":
        problem = manufactured_problem(
            _quadratic_star, _identity_matrix(2), _zeros_vec(2), _const(0.5), Domain(2),
            beta=4.0, K=8.0, V_min=0.5, V_max=0.5, name=name,
            description={"u_star": "x1^2 + x2^2", "A": "I", "V": "0.5"},
        )
    elif name == "variable-coeff-2d":
        problem = manufactured_problem(
            _varcoef_star, _varcoef_A, _varcoef_divA, lambda X: 1 + 0.5 * X[:, 0] * X[:, 1],
            Domain(2), beta=4.0, K=4 * np.e * _holder_bound_sin(np.pi, 4.0), r_min=0.75,
            C_A=1.5, V_min=1.0, V_max=1.5, name=name,
            description={"u_star": "exp(x1/2) sin(pi x2) + x1 x2",
                         "A": "[[1 + x1^2/2, x2/4], [x2/4, 1 + x2^2/2]]", "V": "1 + x1 x2 / 2"},
        )
    elif name == "sin-3d":
        problem = manufactured_problem(
            _sin_product_star, _identity_matrix(3), _zeros_vec(3), _const(1.0), Domain(3),
            beta=4.0, K=3 * _holder_bound_sin(np.pi, 4.0), name=name,
            description={"u_star": "prod_i sin(pi x_i)", "A": "I", "V": "1"},
        )
    else:
        raise KeyError(f"unknown preset {name!r}; choose from {PRESETS}")
    return replace(problem, **overrides) if overrides else problem
