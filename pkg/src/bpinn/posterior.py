"""Data model, Gaussian likelihood and a trans-dimensional MH sampler.

The sampler mixes four moves over (W, gamma, B, theta):

* weight-walk: reflected Gaussian step on one active weight,
* mask-flip: birth/death of one coordinate, births drawn from the slab,
* width-move: W -> W +- 1, adding or removing inactive last neurons,
* bound-move: log-normal random walk on B.

Each is a Metropolis-Hastings kernel for the posterior, so the mixture is
too.  The network output used everywhere is ``clip o f_theta``.
"""

from __future__ import annotations

import bisect
import itertools
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Union

import numpy as np

from .compiler import compile_spline_network, deepen, derive_gadgets
from .jet import Jet2
from .network import (Architecture, ClipSpec, NetworkParams, forward_jet,
                      pad_to_width)
from .pde import EllipticProblem, LossConfig, apply_operator, quadrature_rule, residual_at
from .prior import (PriorConfig, activation_log_probs, log_prior_density, sample_prior)
from .spline import SplineCoeffs, SplineSpec, basis_jets, quasi_interpolant

MOVES = ("weight-walk", "mask-flip", "width-move", "bound-move")


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    f_obs: np.ndarray
    Y: np.ndarray
    g_obs: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(len(self.X), -1) if len(self.X) else np.asarray(self.X, float)
        Y = np.asarray(self.Y, dtype=float).reshape(len(self.Y), -1) if len(self.Y) else np.asarray(self.Y, float)
        if len(X) != len(self.f_obs) or len(Y) != len(self.g_obs):
            raise ValueError("observation counts do not match site counts")
        if len(X) != len(Y):
            raise ValueError(f"interior ({len(X)}) and boundary ({len(Y)}) sample sizes differ")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "f_obs", np.asarray(self.f_obs, dtype=float))
        object.__setattr__(self, "g_obs", np.asarray(self.g_obs, dtype=float))

    @property
    def n(self) -> int:
        return len(self.X)

    @classmethod
    def empty(cls, d: int) -> "Dataset":
        return cls(np.zeros((0, d)), np.zeros(0), np.zeros((0, d)), np.zeros(0))


def generate_dataset(problem: EllipticProblem, n: int, seed: int, noise_sd: float = 1.0) -> Dataset:
    """n uniform interior and n uniform boundary sites with Gaussian noise."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    dom = problem.domain
    X = dom.sample_interior(n, rng)
    Y = dom.sample_boundary(n, rng)
    f_obs = problem.f(X) + noise_sd * rng.standard_normal(n)
    g_obs = problem.g(Y) + noise_sd * rng.standard_normal(n)
    return Dataset(X, f_obs, Y, g_obs, seed)


def default_clip(problem: EllipticProblem) -> ClipSpec:
    """Cutoff that is the identity on [-K-1, K+1]."""
    return ClipSpec.standard(problem.K + 1.0)


# ---------------------------------------------------------------------------
# likelihood


def residuals(params: NetworkParams, dataset: Dataset, problem: EllipticProblem,
              clip: ClipSpec) -> tuple[np.ndarray, np.ndarray]:
    """(f_i - L u(X_i), g_j - u(Y_j)) for u = clip o f_theta."""
    if dataset.n == 0:
        return np.zeros(0), np.zeros(0)
    u_int = forward_jet(params, clip, dataset.X)
    u_bdy = forward_jet(params, clip, dataset.Y)
    r1 = dataset.f_obs - apply_operator(problem, u_int, dataset.X)
    r2 = dataset.g_obs - u_bdy.value
    return r1, r2


def log_likelihood(params: NetworkParams, dataset: Dataset, problem: EllipticProblem,
                   clip: Optional[ClipSpec] = None) -> float:
    """-1/2 sum (f_i - L u(X_i))^2 - 1/2 sum (g_j - u(Y_j))^2, constants dropped."""
    r1, r2 = residuals(params, dataset, problem, clip or default_clip(problem))
    return -0.5 * float(r1 @ r1 + r2 @ r2)


# ---------------------------------------------------------------------------
# sampler


@dataclass(frozen=True)
class McmcConfig:
    """Sampler settings.

    ``slab_atoms`` (fractions of B) replaces uniform births by a uniform
    draw from a finite set and ``flip_indices`` restricts mask flips to
    given coordinates; both exist so the kernel can be enumerated exactly.
    """

    move_probs: tuple = (0.7, 0.15, 0.05, 0.1)
    step: float = 0.05
    bound_step: float = 0.1
    iterations: int = 2000
    burn_in: int = 500
    thin: int = 1
    chains: int = 1
    seed: int = 0
    adapt: bool = True
    target_accept: float = 0.3
    M_grid: tuple = (0.5, 1.0, 2.0, 4.0, 8.0)
    eval_grid: Optional[int] = None
    debug: bool = False
    recompute_every: int = 1000
    slab_atoms: Optional[tuple] = None
    flip_indices: Optional[tuple] = None

    def __post_init__(self):
        p = np.asarray(self.move_probs, dtype=float)
        if p.shape != (4,) or np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"move probabilities must be 4 nonnegative numbers summing to 1, got {self.move_probs}")
        if self.step < 0 or self.bound_step < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.iterations < 0 or self.burn_in < 0 or self.thin < 1 or self.chains < 1:
            raise ValueError("invalid iteration/burn-in/thinning/chain counts")
        if self.slab_atoms is not None and any(abs(a) > 1 for a in self.slab_atoms):
            raise ValueError("slab atoms are fractions of B and must lie in [-1, 1]")

    @cached_property
    def cumulative_probs(self) -> tuple:
        return tuple(itertools.accumulate(self.move_probs))


@dataclass(frozen=True)
class ChainState:
    """Current parameters plus residuals at the data sites and cached log terms."""

    params: NetworkParams
    r_int: np.ndarray = field(repr=False)
    r_bdy: np.ndarray = field(repr=False)
    log_lik: float
    log_prior: float

    @classmethod
    def create(cls, params, prior_cfg, dataset, problem, clip) -> "ChainState":
        r1, r2 = residuals(params, dataset, problem, clip)
        return cls(params, r1, r2, -0.5 * float(r1 @ r1 + r2 @ r2), log_prior_density(prior_cfg, params))

    def verify(self, prior_cfg, dataset, problem, clip, tol: float = 1e-9) -> None:
        fresh = ChainState.create(self.params, prior_cfg, dataset, problem, clip)
        scale = max(1.0, abs(fresh.log_lik))
        if abs(fresh.log_lik - self.log_lik) > tol * scale:
            raise RuntimeError(f"cached log-likelihood {self.log_lik} != recomputed {fresh.log_lik}")
        if abs(fresh.log_prior - self.log_prior) > tol * max(1.0, abs(fresh.log_prior)):
            raise RuntimeError(f"cached log-prior {self.log_prior} != recomputed {fresh.log_prior}")


def reflect(x: float, B: float) -> float:
    """Fold x into [-B, B] by reflection at the endpoints."""
    y = (x + B) % (4 * B)
    if y > 2 * B:
        y = 4 * B - y
    return y - B


def resize_width(params: NetworkParams, width: int) -> Optional[NetworkParams]:
    """Uniform network with every hidden layer resized to ``width``.

    Growing appends inactive neurons.  Shrinking drops the last neurons and
    returns None unless every parameter touching them is inactive.
    """
    arch = params.arch
    old = arch.width
    if width < 1:
        return None
    if width < old:
        for layer in range(arch.depth):
            for neuron in range(width, old):
                if arch.gamma[arch.neuron_param_indices(layer, neuron)].any():
                    return None
    widths = (width,) * arch.depth
    sizes_new = [arch.d, *widths, 1]
    theta_parts, gamma_parts = [], []
    for (w_sl, shape, b_sl), n_in, n_out in zip(arch.layer_slices, sizes_new[:-1], sizes_new[1:]):
        r, c = min(shape[0], n_in), min(shape[1], n_out)
        for src, dst in ((params.theta, theta_parts), (arch.gamma, gamma_parts)):
            Wm = np.zeros((n_in, n_out), dtype=src.dtype)
            Wm[:r, :c] = src[w_sl].reshape(shape)[:r, :c]
            bv = np.zeros(n_out, dtype=src.dtype)
            bv[:c] = src[b_sl][:c]
            dst.extend([Wm.ravel(), bv])
    gamma = np.concatenate(gamma_parts)
    return NetworkParams(Architecture(arch.d, widths, gamma), np.concatenate(theta_parts), params.bound)


@dataclass
class MoveStats:
    proposed: dict = field(default_factory=lambda: {m: 0 for m in MOVES})
    accepted: dict = field(default_factory=lambda: {m: 0 for m in MOVES})

    def rates(self) -> dict:
        return {m: (self.accepted[m] / self.proposed[m] if self.proposed[m] else float("nan")) for m in MOVES}


def _propose(state: ChainState, move: str, cfg: McmcConfig, prior_cfg: PriorConfig,
             rng: np.random.Generator, step: float):
    """Return (new params, log prior+proposal ratio, likelihood unchanged?) or None."""
    params = state.params
    arch, theta, B = params.arch, params.theta, params.bound
    if move == "weight-walk":
        active = np.flatnonzero(arch.gamma)
        if active.size == 0:
            return None
        i = active[rng.integers(active.size)]
        new = theta.copy()
        new[i] = reflect(theta[i] + step * B * rng.standard_normal(), B)
        return NetworkParams(arch, new, B), 0.0, False
    if move == "mask-flip":
        pool = cfg.flip_indices if cfg.flip_indices is not None else None
        i = int(pool[rng.integers(len(pool))]) if pool is not None else int(rng.integers(arch.n_params))
        log_p, log_q = activation_log_probs(arch.n_params, prior_cfg.lambda_S)
        gamma, new = arch.gamma.copy(), theta.copy()
        if gamma[i]:
            gamma[i], new[i] = False, 0.0
            log_ratio = log_q - log_p
        else:
            gamma[i] = True
            if cfg.slab_atoms is not None:
                new[i] = B * cfg.slab_atoms[rng.integers(len(cfg.slab_atoms))]
            else:
                new[i] = rng.uniform(-B, B)
            # slab density 1/(2B) and birth proposal density cancel
            log_ratio = log_p - log_q
        return NetworkParams(Architecture(arch.d, arch.widths, gamma), new, B), log_ratio, False
    if move == "width-move":
        target = arch.width + (1 if rng.random() < 0.5 else -1)
        new_params = resize_width(params, target)
        if new_params is None:
            return None
        return new_params, log_prior_density(prior_cfg, new_params) - state.log_prior, True
    if move == "bound-move":
        B_new = B * math.exp(cfg.bound_step * rng.standard_normal())
        if theta.size and B_new < np.abs(theta).max():
            return None
        new_params = NetworkParams(arch, theta, B_new)
        # log-normal proposal: q(B | B') / q(B' | B) = B' / B
        log_ratio = log_prior_density(prior_cfg, new_params) - state.log_prior + math.log(B_new / B)
        return new_params, log_ratio, True
    raise ValueError(f"unknown move {move!r}")


def mcmc_step(state: ChainState, cfg: McmcConfig, prior_cfg: PriorConfig, dataset: Dataset,
              problem: EllipticProblem, rng: np.random.Generator, clip: Optional[ClipSpec] = None,
              stats: Optional[MoveStats] = None, step: Optional[float] = None) -> ChainState:
    """One MH transition; returns the (possibly unchanged) state."""
    clip = clip or default_clip(problem)
    move = MOVES[min(bisect.bisect_right(cfg.cumulative_probs, rng.random()), 3)]
    if stats is not None:
        stats.proposed[move] += 1
    proposal = _propose(state, move, cfg, prior_cfg, rng, cfg.step if step is None else step)
    if proposal is None:
        return state
    new_params, log_ratio, same_lik = proposal
    if same_lik:
        r1, r2, log_lik = state.r_int, state.r_bdy, state.log_lik
    else:
        r1, r2 = residuals(new_params, dataset, problem, clip)
        log_lik = -0.5 * float(r1 @ r1 + r2 @ r2)
    log_alpha = log_lik - state.log_lik + log_ratio
    if not math.log(max(rng.random(), 1e-300)) < log_alpha:
        return state
    if stats is not None:
        stats.accepted[move] += 1
    new_state = ChainState(new_params, r1, r2, log_lik, log_prior_density(prior_cfg, new_params))
    if cfg.debug:
        new_state.verify(prior_cfg, dataset, problem, clip)
    return new_state


# ---------------------------------------------------------------------------
# initial states


def contraction_rate(n: int, d: int, beta: float) -> float:
    """n^{-(beta-2)/(d+2(beta-2))} sqrt(log n); n below 2 is treated as 2."""
    n = max(int(n), 2)
    return n ** (-(beta - 2) / (d + 2 * (beta - 2))) * math.sqrt(math.log(n))


def least_squares_spline(dataset: Dataset, problem: EllipticProblem, spec: SplineSpec,
                         ridge: float = 1e-10) -> SplineCoeffs:
    """Spline coefficients maximizing the Gaussian likelihood (tiny ridge)."""
    if dataset.n == 0:
        raise ValueError("least-squares initialization needs data")
    J = basis_jets(spec, dataset.X)
    A, divA, V = problem.A(dataset.X), problem.divA(dataset.X), problem.V(dataset.X)
    rows_int = (-np.einsum("nji,nfij->nf", A, J.hess) - np.einsum("ni,nfi->nf", divA, J.grad)
                + V[:, None] * J.value)
    rows_bdy = basis_jets(spec, dataset.Y).value
    M = np.vstack([rows_int, rows_bdy])
    y = np.concatenate([dataset.f_obs, dataset.g_obs])
    nf = M.shape[1]
    scale = np.linalg.norm(M, axis=0).max()
    M_aug = np.vstack([M, math.sqrt(ridge) * scale * np.eye(nf)])
    y_aug = np.concatenate([y, np.zeros(nf)])
    coef, *_ = np.linalg.lstsq(M_aug, y_aug, rcond=None)
    return SplineCoeffs(spec, coef.reshape((spec.n_basis,) * spec.d))


def spline_level(n: int, d: int, beta: float, c_l: float = 3.0) -> int:
    return max(1, math.ceil(c_l * n ** (1.0 / (d + 2 * (beta - 2)))))


def network_for_prior(net: NetworkParams, prior_cfg: PriorConfig) -> NetworkParams:
    """Deepen and pad a compiled network to the prior's uniform architecture."""
    if net.arch.depth > prior_cfg.depth:
        raise ValueError(f"compiled depth {net.arch.depth} exceeds prior depth {prior_cfg.depth}")
    if net.arch.depth < prior_cfg.depth:
        net = deepen(net, prior_cfg.depth)
    return pad_to_width(net, net.arch.width)


def initial_params(init, prior_cfg: PriorConfig, dataset: Dataset, problem: EllipticProblem,
                   rng: np.random.Generator, k: int = 4, c_l: float = 3.0) -> NetworkParams:
    if isinstance(init, NetworkParams):
        return init
    if init == "prior":
        return sample_prior(prior_cfg, problem.d, rng)
    l = spline_level(max(dataset.n, 2), problem.d, problem.beta, c_l)
    if init == "least-squares":
        # keep at least 8 observations per coefficient
        cap = math.floor((dataset.n / 4) ** (1.0 / problem.d)) - (k - 1)
        l = max(1, min(l, cap))
    spec = SplineSpec(k, l, problem.d)
    if init == "least-squares":
        coeffs = least_squares_spline(dataset, problem, spec)
    elif init == "oracle":
        if problem.u_star is None:
            raise ValueError("oracle initialization needs u_star")
        coeffs = quasi_interpolant(lambda X: problem.u_star(X).value, spec)
    else:
        raise ValueError(f"unknown init {init!r}")
    return network_for_prior(compile_spline_network(coeffs, derive_gadgets()), prior_cfg)


# ---------------------------------------------------------------------------
# summaries


def evaluation_grid(d: int, size: Optional[int] = None) -> np.ndarray:
    if d == 1:
        m = size or 512
        return ((np.arange(m) + 0.5) / m)[:, None]
    m = size or {2: 64}.get(d, 16)
    g = (np.arange(m) + 0.5) / m
    return np.stack([a.ravel() for a in np.meshgrid(*([g] * d), indexing="ij")], axis=1)


@dataclass
class PosteriorSummary:
    n: int
    epsilon_n: float
    grid: np.ndarray = field(repr=False)
    mean_values: np.ndarray = field(repr=False)
    mean_loss: float = float("nan")
    sample_losses: np.ndarray = field(default=None, repr=False)
    quantiles: dict = field(default_factory=dict)
    M_grid: tuple = ()
    mass_outside: tuple = ()
    acceptance: dict = field(default_factory=dict)
    sieve_violation: Optional[float] = None
    samples: list = field(default_factory=list, repr=False)
    runtime_s: float = 0.0

    @property
    def median_loss(self) -> float:
        return float(np.median(self.sample_losses))

    def to_dict(self, include_grid: bool = True) -> dict:
        out = {
            "n": self.n,
            "epsilon_n": self.epsilon_n,
            "mean_loss": self.mean_loss,
            "median_sample_loss": self.median_loss,
            "quantiles": {str(k): v for k, v in self.quantiles.items()},
            "M_grid": list(self.M_grid),
            "mass_outside": list(self.mass_outside),
            "acceptance": self.acceptance,
            "sieve_violation": self.sieve_violation,
            "n_retained": int(len(self.sample_losses)),
            "runtime_s": self.runtime_s,
        }
        if include_grid:
            out["grid"] = self.grid.tolist()
            out["mean_values"] = self.mean_values.tolist()
        return out


class _Accumulator:
    """Running sums of jets at the quadrature nodes and values on the grid."""

    def __init__(self, rule, grid, d):
        self.rule, self.grid = rule, grid
        nq, nb = len(rule.interior_nodes), len(rule.boundary_nodes)
        self.v = np.zeros(nq)
        self.g = np.zeros((nq, d))
        self.h = np.zeros((nq, d, d))
        self.b = np.zeros(nb)
        self.grid_sum = np.zeros(len(grid))
        self.count = 0

    def add(self, params, clip, problem, lam):
        rule = self.rule
        ji = forward_jet(params, clip, rule.interior_nodes)
        jb = forward_jet(params, clip, rule.boundary_nodes)
        self.v += ji.value
        self.g += ji.grad
        self.h += ji.hess
        self.b += jb.value
        self.grid_sum += forward_jet(params, clip, self.grid).value
        self.count += 1
        r1 = residual_at(problem, ji, rule.interior_nodes)
        r2 = jb.value - problem.g(rule.boundary_nodes)
        return float(rule.interior_weights @ r1**2 + lam * rule.boundary_weights @ r2**2)

    def mean_loss(self, problem, lam) -> float:
        c = self.count
        rule = self.rule
        jet = Jet2(self.v / c, self.g / c, self.h / c)
        r1 = residual_at(problem, jet, rule.interior_nodes)
        r2 = self.b / c - problem.g(rule.boundary_nodes)
        return float(rule.interior_weights @ r1**2 + lam * rule.boundary_weights @ r2**2)


def run_chain(cfg: McmcConfig, prior_cfg: PriorConfig, dataset: Dataset, problem: EllipticProblem,
              loss_cfg: LossConfig = LossConfig(), init: Union[str, NetworkParams] = "least-squares",
              clip: Optional[ClipSpec] = None, sieve=None, record_samples: bool = True) -> PosteriorSummary:
    """Run ``cfg.chains`` chains and summarize the retained draws.

    Iteration 0 is the initial state; states at iterations burn_in,
    burn_in + thin, ... <= iterations are retained.  ``sieve`` may be any
    object with ``bounds(n, d, beta) -> (W_n, S_n, B_n)``.
    """
    t0 = time.perf_counter()
    clip = clip or default_clip(problem)
    d = problem.d
    rule = quadrature_rule(d, loss_cfg)
    grid = evaluation_grid(d, cfg.eval_grid)
    acc = _Accumulator(rule, grid, d)
    stats = MoveStats()
    losses, rows, sizes = [], [], []
    if cfg.burn_in > cfg.iterations:
        raise ValueError("burn-in exceeds the number of iterations: no retained samples")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.chains)
    for chain, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        params = initial_params(init, prior_cfg, dataset, problem, rng)
        state = ChainState.create(params, prior_cfg, dataset, problem, clip)
        step = cfg.step
        window_prop = window_acc = 0
        for it in range(cfg.iterations + 1):
            if it > 0:
                before = stats.accepted["weight-walk"], stats.proposed["weight-walk"]
                state = mcmc_step(state, cfg, prior_cfg, dataset, problem, rng, clip, stats, step)
                window_acc += stats.accepted["weight-walk"] - before[0]
                window_prop += stats.proposed["weight-walk"] - before[1]
                if cfg.adapt and it <= cfg.burn_in and window_prop >= 50:
                    step *= math.exp(window_acc / window_prop - cfg.target_accept)
                    step = min(max(step, 1e-6), 1.0)
                    window_prop = window_acc = 0
                if cfg.recompute_every and it % cfg.recompute_every == 0:
                    state.verify(prior_cfg, dataset, problem, clip)
            if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
                loss = acc.add(state.params, clip, problem, loss_cfg.lam)
                losses.append(loss)
                a = state.params.arch
                sizes.append((a.width, a.sparsity, state.params.bound))
                if record_samples:
                    rows.append({"chain": chain, "iter": it, "W": a.width, "S": a.sparsity,
                                 "B": state.params.bound, "loglik": state.log_lik, "pop_loss": loss})
    losses = np.asarray(losses)
    eps = contraction_rate(dataset.n, d, problem.beta)
    M_grid = tuple(float(m) for m in cfg.M_grid)
    mass = tuple(float(np.mean(losses > (m * eps) ** 2)) for m in M_grid)
    q_levels = (0.05, 0.25, 0.5, 0.75, 0.95)
    quantiles = dict(zip(q_levels, np.quantile(losses, q_levels).tolist()))
    violation = None
    if sieve is not None:
        Wn, Sn, Bn = sieve.bounds(max(dataset.n, 2), d, problem.beta)
        sz = np.asarray(sizes)
        violation = float(np.mean((sz[:, 0] > Wn) | (sz[:, 1] > Sn) | (sz[:, 2] > Bn)))
    acceptance = {m: {"proposed": stats.proposed[m], "accepted": stats.accepted[m],
                      "rate": stats.rates()[m]} for m in MOVES}
    return PosteriorSummary(
        n=dataset.n, epsilon_n=eps, grid=grid, mean_values=acc.grid_sum / acc.count,
        mean_loss=acc.mean_loss(problem, loss_cfg.lam), sample_losses=losses, quantiles=quantiles,
        M_grid=M_grid, mass_outside=mass, acceptance=acceptance, sieve_violation=violation,
        samples=rows, runtime_s=time.perf_counter() - t0,
    )
