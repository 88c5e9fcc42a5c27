"""Spike-and-slab prior over width, architecture mask, weight bound and weights.

    W ~ zero-truncated Poisson(lambda_W)
    gamma_i | W ~ Bernoulli(1 / (1 + T^lambda_S))   i.i.d., T = T(d, W, L)
    B ~ Exponential(lambda_B)
    theta_i | B, gamma_i = 1 ~ Uniform[-B, B],  theta_i = 0 when gamma_i = 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import Architecture, NetworkParams, uniform_param_count


@dataclass(frozen=True)
class PriorConfig:
    lambda_W: float = 1.0
    lambda_S: float = 2.0
    lambda_B: float = 1.0
    depth: int = 3

    def __post_init__(self):
        if min(self.lambda_W, self.lambda_S, self.lambda_B) <= 0:
            raise ValueError("prior rates must be strictly positive")
        if self.depth < 1:
            raise ValueError("depth must be at least 1")

    def n_params(self, d: int, width: int) -> int:
        return uniform_param_count(d, width, self.depth)


def width_pmf(cfg: PriorConfig, w: int) -> float:
    """lambda_W^w / ((e^lambda_W - 1) w!)."""
    if w < 1:
        raise ValueError(f"width must be at least 1, got {w}")
    return math.exp(log_width_pmf(cfg, w))


def log_width_pmf(cfg: PriorConfig, w: int) -> float:
    if w < 1:
        return -math.inf
    lam = cfg.lambda_W
    return w * math.log(lam) - math.log(math.expm1(lam)) - math.lgamma(w + 1)


def activation_log_probs(T: int, lambda_S: float) -> tuple[float, float]:
    """(log p, log(1 - p)) for p = 1 / (1 + T^lambda_S)."""
    a = lambda_S * math.log(T)
    return -float(np.logaddexp(0.0, a)), -float(np.logaddexp(0.0, -a))


def activation_prob(T: int, lambda_S: float) -> float:
    return math.exp(activation_log_probs(T, lambda_S)[0])


def sample_widths(cfg: PriorConfig, size: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-truncated Poisson draws by rejection of zeros."""
    out = rng.poisson(cfg.lambda_W, size=size)
    bad = out == 0
    while bad.any():
        out[bad] = rng.poisson(cfg.lambda_W, size=int(bad.sum()))
        bad = out == 0
    return out


def sample_prior(cfg: PriorConfig, d: int, rng: np.random.Generator) -> NetworkParams:
    W = int(sample_widths(cfg, 1, rng)[0])
    T = cfg.n_params(d, W)
    gamma = rng.random(T) < activation_prob(T, cfg.lambda_S)
    B = float(rng.exponential(1.0 / cfg.lambda_B))
    theta = np.zeros(T)
    theta[gamma] = rng.uniform(-B, B, size=int(gamma.sum()))
    return NetworkParams(Architecture.uniform(d, W, cfg.depth, gamma), theta, B)


def log_prior_density(cfg: PriorConfig, params: NetworkParams) -> float:
    """Joint log-density of (W, gamma, B, active theta).

    The reference measure is counting on (W, gamma), Lebesgue on B and on
    the S active weights.  Returns -inf for states outside the support.
    """
    arch = params.arch
    if not arch.is_uniform or arch.depth != cfg.depth:
        raise ValueError(
            f"prior expects {cfg.depth} hidden layers of equal width, got widths {arch.widths}"
        )
    theta, B = params.theta, params.bound
    if not B > 0 or np.any(np.abs(theta) > B) or np.any(theta[~arch.gamma] != 0.0):
        return -math.inf
    W, T, S = arch.width, arch.n_params, arch.sparsity
    log_p, log_q = activation_log_probs(T, cfg.lambda_S)
    return (
        log_width_pmf(cfg, W)
        + S * log_p
        + (T - S) * log_q
        + math.log(cfg.lambda_B)
        - cfg.lambda_B * B
        - S * math.log(2.0 * B)
    )
