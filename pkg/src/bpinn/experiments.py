"""Rate studies, sieve diagnostics, the bump-packing demo and result files."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .jet import Jet2
from .pde import EllipticProblem, LossConfig, apply_operator, get_preset, quadrature_rule, tensor_gauss
from .posterior import McmcConfig, contraction_rate, generate_dataset, run_chain
from .prior import PriorConfig
from .spline import loglog_slope


def thread_count() -> int:
    """Worker count from BPINN_THREADS (default 1)."""
    raw = os.environ.get("BPINN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"BPINN_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# sieve


@dataclass(frozen=True)
class SieveSchedule:
    C_W: float = 1.0
    C_S: float = 1.0
    C_B: float = 1.0

    def __post_init__(self):
        if min(self.C_W, self.C_S, self.C_B) <= 0:
            raise ValueError("sieve constants must be positive")

    @staticmethod
    def exponent(d: int, beta: float) -> float:
        return d / (d + 2 * (beta - 2))

    def bounds(self, n: int, d: int, beta: float) -> tuple[float, float, float]:
        """(W_n, S_n, B_n)."""
        a = n ** self.exponent(d, beta)
        return self.C_W * a, self.C_S * a, self.C_B * a * math.log(n)

    @staticmethod
    def epsilon(n: int, d: int, beta: float) -> float:
        return contraction_rate(n, d, beta)


# ---------------------------------------------------------------------------
# rate study


def theoretical_slope(d: int, beta: float) -> float:
    """Exponent of eps_n^2 in n, ignoring the log factor."""
    return -2 * (beta - 2) / (d + 2 * (beta - 2))


def _cell_seed(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, n]).generate_state(1)[0])


def _run_cell(args) -> dict:
    preset, n, seed, mcmc_cfg, prior_cfg, loss_cfg, sieve, init = args
    problem = get_preset(preset)
    cell = _cell_seed(seed, n)
    try:
        dataset = generate_dataset(problem, n, cell)
        summary = run_chain(replace(mcmc_cfg, seed=cell), prior_cfg, dataset, problem, loss_cfg,
                            init=init, sieve=sieve, record_samples=False)
    except Exception as exc:  # keep the other cells; the row is flagged
        return {"n": n, "seed": seed, "failed": True, "error": repr(exc)}
    row = {
        "n": n,
        "seed": seed,
        "failed": False,
        "mean_loss": summary.mean_loss,
        "median_sample_loss": summary.median_loss,
        "epsilon_n": summary.epsilon_n,
        "sieve_violation": summary.sieve_violation,
        "runtime_s": summary.runtime_s,
    }
    for M, mass in zip(summary.M_grid, summary.mass_outside):
        row[f"mass_outside_M{M:g}"] = mass
    for move, acc in summary.acceptance.items():
        row[f"accept_{move}"] = acc["rate"]
    return row


@dataclass
class RateStudyResult:
    preset: str
    rows: list
    n_grid: tuple
    median_loss: dict
    slope: float
    theoretical: float

    @property
    def strictly_decreasing(self) -> bool:
        med = [self.median_loss[n] for n in self.n_grid]
        return all(b < a for a, b in zip(med, med[1:]))

    @property
    def endpoints_decreasing(self) -> bool:
        return self.median_loss[self.n_grid[-1]] < self.median_loss[self.n_grid[0]]

    @property
    def mass_monotone(self) -> bool:
        for row in self.rows:
            if row.get("failed"):
                continue
            masses = [v for k, v in row.items() if k.startswith("mass_outside_M")]
            if any(b > a for a, b in zip(masses, masses[1:])):
                return False
        return True


def rate_study(preset: str, n_grid: Sequence[int], seeds: Sequence[int], mcmc_cfg: McmcConfig,
               sieve: SieveSchedule = SieveSchedule(), prior_cfg: Optional[PriorConfig] = None,
               loss_cfg: Optional[LossConfig] = None, init="least-squares",
               workers: Optional[int] = None) -> RateStudyResult:
    """Posterior-mean loss across n and seeds, with a log-log slope fit.

    The default prior depth is 1, the depth of the compiled initial network
    in d = 1; ``loss_cfg`` defaults to composite Gauss with 64 panels since
    the residual of a cubic-spline network is only piecewise smooth.
    """
    n_grid = tuple(sorted(int(n) for n in n_grid))
    if len(n_grid) < 4 or n_grid[-1] < 16 * n_grid[0]:
        raise ValueError("the n grid needs at least 4 points spanning a factor of 16")
    prior_cfg = prior_cfg or PriorConfig(depth=1)
    loss_cfg = loss_cfg or LossConfig.for_dimension(get_preset(preset).d)
    cells = [(preset, n, s, mcmc_cfg, prior_cfg, loss_cfg, sieve, init) for n in n_grid for s in seeds]
    workers = workers or thread_count()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["n"], r["seed"]))
    median = {}
    for n in n_grid:
        ok = [r["mean_loss"] for r in rows if r["n"] == n and not r["failed"]]
        median[n] = float(np.median(ok)) if ok else float("nan")
    usable = [n for n in n_grid if np.isfinite(median[n])]
    slope = loglog_slope(usable, [median[n] for n in usable]) if len(usable) >= 2 else float("nan")
    problem = get_preset(preset)
    return RateStudyResult(preset, rows, n_grid, median, slope, theoretical_slope(problem.d, problem.beta))


# ---------------------------------------------------------------------------
# packing


def bump_1d(t: np.ndarray, order: int = 0) -> np.ndarray:
    """psi(t) = exp(1 - 1/(1 - t^2)) on |t| < 1, zero elsewhere, or a derivative."""
    t = np.asarray(t, dtype=float)
    inside = np.abs(t) < 1.0
    tt = np.where(inside, t, 0.0)
    s = 1.0 - tt * tt
    psi = np.exp(1.0 - 1.0 / s)
    if order == 0:
        out = psi
    elif order == 1:
        out = psi * (-2.0 * tt / s**2)
    elif order == 2:
        out = psi * (4.0 * tt**2 / s**4 - 2.0 / s**2 - 8.0 * tt**2 / s**3)
    else:
        raise ValueError("order must be 0, 1 or 2")
    return np.where(inside, out, 0.0)


def bump_jet(Y: np.ndarray, radius: float) -> Jet2:
    """Jet of g(y) = prod_i psi(y_i / r) at Y (n, d)."""
    Y = np.atleast_2d(Y) / radius
    n, d = Y.shape
    P = [bump_1d(Y, r) for r in range(3)]  # (n, d) each
    value = np.prod(P[0], axis=1)
    grad = np.empty((n, d))
    hess = np.empty((n, d, d))
    for i in range(d):
        for j in range(i, d):
            orders = np.zeros(d, int)
            orders[i] += 1
            orders[j] += 1
            hess[:, i, j] = hess[:, j, i] = np.prod(
                np.stack([P[orders[a]][:, a] for a in range(d)], axis=1), axis=1) / radius**2
        orders = np.zeros(d, int)
        orders[i] = 1
        grad[:, i] = np.prod(np.stack([P[orders[a]][:, a] for a in range(d)], axis=1), axis=1) / radius
    return Jet2(value, grad, hess)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(a != b))


def greedy_code(length: int, min_distance: int, max_codes: int = 32, seed: int = 0,
                exhaustive_limit: int = 16, attempts: int = 20000) -> np.ndarray:
    """Binary code with pairwise Hamming distance >= min_distance.

    The zero word and the first weight-``min_distance`` word come first, so
    the realized minimum distance equals ``min_distance``.  Further words
    are added greedily in lexicographic order (length <= exhaustive_limit)
    or from seeded random candidates.
    """
    if not 1 <= min_distance <= length:
        raise ValueError(f"infeasible code request: distance {min_distance}, length {length}")
    first = np.zeros(length, dtype=np.int8)
    second = first.copy()
    second[:min_distance] = 1
    code = [first, second]
    if length <= exhaustive_limit:
        ints = np.arange(2**length, dtype=np.int64)
        bits = ((ints[:, None] >> np.arange(length)[::-1]) & 1).astype(np.int8)
        candidates = iter(bits)
    else:
        rng = np.random.default_rng(seed)
        candidates = (rng.integers(0, 2, length, dtype=np.int8) for _ in range(attempts))
    for cand in candidates:
        if len(code) >= max_codes:
            break
        if all(hamming(cand, c) >= min_distance for c in code):
            code.append(cand.copy())
    out = np.array(code, dtype=np.int8)
    dists = [hamming(a, b) for a, b in itertools.combinations(out, 2)]
    assert min(dists) >= min_distance
    return out


@dataclass(frozen=True)
class PackingConfig:
    m: int = 2
    w: float = 0.5
    beta: float = 4.0
    x0: float = 0.5
    r: float = 0.25
    seed: int = 0
    max_codes: int = 32
    quad_order: int = 12

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise ValueError("amplitude w must lie in (0, 1)")
        if self.m < 1 or self.r <= 0:
            raise ValueError("invalid grid size or radius")


@dataclass
class Packing:
    cfg: PackingConfig
    problem: EllipticProblem
    codes: np.ndarray
    centers: np.ndarray  # (m^d, d)

    @property
    def amplitude(self) -> float:
        return self.cfg.w / self.cfg.m**self.cfg.beta

    @property
    def cell_half_width(self) -> float:
        return self.cfg.r / self.cfg.m

    def cell_jets(self, X: np.ndarray, cells=None) -> Jet2:
        """Jets of the cell bumps at X: batch shape (n, len(cells))."""
        X = np.atleast_2d(X)
        m, a = self.cfg.m, self.amplitude
        centers = self.centers if cells is None else self.centers[np.atleast_1d(cells)]
        Ydiff = m * (X[:, None, :] - centers[None, :, :])
        n, c, d = Ydiff.shape
        g = bump_jet(Ydiff.reshape(-1, d), self.cfg.r)
        return Jet2(a * g.value.reshape(n, c), a * m * g.grad.reshape(n, c, d),
                    a * m * m * g.hess.reshape(n, c, d, d))

    def function(self, index: int):
        """Callable X -> Jet2 for u_k."""
        tau = self.codes[index].astype(float)

        def u(X):
            J = self.cell_jets(X)
            return Jet2(J.value @ tau, np.einsum("ncd,c->nd", J.grad, tau),
                        np.einsum("ncde,c->nde", J.hess, tau))
        return u

    def residual(self, index: int, X) -> np.ndarray:
        """-div(A grad u_k) + V u_k at X."""
        X = np.atleast_2d(X)
        return apply_operator(self.problem, self.function(index)(X), X)


def build_packing(cfg: PackingConfig, problem: EllipticProblem) -> Packing:
    """Bump family u_k = sum_j tau_j^(k) (w / m^beta) g(m (x - x_j))."""
    d = problem.d
    N = cfg.m**d
    if N < 8:
        raise ValueError(f"need m^d >= 8, got {N}")
    if np.any(cfg.x0 - cfg.r <= 0) or np.any(cfg.x0 + cfg.r >= 1):
        raise ValueError("the packing cube must lie strictly inside the unit box")
    h = 2 * cfg.r / cfg.m
    axis = cfg.x0 - cfg.r + h * (np.arange(cfg.m) + 0.5)
    centers = np.stack([g.ravel() for g in np.meshgrid(*([axis] * d), indexing="ij")], axis=1)
    codes = greedy_code(N, math.ceil(N / 8), cfg.max_codes, cfg.seed)
    if len(codes) < 2:
        raise ValueError("code construction produced fewer than two codewords")
    return Packing(cfg, problem, codes, centers)


def _cell_quadrature(packing: Packing, j: int):
    d = packing.problem.d
    h = packing.cell_half_width
    nodes, weights = tensor_gauss(d, packing.cfg.quad_order)
    return packing.centers[j] - h + 2 * h * nodes, weights * (2 * h) ** d


def cell_energies(packing: Packing) -> np.ndarray:
    """I_j = ||L phi_j||^2_{L2}, integrated over the support cell of phi_j."""
    out = np.empty(len(packing.centers))
    for j in range(len(packing.centers)):
        X, wts = _cell_quadrature(packing, j)
        J = packing.cell_jets(X, j)[:, 0]
        out[j] = wts @ apply_operator(packing.problem, J, X) ** 2
    return out


def direct_interior_distance(packing: Packing, a: int, b: int) -> float:
    """||L(u_a - u_b)||^2 by composite Gauss over the packing cube."""
    cfg, d = packing.cfg, packing.problem.d
    nodes, wts = tensor_gauss(d, cfg.quad_order, panels=cfg.m)
    X = cfg.x0 - cfg.r + 2 * cfg.r * nodes
    w = wts * (2 * cfg.r) ** d
    ua, ub = packing.function(a)(X), packing.function(b)(X)
    diff = Jet2(ua.value - ub.value, ua.grad - ub.grad, ua.hess - ub.hess)
    return float(w @ apply_operator(packing.problem, diff, X) ** 2)


def boundary_values(packing: Packing, order: int = 8):
    """Cell-bump values at face-wise Gauss nodes: (values (nodes, cells), weights)."""
    rule = quadrature_rule(packing.problem.d, LossConfig(method="gauss", order=order))
    return packing.cell_jets(rule.boundary_nodes).value, rule.boundary_weights


def boundary_distance(packing: Packing, a: int, b: int, order: int = 8, cache=None) -> float:
    """||u_a - u_b||^2 on the box boundary by face-wise Gauss quadrature."""
    vals, wts = cache if cache is not None else boundary_values(packing, order)
    diff = vals @ (packing.codes[a] - packing.codes[b]).astype(float)
    return float(wts @ diff**2)


@dataclass
class PackingTable:
    rows: list
    min_separation_sq: float
    max_boundary_sq: float
    cell_energy: np.ndarray = field(repr=False)


def packing_separation_and_kl(packing: Packing, n1: int, n2: int) -> PackingTable:
    """Pairwise separations and KL divergences of the data distributions.

    With disjoint supports, ||L(u_a - u_b)||^2 = sum_j |tau_a,j - tau_b,j| I_j.
    """
    dom = packing.problem.domain
    I = cell_energies(packing)
    bvals = boundary_values(packing)
    codes = packing.codes
    rows = []
    for a, b in itertools.combinations_with_replacement(range(len(codes)), 2):
        diff = np.abs(codes[a] - codes[b]).astype(float)
        interior = float(math.fsum(diff * I))
        boundary = boundary_distance(packing, a, b, cache=bvals) if a != b else 0.0
        kl = n1 / (2 * dom.volume) * interior + n2 / (2 * dom.boundary_measure) * boundary
        rows.append({"a": a, "b": b, "hamming": int(diff.sum()), "interior_sq": interior,
                     "boundary_sq": boundary, "kl": kl})
    distinct = [r for r in rows if r["a"] != r["b"]]
    return PackingTable(rows, min(r["interior_sq"] for r in distinct),
                        max(abs(r["boundary_sq"]) for r in rows), I)


def packing_c2_norm(packing: Packing, n_grid: int = 24) -> float:
    """Grid estimate of max_k ||u_k||_{C^2} (max of sup |u|, |grad u|, |hess u|)."""
    d = packing.problem.d
    g = np.linspace(0.0, 1.0, n_grid)
    X = np.stack([m.ravel() for m in np.meshgrid(*([g] * d), indexing="ij")], axis=1)
    # the cell bumps peak at their centers, so include them
    X = np.vstack([X, packing.centers])
    J = packing.cell_jets(X)
    best = 0.0
    for k in range(len(packing.codes)):
        tau = packing.codes[k].astype(float)
        v = np.abs(J.value @ tau).max()
        gr = np.abs(np.einsum("ncd,c->nd", J.grad, tau)).max()
        he = np.abs(np.einsum("ncde,c->nde", J.hess, tau)).max()
        best = max(best, v, gr, he)
    return float(best)


# ---------------------------------------------------------------------------
# result files


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def git_revision(cwd: Optional[str] = None) -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=cwd or os.getcwd(),
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    if v is None:
        return ""
    return str(v)


def _parse(s: str):
    if s == "":
        return None
    if s in ("True", "False"):
        return s == "True"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def emit_results(table: Sequence[dict], path, fmt: str = "csv", seed: Optional[int] = None,
                 config=None, columns: Optional[Sequence[str]] = None) -> Path:
    """Write rows with a metadata header (git revision, seed, config hash)."""
    path = Path(path)
    meta = {"git_revision": git_revision(), "seed": seed, "config_hash": config_hash(config)}
    cols = list(columns) if columns is not None else (list(table[0].keys()) if table else [])
    try:
        if fmt == "csv":
            buf = io.StringIO()
            buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(cols)
            for row in table:
                writer.writerow([_fmt(row.get(c)) for c in cols])
            path.write_text(buf.getvalue())
        elif fmt == "json":
            doc = {"metadata": meta, "columns": cols,
                   "rows": [{c: row.get(c) for c in cols} for row in table]}
            path.write_text(json.dumps(doc, indent=2, default=_json_default))
        else:
            raise ValueError(f"unknown format {fmt!r}")
    except OSError as exc:
        raise OSError(f"could not write results to {path}: {exc}") from exc
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_results(path) -> tuple[dict, list]:
    """Inverse of :func:`emit_results` for CSV files."""
    text = Path(path).read_text().splitlines()
    meta = dict(item.split("=", 1) for item in text[0][2:].split())
    reader = csv.reader(text[1:])
    cols = next(reader, [])
    rows = [{c: _parse(v) for c, v in zip(cols, line)} for line in reader]
    return meta, rows
