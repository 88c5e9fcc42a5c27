"""Command line entry point: ``bpinn {sample,rate-study,compile-spline,packing-demo}``.

Every subcommand accepts ``--config FILE`` with a JSON document holding the
sections problem, prior, mcmc, sieve, packing and output.  Explicit flags
override values from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .compiler import compile_spline_network, derive_gadgets, size_report, spline_clip
from .experiments import (PackingConfig, SieveSchedule, build_packing, emit_results,
                          packing_c2_norm, packing_separation_and_kl, rate_study)
from .network import forward_jet
from .pde import PRESETS, LossConfig, get_preset
from .posterior import McmcConfig, generate_dataset, run_chain
from .prior import PriorConfig
from .spline import SplineSpec, quasi_interpolant, spline_eval

log = logging.getLogger("bpinn")

SECTIONS = ("problem", "prior", "mcmc", "sieve", "packing", "output")

# functions available to compile-spline, defined on [0, 1]^d
TARGETS = {
    "sin": lambda X: np.prod(np.sin(2 * np.pi * X), axis=1),
    "linear": lambda X: X.sum(axis=1),
    "product": lambda X: np.prod(X, axis=1),
    "quadratic": lambda X: (X**2).sum(axis=1),
}


def load_config(path) -> dict:
    if path is None:
        return {s: {} for s in SECTIONS}
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return {s: dict(doc.get(s, {})) for s in SECTIONS}


def _build(cls, section: dict, **overrides):
    names = {f.name for f in fields(cls)}
    bad = set(section) - names
    if bad:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(bad)}")
    kwargs = {**section, **{k: v for k, v in overrides.items() if v is not None}}
    for k, v in kwargs.items():
        if isinstance(v, list):
            kwargs[k] = tuple(v)
    return cls(**kwargs)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_sample(args, cfg) -> int:
    preset = args.preset or cfg["problem"].get("preset", "sin-1d")
    problem = get_preset(preset)
    n = args.n or cfg["problem"].get("n", 256)
    seed = args.seed if args.seed is not None else cfg["problem"].get("seed", 0)
    prior_cfg = _build(PriorConfig, cfg["prior"], depth=cfg["prior"].get("depth", 1 if problem.d == 1 else 2))
    mcmc_cfg = _build(McmcConfig, cfg["mcmc"], iterations=args.iterations, burn_in=args.burn_in,
                      chains=args.chains, thin=args.thin, seed=seed)
    dataset = generate_dataset(problem, n, seed)
    summary = run_chain(mcmc_cfg, prior_cfg, dataset, problem, LossConfig.for_dimension(problem.d),
                        init=args.init, sieve=_build(SieveSchedule, cfg["sieve"]))
    out = Path(args.out or cfg["output"].get("dir", "."))
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    config = {"preset": preset, "n": n, "prior": asdict(prior_cfg), "mcmc": asdict(mcmc_cfg)}
    emit_results(summary.samples, out / "samples.csv", seed=seed, config=config,
                 columns=["iter", "W", "S", "B", "loglik", "pop_loss"])
    print(f"posterior-mean loss {summary.mean_loss:.6g}; wrote {out / 'summary.json'}")
    return 0


def cmd_rate_study(args, cfg) -> int:
    preset = args.preset or cfg["problem"].get("preset", "sin-1d")
    n_grid = _ints(args.n_grid) if args.n_grid else cfg["problem"].get("n_grid", [256, 512, 1024, 2048, 4096])
    seeds = list(range(args.seeds if args.seeds is not None else cfg["problem"].get("seeds", 5)))
    mcmc_cfg = _build(McmcConfig, cfg["mcmc"], iterations=args.iterations, burn_in=args.burn_in,
                      thin=args.thin)
    prior_cfg = _build(PriorConfig, {"depth": 1, **cfg["prior"]})
    result = rate_study(preset, n_grid, seeds, mcmc_cfg, _build(SieveSchedule, cfg["sieve"]), prior_cfg)
    out = Path(args.out or cfg["output"].get("path", "rate_study.csv"))
    config = {"preset": preset, "n_grid": n_grid, "seeds": seeds, "mcmc": asdict(mcmc_cfg),
              "prior": asdict(prior_cfg)}
    emit_results(result.rows, out, seed=None, config=config)
    print(f"slope {result.slope:.3f} (theory {result.theoretical:.3f}); medians "
          + ", ".join(f"{n}: {v:.4g}" for n, v in result.median_loss.items()))
    return 0


def cmd_compile_spline(args, cfg) -> int:
    spec = SplineSpec(args.k, args.l, args.d)
    target = TARGETS[args.function]
    coeffs = quasi_interpolant(target, spec)
    gadgets = derive_gadgets()
    net = compile_spline_network(coeffs, gadgets)
    Path(args.out).write_text(net.to_json())
    print(f"compiled network: widths {net.arch.widths}, S = {net.arch.sparsity}; wrote {args.out}")
    if args.verify:
        rng = np.random.default_rng(0)
        X = rng.random((1000, args.d))
        ref = spline_eval(coeffs, X)
        got = forward_jet(net, spline_clip(coeffs), X)
        rep = size_report(net, spec, beta=float(args.k))
        doc = {
            "size": rep.as_dict(),
            "value_error": float(np.max(np.abs(got.value - ref.value) / (1 + np.abs(ref.value)))),
            "grad_error": float(np.max(np.abs(got.grad - ref.grad)) / max(1.0, np.abs(ref.grad).max())),
            "hess_error": float(np.max(np.abs(got.hess - ref.hess)) / max(1.0, np.abs(ref.hess).max())),
            "gadgets": {c.name: {"max_error": c.max_error, "passed": c.passed} for c in gadgets.checks},
        }
        report = Path(args.report or Path(args.out).with_suffix(".report.json"))
        report.write_text(json.dumps(doc, indent=2))
        print(f"value error {doc['value_error']:.2e}; wrote {report}")
    if args.errors_csv:
        from .spline import approximation_report
        from .jet import Jet2

        if args.d != 1 or args.function != "sin":
            raise SystemExit("--errors-csv is available for the 1-d sin target")

        def jet(X):
            x = X[:, 0]
            w = 2 * np.pi
            return Jet2(np.sin(w * x), (w * np.cos(w * x))[:, None], (-w * w * np.sin(w * x))[:, None, None])

        ls = [max(1, args.l // 2**j) for j in range(3, -1, -1)]
        rep = approximation_report(jet, args.k, sorted(set(ls)))
        emit_results(rep.rows(), args.errors_csv, config=vars(args))
    return 0


def cmd_packing_demo(args, cfg) -> int:
    preset = args.preset or cfg["problem"].get("preset", "sin-3d")
    problem = get_preset(preset)
    pack_section = {k: v for k, v in cfg["packing"].items() if k != "m_grid"}
    m_grid = _ints(args.m_grid) if args.m_grid else cfg["packing"].get("m_grid", [2, 3, 4])
    rows = []
    for m in m_grid:
        pcfg = _build(PackingConfig, pack_section, m=m, w=args.w)
        packing = build_packing(pcfg, problem)
        table = packing_separation_and_kl(packing, args.n1, args.n2)
        rows.append({"m": m, "codes": len(packing.codes), "min_separation_sq": table.min_separation_sq,
                     "max_boundary_sq": table.max_boundary_sq, "c2_norm": packing_c2_norm(packing),
                     "K": problem.K})
        if args.pairs_dir:
            Path(args.pairs_dir).mkdir(parents=True, exist_ok=True)
            emit_results(table.rows, Path(args.pairs_dir) / f"pairs_m{m}.csv", config=asdict(pcfg))
    out = Path(args.out or cfg["output"].get("path", "packing.csv"))
    emit_results(rows, out, config={"preset": preset, "m_grid": m_grid, "packing": pack_section})
    for r in rows:
        print(f"m={r['m']}: min separation^2 {r['min_separation_sq']:.4g}, boundary {r['max_boundary_sq']:.1g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpinn", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="sample the posterior for one dataset")
    s.add_argument("--preset", choices=PRESETS)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--thin", type=int)
    s.add_argument("--chains", type=int)
    s.add_argument("--init", default="least-squares", choices=("least-squares", "oracle", "prior"))
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("rate-study", help="posterior-mean loss across sample sizes")
    r.add_argument("--preset", choices=PRESETS)
    r.add_argument("--n-grid", help="comma separated sample sizes")
    r.add_argument("--seeds", type=int, help="number of seeds")
    r.add_argument("--iterations", type=int)
    r.add_argument("--burn-in", type=int)
    r.add_argument("--thin", type=int)
    r.add_argument("--out", help="CSV path")
    r.set_defaults(func=cmd_rate_study)

    c = sub.add_parser("compile-spline", help="compile a spline interpolant to a network")
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--l", type=int, default=4)
    c.add_argument("--d", type=int, default=1)
    c.add_argument("--function", choices=sorted(TARGETS), default="sin")
    c.add_argument("--out", default="network.json")
    c.add_argument("--verify", action="store_true", help="check exactness and write a size report")
    c.add_argument("--report", help="size report path (default: next to --out)")
    c.add_argument("--errors-csv", help="write the approximation error table")
    c.set_defaults(func=cmd_compile_spline)

    k = sub.add_parser("packing-demo", help="separation and KL table of the bump packing")
    k.add_argument("--preset", choices=PRESETS)
    k.add_argument("--m-grid", help="comma separated grid sizes")
    k.add_argument("--w", type=float)
    k.add_argument("--n1", type=int, default=1000)
    k.add_argument("--n2", type=int, default=1000)
    k.add_argument("--pairs-dir", help="also write per-pair tables here")
    k.add_argument("--out", help="CSV path")
    k.set_defaults(func=cmd_packing_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    cfg = load_config(args.config)
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
