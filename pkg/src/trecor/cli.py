"""Command-line front end.

Every subcommand reads an optional TOML/JSON config (``--config``); explicit
flags override config values.  Exit codes: 0 ok, 2 configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np
import pandas as pd

from . import __version__
from .errors import ConfigError, TrecorError

log = logging.getLogger("trecor")

HYPER_GRID = [  # (a_nu, a_omega, b_nu, b_omega)
    (5.0, 5.0, 0.5, 0.5),
    (5.0, 5.0, 1.0, 1.0),
    (10.0, 10.0, 0.5, 0.5),
    (10.0, 10.0, 1.0, 1.0),
]
RANK_GRID = (3, 4, 5)


# --------------------------------------------------------------------------
# config handling


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}", stage="config")
    if path.endswith(".json"):
        with open(path) as fh:
            return json.load(fh)
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"bad TOML in {path}: {e}", stage="config") from None


def _merge(section: dict, args: argparse.Namespace, keys) -> dict:
    out = dict(section)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _build(cls, values: dict, stage: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}", stage=stage)
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(str(e), stage=stage) from None


def fit_config(cfg: dict, args) -> "FitConfig":
    from .gibbs import FitConfig
    from .model import Hyper

    values = _merge(cfg.get("fit", {}), args, ("iterations", "burn_in", "thin", "rank", "seed", "n_chains",
                                               "mode", "pseudocount", "pg_b_exact"))
    hyper = _build(Hyper, dict(cfg.get("hyper", {})), "config")
    values["hyper"] = hyper
    return _build(FitConfig, values, "config")


def sim_config(cfg: dict, args) -> "SimConfig":
    from .simgen import SimConfig

    values = _merge(cfg.get("simulate", {}), args, ("n", "q", "d", "R_true", "sigma_structure", "seed",
                                                    "reference", "sparsity_threshold", "min_total"))
    return _build(SimConfig, values, "config")


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, tuple)):
        return list(o)
    raise TypeError(type(o))


# --------------------------------------------------------------------------
# data loading


def load_fit_inputs(args):
    """NodeCounts, Design, tree and (optional) truth from CLI arguments."""
    from .phylo import leaf_to_node_counts, load_node_counts, read_counts, read_newick
    from .simgen import load_design, load_truth

    truth = None
    if args.data:
        nodes = load_node_counts(os.path.join(args.data, "nodes"))
        tree = read_newick(os.path.join(args.data, "tree.nwk"))
        design = load_design(os.path.join(args.data, "design.csv"))
        tdir = args.truth or os.path.join(args.data, "truth")
        if os.path.isdir(tdir):
            truth = load_truth(tdir)
    else:
        if not (args.counts and args.tree and args.design):
            raise ConfigError("give --data DIR or all of --counts, --tree, --design", stage="load")
        tree = read_newick(args.tree, resolve_multifurcations=args.resolve_multifurcations)
        counts = read_counts(args.counts)
        nodes = leaf_to_node_counts(tree, counts)
        design = load_design(args.design)
        df = pd.read_csv(args.design, index_col=0)
        idx = {str(s): i for i, s in enumerate(df.index)}
        missing = [s for s in nodes.sample_ids if s not in idx]
        if missing:
            raise ConfigError(f"design lacks samples {missing[:5]}", stage="load")
        rows = [idx[s] for s in nodes.sample_ids]
        from .model import Design

        design = Design(design.X[rows], design.covariate_names)
        if args.truth:
            truth = load_truth(args.truth)
    if nodes.tree_hash and nodes.tree_hash != tree.topology_hash():
        raise ConfigError("node counts were built on a different tree", stage="load")
    return nodes, design, tree, truth


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg) -> int:
    from .simgen import gen_dataset, save_dataset

    sc = sim_config(cfg, args)
    ds = gen_dataset(sc)
    save_dataset(ds, args.out)
    man = {"config": asdict(sc), "config_hash": _hash_obj(asdict(sc)), "seed": sc.seed, "version": __version__,
           "zero_proportion": ds.zero_proportion(), "q": ds.tree.q, "n": ds.nodes.n}
    _write_json(os.path.join(args.out, "manifest.json"), man)
    print(f"wrote dataset (n={ds.nodes.n}, q={ds.tree.q}, zero proportion {ds.zero_proportion():.3f}) to {args.out}")
    return 0


def _fit_once(fc, nodes, design, phi_true, outdir):
    from .diagnostics import chain_diagnostics
    from .gibbs import run_chains

    chains = run_chains(fc, nodes, design, phi_true, outdir, progress=True)
    diag = chain_diagnostics(chains, fc.seed)
    from .selection import waic

    if sum(c.n_draws for c in chains) >= 2:
        waic_row = waic(chains).as_row()
    else:
        log.warning("fewer than 2 retained draws; WAIC not computed")
        waic_row = {"waic": float("nan"), "lppd": float("nan"), "p_waic": float("nan")}
    report = {"config_hash": fc.hash(), "seed": fc.seed, "version": __version__, "chains": len(chains),
              "draws_per_chain": [c.n_draws for c in chains], "waic": waic_row, "traces": diag,
              "seconds_per_iteration": [c.manifest["seconds_per_iteration"] for c in chains]}
    _write_json(os.path.join(outdir, "diagnostics.json"), report)
    return report


def cmd_fit(args, cfg) -> int:
    fc = fit_config(cfg, args)
    nodes, design, tree, truth = load_fit_inputs(args)
    phi_true = None
    if fc.mode == "oracle":
        if truth is None:
            raise ConfigError("mode 'oracle' requires a truth directory (--truth)", stage="fit")
        phi_true = truth["phi"]
    os.makedirs(args.out, exist_ok=True)
    if args.preset == "hyper-grid":
        for a_nu, a_om, b_nu, b_om in HYPER_GRID:
            h = replace(fc.hyper, a_nu=a_nu, a_omega=a_om, b_nu=b_nu, b_omega=b_om)
            sub = os.path.join(args.out, f"hyper_{a_nu:g}_{a_om:g}_{b_nu:g}_{b_om:g}")
            os.makedirs(sub, exist_ok=True)
            r = _fit_once(replace(fc, hyper=h), nodes, design, phi_true, sub)
            print(f"{sub}: waic {r['waic']['waic']:.2f}")
        return 0
    if args.preset == "rank-grid":
        for R in RANK_GRID:
            sub = os.path.join(args.out, f"rank_{R}")
            os.makedirs(sub, exist_ok=True)
            r = _fit_once(replace(fc, rank=R), nodes, design, phi_true, sub)
            print(f"{sub}: waic {r['waic']['waic']:.2f}")
        return 0
    r = _fit_once(fc, nodes, design, phi_true, args.out)
    worst = max((v["rhat"] for v in r["traces"].values() if np.isfinite(v["rhat"])), default=float("nan"))
    print(f"fit done: {r['chains']} chain(s), waic {r['waic']['waic']:.2f}, max split R-hat {worst:.3f}")
    return 0


def cmd_select_rank(args, cfg) -> int:
    from .selection import select_rank

    fc = fit_config(cfg, args)
    nodes, design, tree, truth = load_fit_inputs(args)
    phi_true = truth["phi"] if (fc.mode == "oracle" and truth) else None
    if fc.mode == "oracle" and phi_true is None:
        raise ConfigError("mode 'oracle' requires a truth directory (--truth)", stage="select-rank")
    ranks = [int(r) for r in args.ranks.split(",")]
    os.makedirs(args.out, exist_ok=True)
    res = select_rank(ranks, fc, nodes, design, phi_true, rule=args.rule, layer=args.waic_layer,
                      outdir=os.path.join(args.out, "fits") if args.keep_draws else None)
    df = pd.DataFrame(res.curve)
    df.to_csv(os.path.join(args.out, "waic.csv"), index=False)
    _write_json(os.path.join(args.out, "selection.json"),
                {"chosen": res.chosen, "rule": args.rule, "layer": args.waic_layer, "config_hash": fc.hash(),
                 "seed": fc.seed, "version": __version__})
    print(df.to_string(index=False))
    print(f"chosen R = {res.chosen}")
    return 0


def _load_chains(path: str):
    from .draws import PosteriorDraws

    if os.path.exists(os.path.join(path, "manifest.json")):
        return [PosteriorDraws.load(path)]
    subs = sorted(d for d in os.listdir(path) if d.startswith("chain_"))
    if not subs:
        raise ConfigError(f"no draws found under {path}", stage="load-draws")
    return [PosteriorDraws.load(os.path.join(path, s)) for s in subs]


def _parse_vec(text: str, d: int) -> np.ndarray:
    v = np.array([float(t) for t in text.split(",")])
    if v.size != d:
        raise ConfigError(f"covariate vector has {v.size} entries, design has {d}", stage="network")
    return v


def cmd_network(args, cfg) -> int:
    from .network import (baseline_covariates, degree_and_differential_set, differential_correlation_draws,
                          fdr_select, population_network, top_edges_overlay)
    from .phylo import dfs_labels, read_newick

    ncfg = cfg.get("network", {})
    rho = args.rho if args.rho is not None else ncfg.get("rho", 0.1)
    fdr = args.fdr if args.fdr is not None else ncfg.get("fdr", 0.05)
    chains = _load_chains(args.draws)
    tree = read_newick(args.tree)
    d = chains[0].dims["d"]
    if tree.q != chains[0].dims["q"]:
        raise ConfigError("tree does not match the fitted dimension", stage="network")
    labels = dfs_labels(tree)
    os.makedirs(args.out, exist_ok=True)
    pop = population_network(chains, rho, fdr)
    pd.DataFrame(pop.corr, index=labels, columns=labels).to_csv(os.path.join(args.out, "population_corr.csv"))
    if args.covariate is not None or args.x1 is not None:
        if args.x1 is not None:
            x1 = _parse_vec(args.x1, d)
            x0 = _parse_vec(args.x2, d) if args.x2 else baseline_covariates(d)
        else:
            names = chains[0].manifest.get("covariate_names")
            j = int(args.covariate) if args.covariate.isdigit() else (names or []).index(args.covariate)
            x1, x0 = baseline_covariates(d, j), baseline_covariates(d)
        net = fdr_select(differential_correlation_draws(chains, x1, x0), rho, fdr)
        pd.DataFrame(net.delta, index=labels, columns=labels).to_csv(os.path.join(args.out, "delta.csv"))
        pd.DataFrame(net.f, index=labels, columns=labels).to_csv(os.path.join(args.out, "local_fdr.csv"))
        summ = degree_and_differential_set(net, tree)
        pd.DataFrame({"node": labels, "degree": summ.degrees}).to_csv(os.path.join(args.out, "degrees.csv"),
                                                                      index=False)
        _write_json(os.path.join(args.out, "edges.json"),
                    {"x1": x1, "x2": x0, "rho": rho, "fdr": fdr, "achieved_fdr": net.fdr_achieved(),
                     "hub": summ.hub, "differential_set": summ.differential_set,
                     "edges": top_edges_overlay(net, tree, args.top_k)})
        print(f"differential network: {len(net.selected)} edges, hub {summ.hub}")
    print(f"population network: {len(pop.net.selected)} edges")
    return 0


def cmd_eval(args, cfg) -> int:
    from .evalm import comparison_manifest, run_comparison, summarize
    from .gibbs import FitConfig

    ecfg = cfg.get("eval", {})
    sim_defaults = {"n": 150, "q": 30, "d": 4, "R_true": 2, "sigma_structure": "tridiagonal"}
    if args.full:
        sim_defaults = {"n": 150, "q": 100, "d": 4, "R_true": 3}
    cfg = dict(cfg)
    cfg["simulate"] = {**sim_defaults, **cfg.get("simulate", {})}
    sc = sim_config(cfg, args)
    fit_defaults = {"iterations": 10000, "burn_in": 5000} if args.full else {"iterations": 2000, "burn_in": 1000}
    cfg["fit"] = {**fit_defaults, **cfg.get("fit", {})}
    fc = fit_config(cfg, args)
    replicates = args.replicates or ecfg.get("replicates", 20)
    methods = (args.methods or ",".join(ecfg.get("methods", ["glasso", "trecor", "oracle", "covreg"]))).split(",")
    ranks = [int(r) for r in (args.ranks or ",".join(map(str, ecfg.get("ranks", [1, 2, 3, 4, 5])))).split(",")]
    os.makedirs(args.out, exist_ok=True)
    per_fit, chosen = run_comparison(replicates, sc, methods, ranks, fc, args.workers, progress=True)
    per_fit.to_csv(os.path.join(args.out, "per_fit.csv"), index=False)
    chosen.to_csv(os.path.join(args.out, "chosen.csv"), index=False)
    table = summarize(chosen, sc.R_true)
    table.to_csv(os.path.join(args.out, "table.csv"), index=False)
    man = comparison_manifest(sc, fc, replicates, methods, ranks)
    _write_json(os.path.join(args.out, "manifest.json"),
                {**man, "config_hash": _hash_obj(man), "seed": fc.seed, "version": __version__})
    print(table.to_string(index=False))
    return 0


def cmd_diagnose(args, cfg) -> int:
    from .diagnostics import chain_diagnostics, write_effect_sizes, write_traces

    chains = _load_chains(args.draws)
    os.makedirs(args.out, exist_ok=True)
    write_traces(chains, args.out, args.seed)
    write_effect_sizes(chains, args.out, chains[0].manifest.get("covariate_names"))
    report = chain_diagnostics(chains, args.seed)
    _write_json(os.path.join(args.out, "diagnostics.json"),
                {"traces": report, "config_hash": chains[0].manifest["config_hash"],
                 "seed": chains[0].manifest["seed"], "version": __version__})
    for k, v in report.items():
        print(f"{k:24s} mean {v['mean']:10.4f}  R-hat {v['rhat']:.3f}  ESS {v['ess']:.0f}")
    return 0


# --------------------------------------------------------------------------
# parser


def _add_fit_args(p):
    p.add_argument("--data", help="dataset directory written by `simulate`")
    p.add_argument("--counts", help="samples x taxa count table (CSV/TSV)")
    p.add_argument("--tree", help="Newick tree over the taxa")
    p.add_argument("--design", help="samples x covariates CSV (first column intercept)")
    p.add_argument("--truth", help="truth directory (required for --mode oracle)")
    p.add_argument("--resolve-multifurcations", action="store_true")
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", dest="n_chains", type=int)
    p.add_argument("--mode", choices=["full", "fixed_phi", "oracle", "no_covariates"])
    p.add_argument("--pseudocount", type=float)
    p.add_argument("--pg-b-exact", dest="pg_b_exact", type=int)


def _add_sim_args(p):
    p.add_argument("--n", type=int)
    p.add_argument("--q", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--rank-true", dest="R_true", type=int)
    p.add_argument("--structure", dest="sigma_structure", choices=["tridiagonal", "scale_free", "tree_based"])
    p.add_argument("--reference", help="'bundled' or a directory with counts.csv and tree.nwk")
    p.add_argument("--sparsity-threshold", dest="sparsity_threshold", type=float)
    p.add_argument("--min-total", dest="min_total", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trecor", description="Tree-based covariance regression for microbiome counts.")
    ap.add_argument("--config", help="TOML or JSON config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--version", action="version", version=f"trecor {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _add_sim_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run Gibbs chains and write draws")
    _add_fit_args(p)
    p.add_argument("--preset", choices=["hyper-grid", "rank-grid"],
                   help="sensitivity sweep over the (a_nu, a_omega, b_nu, b_omega) grid or R in {3,4,5}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select-rank", help="fit candidate ranks and choose by WAIC")
    _add_fit_args(p)
    p.add_argument("--ranks", default="1,2,3,4,5")
    p.add_argument("--rule", choices=["min", "elbow"], default="min")
    p.add_argument("--waic-layer", choices=["latent", "binomial"], default="latent")
    p.add_argument("--keep-draws", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_rank)

    p = sub.add_parser("network", help="population and differential correlation networks")
    p.add_argument("--draws", required=True, help="fit output directory (chain_* subdirectories)")
    p.add_argument("--tree", required=True)
    p.add_argument("--covariate", help="name or index j: compare x_j = x_0 + e_j against x_0")
    p.add_argument("--x1", help="comma-separated covariate vector")
    p.add_argument("--x2", help="comma-separated covariate vector (default x_0)")
    p.add_argument("--rho", type=float)
    p.add_argument("--fdr", type=float)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_network)

    p = sub.add_parser("eval", help="simulation comparison of gLASSO / TRECOR / oracle / CovReg")
    _add_sim_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--methods")
    p.add_argument("--ranks")
    p.add_argument("--workers", type=int, help="worker processes (default $TRECOR_WORKERS or 1)")
    p.add_argument("--full", action="store_true", help="full-scale settings (q=100, 10k iterations; hours)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval, rank=None, n_chains=None, mode=None, pseudocount=None, pg_b_exact=None)

    p = sub.add_parser("diagnose", help="trace CSVs, effect sizes and split R-hat")
    p.add_argument("--draws", required=True)
    p.add_argument("--seed", type=int, default=0, help="seed for picking random Sigma entries")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)
    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    input_hash = _hash_obj(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except TrecorError as e:
        stage = e.stage or args.command
        ih = e.input_hash or input_hash
        msg = str(e)
        if not msg.startswith("["):
            msg = f"[{stage}] [input {ih}] {msg}"
        elif e.input_hash is None:
            msg = f"[input {ih}] {msg}"
        print(f"trecor: error: {msg}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"trecor: error: [{args.command}] [input {input_hash}] {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
