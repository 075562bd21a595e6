"""Synthetic data from the full hierarchical model.

Sigma structures: tridiagonal, scale-free (nonlinear preferential attachment)
and tree-based (edge probability exp(-graph distance)).  Intercepts and
library sizes come from a reference count table when one is supplied, else
from a parametric fallback.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources

import numpy as np
import pandas as pd

from .errors import ConfigError
from .model import Design
from .phylo import (
    CountMatrix,
    NodeCounts,
    PhyloTree,
    leaf_to_node_counts,
    node_to_leaf_counts,
    prune_tree,
    random_binary_tree,
    read_counts,
    read_newick,
    load_node_counts,
    save_node_counts,
    tree_graph_distance,
    write_newick,
)

log = logging.getLogger(__name__)

STRUCTURES = ("tridiagonal", "scale_free", "tree_based")
BUNDLED = "bundled"


@dataclass(frozen=True)
class SimConfig:
    n: int = 150
    q: int = 100
    d: int = 4
    R_true: int = 3
    sigma_structure: str = "tridiagonal"
    covariate_corr: float = 0.1
    b_var: float | None = None  # defaults to 0.5 / d
    sparsity_threshold: float = 0.5
    min_total: int = 100
    seed: int = 0
    reference: str | None = None  # None = parametric fallback, "bundled" or a directory
    intercept_sd: float = 1.5
    lib_logmean: float = 8.5
    lib_logsd: float = 1.0

    def __post_init__(self):
        if self.sigma_structure not in STRUCTURES:
            raise ConfigError(f"unknown sigma structure {self.sigma_structure!r}")
        if self.R_true < 0 or self.n < 1 or self.q < 1 or self.d < 1:
            raise ConfigError("need n, q, d >= 1 and R_true >= 0")
        if self.R_true > self.q:
            raise ConfigError("R_true cannot exceed q (support blocks would be empty)")

    @property
    def entry_var(self) -> float:
        return 0.5 / self.d if self.b_var is None else self.b_var


# --------------------------------------------------------------------------
# Sigma


def _edges(A: np.ndarray) -> set[tuple[int, int]]:
    i, j = np.nonzero(np.triu(A, 1))
    return {(int(a), int(b)) for a, b in zip(i, j)}


def shift_to_pd(A: np.ndarray, start: float = 1.0, step: float = 0.1, max_iter: int = 100000) -> np.ndarray:
    """Add c I (c = start, start + step, ...) until Cholesky succeeds, then rescale to unit diagonal."""
    q = A.shape[0]
    c = start
    for _ in range(max_iter):
        M = A + c * np.eye(q)
        try:
            np.linalg.cholesky(M)
            break
        except np.linalg.LinAlgError:
            c += step
    else:
        raise ConfigError("diagonal shift did not reach positive definiteness")
    sd = np.sqrt(np.diag(M))
    S = M / np.outer(sd, sd)
    np.fill_diagonal(S, 1.0)
    return S


def _signed_weights(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.uniform(0.3, 0.9, size=k) * rng.choice([-1.0, 1.0], size=k)


def barabasi_albert(q: int, rng: np.random.Generator, m: int = 1, power: float = 5.0) -> np.ndarray:
    """Adjacency of a preferential-attachment graph with P(attach to v) ~ deg(v)^power."""
    A = np.zeros((q, q), dtype=bool)
    if q < 2:
        return A
    deg = np.zeros(q)
    A[0, 1] = A[1, 0] = True
    deg[:2] = 1
    for v in range(2, q):
        w = deg[:v] ** power
        targets = rng.choice(v, size=min(m, v), replace=False, p=w / w.sum())
        for t in targets:
            A[v, t] = A[t, v] = True
            deg[t] += 1
            deg[v] += 1
    return A


def gen_sigma(structure: str, q: int, rng: np.random.Generator, tree: PhyloTree | None = None):
    """Unit-diagonal PD matrix and its true edge set."""
    if structure == "tridiagonal":
        S = np.eye(q) + 0.5 * (np.eye(q, k=1) + np.eye(q, k=-1))
        return S, _edges(S != 0)
    if structure == "scale_free":
        A = barabasi_albert(q, rng)
    elif structure == "tree_based":
        if tree is None:
            raise ConfigError("tree_based Sigma needs a tree")
        D = tree_graph_distance(tree)
        P = np.exp(-D.astype(float))
        U = rng.random((q, q))
        A = np.triu(U < P, 1)
        A = A | A.T
    else:
        raise ConfigError(f"unknown sigma structure {structure!r}")
    W = np.zeros((q, q))
    iu = np.nonzero(np.triu(A, 1))
    W[iu] = _signed_weights(rng, len(iu[0]))
    W = W + W.T
    return shift_to_pd(W), _edges(A)


# --------------------------------------------------------------------------
# coefficients


def support_blocks(q: int, R: int) -> list[np.ndarray]:
    """Partition rows into R contiguous blocks of equal size; remainder to the last."""
    if R == 0:
        return []
    size = q // R
    blocks = [np.arange(r * size, (r + 1) * size) for r in range(R - 1)]
    blocks.append(np.arange((R - 1) * size, q))
    return blocks


def gen_coefficients(config: SimConfig, rng: np.random.Generator, intercepts: np.ndarray | None = None,
                     q: int | None = None) -> np.ndarray:
    """Stacked (R+1, q, d) coefficients with disjoint row supports for B_1..B_R."""
    q = config.q if q is None else q
    d, R = config.d, config.R_true
    B = np.zeros((R + 1, q, d))
    B[0, :, 0] = rng.normal(0.0, config.intercept_sd, size=q) if intercepts is None else intercepts
    sd = np.sqrt(config.entry_var)
    for r, rows in enumerate(support_blocks(q, R), start=1):
        B[r, rows, :] = rng.normal(0.0, sd, size=(len(rows), d))
    return B


def gen_design(n: int, d: int, corr: float, rng: np.random.Generator) -> np.ndarray:
    k = d - 1
    if k == 0:
        return np.ones((n, 1))
    C = np.full((k, k), corr) + (1 - corr) * np.eye(k)
    Z = rng.standard_normal((n, k)) @ np.linalg.cholesky(C).T
    return np.c_[np.ones(n), Z]


# --------------------------------------------------------------------------
# reference data


@dataclass(frozen=True)
class Reference:
    tree: PhyloTree
    N_pool: np.ndarray  # (n_ref, q) clade totals of the reference samples
    intercepts: np.ndarray  # pooled node log-odds, length q
    taxa: tuple[str, ...]


def bundled_reference_paths() -> tuple[str, str]:
    base = resources.files("trecor") / "data"
    return str(base / "reference_counts.csv.gz"), str(base / "reference_tree.nwk")


def load_reference(counts_csv: str, tree_file: str, zero_threshold: float = 0.5, min_total: int = 100,
                   max_taxa: int | None = None, rng: np.random.Generator | None = None) -> Reference:
    """Filter genera by zero proportion and total count, prune the tree to them.

    With ``max_taxa`` set and more genera surviving, a uniform random subset of
    that size is kept (so the retained sparsity profile is not biased).
    """
    counts = read_counts(counts_csv)
    tree = read_newick(tree_file)
    z = counts.z
    zero_prop = (z == 0).mean(axis=0)
    keep = (zero_prop <= zero_threshold) & (z.sum(axis=0) >= min_total)
    names = [nm for nm, k in zip(counts.taxon_names, keep) if k]
    if len(names) < 2:
        raise ConfigError(f"reference filter (zero<= {zero_threshold}, total>={min_total}) leaves "
                          f"{len(names)} genera", stage="load-reference")
    if max_taxa is not None and len(names) > max_taxa:
        rng = rng or np.random.default_rng(0)
        pick = np.sort(rng.choice(len(names), size=max_taxa, replace=False))
        names = [names[i] for i in pick]
    sub = prune_tree(tree, names)
    cols = [counts.taxon_names.index(nm) for nm in sub.leaf_names]
    cm = CountMatrix(z[:, cols], sub.leaf_names, counts.sample_ids)
    nodes = leaf_to_node_counts(sub, cm, drop_empty=True)
    y_tot = nodes.y.sum(axis=0)
    N_tot = nodes.N.sum(axis=0)
    intercepts = np.log((y_tot + 0.5) / (N_tot - y_tot + 0.5))
    return Reference(sub, nodes.N, intercepts, sub.leaf_names)


def resolve_reference(config: SimConfig, rng: np.random.Generator) -> Reference | None:
    if config.reference is None:
        return None
    if config.reference == BUNDLED:
        counts_csv, tree_file = bundled_reference_paths()
    else:
        counts_csv = os.path.join(config.reference, "counts.csv")
        tree_file = os.path.join(config.reference, "tree.nwk")
    return load_reference(counts_csv, tree_file, config.sparsity_threshold, config.min_total,
                          max_taxa=config.q + 1, rng=rng)


# --------------------------------------------------------------------------
# datasets


@dataclass
class SimDataset:
    nodes: NodeCounts
    design: Design
    tree: PhyloTree
    Sigma: np.ndarray
    B: np.ndarray
    phi: np.ndarray
    gamma: np.ndarray
    edges: set = field(default_factory=set)
    config: SimConfig | None = None

    def sigma_x(self, x) -> np.ndarray:
        L = self.B[1:] @ np.asarray(x, dtype=float)
        return self.Sigma + L.T @ L

    def leaf_counts(self) -> np.ndarray:
        return node_to_leaf_counts(self.tree, self.nodes)

    def zero_proportion(self) -> float:
        return float((self.leaf_counts() == 0).mean())


def binomial_cascade(tree: PhyloTree, M: np.ndarray, p: np.ndarray, rng: np.random.Generator):
    """Clade totals induced by sending M reads down the tree with split probabilities p."""
    n, q = p.shape
    N = np.zeros((n, q), dtype=np.int64)
    y = np.zeros((n, q), dtype=np.int64)
    N[:, 0] = M
    for j in range(q):  # preorder: parents first
        y[:, j] = rng.binomial(N[:, j], p[:, j])
        left, right = tree.children[j]
        if left < q:
            N[:, left] = y[:, j]
        if right < q:
            N[:, right] = N[:, j] - y[:, j]
    return N, y


def gen_dataset(config: SimConfig, rng: np.random.Generator | None = None) -> SimDataset:
    rng = np.random.default_rng(config.seed) if rng is None else rng
    ref = resolve_reference(config, rng)
    if ref is not None:
        tree = ref.tree
        if tree.q != config.q:
            log.warning("reference keeps %d internal nodes; using q=%d instead of %d", tree.q, tree.q, config.q)
    else:
        tree = random_binary_tree([f"taxon{k}" for k in range(config.q + 1)], rng)
    q, n, d = tree.q, config.n, config.d
    X = gen_design(n, d, config.covariate_corr, rng)
    Sigma, edges = gen_sigma(config.sigma_structure, q, rng, tree)
    B = gen_coefficients(config, rng, None if ref is None else ref.intercepts, q=q)
    gamma = rng.standard_normal((n, config.R_true))
    mu = X @ B[0].T
    if config.R_true:
        mu += np.einsum("nr,rqd,nd->nq", gamma, B[1:], X)
    phi = mu + rng.standard_normal((n, q)) @ np.linalg.cholesky(Sigma).T
    p = 1.0 / (1.0 + np.exp(-phi))
    if ref is not None:
        N = ref.N_pool[rng.integers(0, ref.N_pool.shape[0], size=n)]
        y = rng.binomial(N, p)
    else:
        M = np.maximum(np.round(rng.lognormal(config.lib_logmean, config.lib_logsd, size=n)), 1).astype(np.int64)
        N, y = binomial_cascade(tree, M, p, rng)
    nodes = NodeCounts(N.astype(np.int64), y.astype(np.int64), tuple(f"sample{i}" for i in range(n)),
                       tree.topology_hash())
    design = Design(X, ("intercept",) + tuple(f"x{j}" for j in range(1, d)))
    return SimDataset(nodes, design, tree, Sigma, B, phi, gamma, edges, config)


# --------------------------------------------------------------------------
# persistence


def save_dataset(ds: SimDataset, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    save_node_counts(ds.nodes, os.path.join(outdir, "nodes"), ds.tree)
    write_newick(ds.tree, os.path.join(outdir, "tree.nwk"))
    pd.DataFrame(ds.design.X, columns=list(ds.design.covariate_names),
                 index=list(ds.nodes.sample_ids)).rename_axis("sample").to_csv(os.path.join(outdir, "design.csv"))
    tdir = os.path.join(outdir, "truth")
    os.makedirs(tdir, exist_ok=True)
    np.savetxt(os.path.join(tdir, "Sigma.csv"), ds.Sigma, delimiter=",")
    np.savetxt(os.path.join(tdir, "phi.csv"), ds.phi, delimiter=",")
    np.savetxt(os.path.join(tdir, "gamma.csv"), ds.gamma.reshape(ds.gamma.shape[0], -1), delimiter=",")
    for r in range(ds.B.shape[0]):
        np.savetxt(os.path.join(tdir, f"B{r}.csv"), ds.B[r], delimiter=",")
    meta = {"edges": sorted(ds.edges), "R_true": ds.B.shape[0] - 1,
            "config": asdict(ds.config) if ds.config else None}
    with open(os.path.join(tdir, "truth.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_design(path: str) -> Design:
    df = pd.read_csv(path, index_col=0)
    return Design(df.to_numpy(dtype=float), tuple(df.columns))


def load_truth(tdir: str) -> dict:
    with open(os.path.join(tdir, "truth.json")) as fh:
        meta = json.load(fh)
    R = meta["R_true"]
    B = np.stack([np.loadtxt(os.path.join(tdir, f"B{r}.csv"), delimiter=",", ndmin=2) for r in range(R + 1)])
    return {"Sigma": np.loadtxt(os.path.join(tdir, "Sigma.csv"), delimiter=",", ndmin=2),
            "phi": np.loadtxt(os.path.join(tdir, "phi.csv"), delimiter=",", ndmin=2),
            "B": B, "edges": {tuple(e) for e in meta["edges"]}, "R_true": R}


def load_dataset(indir: str) -> SimDataset:
    nodes = load_node_counts(os.path.join(indir, "nodes"))
    tree = read_newick(os.path.join(indir, "tree.nwk"))
    design = load_design(os.path.join(indir, "design.csv"))
    t = load_truth(os.path.join(indir, "truth"))
    if t["R_true"]:
        gamma = np.loadtxt(os.path.join(indir, "truth", "gamma.csv"), delimiter=",", ndmin=2)
        gamma = gamma.reshape(nodes.n, t["R_true"])
    else:
        gamma = np.zeros((nodes.n, 0))
    return SimDataset(nodes, design, tree, t["Sigma"], t["B"], t["phi"], gamma, t["edges"])


def with_seed(config: SimConfig, seed: int) -> SimConfig:
    return replace(config, seed=seed)
