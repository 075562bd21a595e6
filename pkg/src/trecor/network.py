"""Differential and population correlation networks with Bayesian FDR filtering."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .draws import PosteriorDraws
from .errors import ConfigError
from .model import ModelParams, covariance_at
from .phylo import PhyloTree, tree_path

FDR_TOL = 1e-12  # slack on the running-mean test for summation roundoff


def cov_to_corr(S: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.diag(S))
    C = S / np.outer(sd, sd)
    np.fill_diagonal(C, 1.0)
    return np.clip(C, -1.0, 1.0)


def _params(draws) -> Iterable[ModelParams]:
    if isinstance(draws, PosteriorDraws):
        return draws.iter_params()
    if isinstance(draws, list) and draws and isinstance(draws[0], PosteriorDraws):
        return (p for d in draws for p in d.iter_params())
    return draws


def differential_correlation_draws(draws, x1, x2) -> Iterator[np.ndarray]:
    """Per-draw half-difference of the correlation matrices at ``x1`` and ``x2``."""
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    for p in _params(draws):
        yield 0.5 * (cov_to_corr(covariance_at(p, x1)) - cov_to_corr(covariance_at(p, x2)))


def correlation_draws(draws) -> Iterator[np.ndarray]:
    for p in _params(draws):
        yield cov_to_corr(p.Sigma)


@dataclass(frozen=True)
class DiffNetwork:
    delta: np.ndarray  # filtered posterior mean, zero diagonal
    selected: tuple[tuple[int, int], ...]
    f: np.ndarray
    rho: float
    delta_fdr: float
    posterior_mean: np.ndarray  # unfiltered

    @property
    def q(self) -> int:
        return self.delta.shape[0]

    def fdr_achieved(self) -> float:
        if not self.selected:
            return 0.0
        return float(np.mean([self.f[i, j] for i, j in self.selected]))


def local_fdr(mats: Iterable[np.ndarray], rho: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Streaming f_ij = mean_l 1{|M_ij^(l)| <= rho} and the posterior mean."""
    count = None
    total = None
    L = 0
    for M in mats:
        M = np.asarray(M, dtype=float)
        if count is None:
            count = np.zeros(M.shape)
            total = np.zeros(M.shape)
        count += np.abs(M) <= rho
        total += M
        L += 1
    if L == 0:
        raise ConfigError("no draws to filter", stage="fdr")
    return count / L, total / L, L


def fdr_threshold(f_values: np.ndarray, delta_fdr: float) -> float | None:
    """Largest cut c = f_(k) whose selected set {f <= c} has mean f <= delta_fdr.

    Cuts are only taken at the end of a tie group, so every pair whose f equals
    the cut is selected and the running-mean guarantee still holds.  Returns
    None when nothing can be selected.
    """
    f = np.sort(np.asarray(f_values, dtype=float))
    if f.size == 0:
        return None
    run = np.cumsum(f) / np.arange(1, f.size + 1)
    group_end = np.r_[f[1:] != f[:-1], True]
    ok = np.flatnonzero((run <= delta_fdr + FDR_TOL) & group_end)
    if ok.size == 0:
        return None
    return float(f[ok[-1]])


def fdr_select(delta_draws, rho: float = 0.1, delta_fdr: float = 0.05) -> DiffNetwork:
    """Bayesian-FDR edge selection on a stream (or stacked array) of q x q draws."""
    if rho < 0 or not 0 <= delta_fdr <= 1:
        raise ConfigError("need rho >= 0 and 0 <= delta_fdr <= 1", stage="fdr")
    if isinstance(delta_draws, np.ndarray) and delta_draws.ndim == 3:
        delta_draws = iter(delta_draws)
    f, mean, _ = local_fdr(delta_draws, rho)
    q = f.shape[0]
    iu = np.triu_indices(q, 1)
    cut = fdr_threshold(f[iu], delta_fdr)
    sel_mask = np.zeros((q, q), dtype=bool)
    if cut is not None:
        sel_mask[iu] = f[iu] <= cut
        sel_mask |= sel_mask.T
    selected = tuple((int(i), int(j)) for i, j in zip(*iu) if sel_mask[i, j])
    delta = np.where(sel_mask, mean, 0.0)
    np.fill_diagonal(delta, 0.0)
    return DiffNetwork(delta, selected, f, rho, delta_fdr, mean)


@dataclass(frozen=True)
class PopulationNetwork:
    corr: np.ndarray  # filtered posterior-mean correlation, unit diagonal
    net: DiffNetwork


def population_network(draws, rho: float = 0.1, delta_fdr: float = 0.05) -> PopulationNetwork:
    net = fdr_select(correlation_draws(draws), rho, delta_fdr)
    corr = net.delta.copy()
    np.fill_diagonal(corr, 1.0)
    return PopulationNetwork(corr, net)


def baseline_covariates(d: int, j: int | None = None) -> np.ndarray:
    """x_0 = e_1 (intercept only) or x_j = x_0 + e_j."""
    x = np.zeros(d)
    x[0] = 1.0
    if j is not None:
        if not 1 <= j < d:
            raise ConfigError(f"covariate index {j} out of range", stage="network")
        x[j] = 1.0
    return x


def degrees(net: DiffNetwork) -> np.ndarray:
    deg = np.zeros(net.q, dtype=int)
    for i, j in net.selected:
        deg[i] += 1
        deg[j] += 1
    return deg


@dataclass(frozen=True)
class DegreeSummary:
    degrees: np.ndarray
    hub: int | None
    differential_set: list[str]


def degree_and_differential_set(net: DiffNetwork, tree: PhyloTree) -> DegreeSummary:
    """Node degrees, the hub (ties to the smaller DFS index) and its leaf set."""
    deg = degrees(net)
    if deg.max(initial=0) == 0:
        return DegreeSummary(deg, None, [])
    hub = int(np.argmax(deg))
    return DegreeSummary(deg, hub, tree.clade_names(hub))


def top_edges_overlay(net: DiffNetwork, tree: PhyloTree, k: int = 10) -> list[dict]:
    """Top-k selected edges by |value| (ties by (i, j)), annotated for plotting."""
    deg = degrees(net)
    edges = sorted(net.selected, key=lambda e: (-abs(net.delta[e]), e[0], e[1]))[: max(k, 0)]
    out = []
    for i, j in edges:
        v = float(net.delta[i, j])
        out.append({"i": i, "j": j, "value": v, "weight": abs(v), "sign": int(np.sign(v)),
                    "path": tree_path(tree, i, j), "degree_i": int(deg[i]), "degree_j": int(deg[j])})
    return out
