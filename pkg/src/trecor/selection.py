"""WAIC and rank selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .draws import PosteriorDraws
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WaicResult:
    waic: float
    lppd: float
    p_waic: float
    pointwise: np.ndarray

    def as_row(self) -> dict:
        return {"waic": self.waic, "lppd": self.lppd, "p_waic": self.p_waic}


def waic_from_loglik(ll: np.ndarray) -> WaicResult:
    """WAIC from an (S draws) x (n points) log-likelihood matrix."""
    ll = np.asarray(ll, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 2:
        raise ConfigError("WAIC needs at least 2 retained draws", stage="waic")
    S = ll.shape[0]
    lppd_i = logsumexp(ll, axis=0) - np.log(S)
    p_i = ll.var(axis=0, ddof=1)
    point = -2.0 * (lppd_i - p_i)
    lppd, p = float(lppd_i.sum()), float(p_i.sum())
    return WaicResult(-2.0 * (lppd - p), lppd, p, point)


def waic(draws: PosteriorDraws | list[PosteriorDraws], layer: str = "latent") -> WaicResult:
    """WAIC of one chain or several pooled chains.

    ``layer='latent'`` uses the Gaussian layer with the factors integrated out;
    ``layer='binomial'`` uses sum_j log Binom(y_ij | N_ij, logistic(phi_ij))
    (requires the chain to have been run with ``store_binomial_loglik``).
    """
    key = {"latent": "loglik", "binomial": "loglik_binomial"}.get(layer)
    if key is None:
        raise ConfigError(f"unknown WAIC layer {layer!r}", stage="waic")
    chains = draws if isinstance(draws, list) else [draws]
    for c in chains:
        if key not in c.summary:
            raise ConfigError(f"draws carry no {layer} log-likelihood", stage="waic")
    return waic_from_loglik(np.concatenate([c.summary[key] for c in chains]))


def elbow_index(values) -> int:
    """Index of the largest discrete curvature of a polyline (ends excluded)."""
    v = np.asarray(values, dtype=float)
    if v.size < 3:
        return int(np.argmin(v))
    curv = v[:-2] - 2 * v[1:-1] + v[2:]
    return int(np.argmax(curv)) + 1


def choose_rank(ranks, waics, rule: str = "min", rtol: float = 0.0) -> int:
    """Pick a rank from a WAIC curve; ties (within ``rtol``) go to the smaller rank."""
    ranks = list(ranks)
    w = np.asarray(waics, dtype=float)
    order = np.argsort(ranks)
    ranks = [ranks[i] for i in order]
    w = w[order]
    if rule == "min":
        best = np.min(w)
        tol = rtol * abs(best)
        return ranks[int(np.flatnonzero(w <= best + tol)[0])]
    if rule == "elbow":
        return ranks[elbow_index(w)]
    raise ConfigError(f"unknown rule {rule!r}", stage="select-rank")


@dataclass(frozen=True)
class RankSelection:
    chosen: int
    curve: list[dict]
    draws: dict


def select_rank(candidates, config, nodes, design, phi_true=None, rule: str = "min", layer: str = "latent",
                outdir: str | None = None) -> RankSelection:
    """Fit every candidate rank (distinct seeds) and choose by WAIC."""
    import os

    from .gibbs import run_chains

    candidates = sorted(set(int(r) for r in candidates))
    if not candidates:
        raise ConfigError("no candidate ranks", stage="select-rank")
    curve, fits = [], {}
    for k, R in enumerate(candidates):
        cfg = replace(config, rank=R, seed=config.seed + 1000 * k,
                      store_binomial_loglik=config.store_binomial_loglik or layer == "binomial")
        sub = None if outdir is None else os.path.join(outdir, f"R{R}")
        chains = run_chains(cfg, nodes, design, phi_true, sub)
        w = waic(chains, layer)
        log.info("R=%d waic=%.2f", R, w.waic)
        curve.append({"R": R, **w.as_row()})
        fits[R] = chains
    chosen = choose_rank([c["R"] for c in curve], [c["waic"] for c in curve], rule)
    return RankSelection(chosen, curve, fits)
