"""Edge-recovery and estimation metrics, and the simulation comparison harness."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace

import numpy as np
import pandas as pd

from .draws import PosteriorDraws
from .errors import ConfigError
from .gibbs import FitConfig, data_hash, run_chain
from .selection import choose_rank, waic
from .simgen import SimConfig, gen_dataset

log = logging.getLogger(__name__)

METHOD_MODES = {"glasso": "no_covariates", "trecor": "full", "oracle": "oracle", "covreg": "fixed_phi"}
METHOD_LABELS = {"glasso": "gLASSO", "trecor": "TRECOR", "oracle": "TRECOR-oracle", "covreg": "CovReg"}


# --------------------------------------------------------------------------
# curves


def _edge_labels(score: np.ndarray, truth_edges) -> tuple[np.ndarray, np.ndarray]:
    q = score.shape[0]
    iu = np.triu_indices(q, 1)
    truth = np.zeros((q, q), dtype=bool)
    for i, j in truth_edges:
        truth[min(i, j), max(i, j)] = True
    return np.asarray(score, dtype=float)[iu], truth[iu]


def roc_pr_curves(score: np.ndarray, truth_edges) -> dict:
    """ROC and precision-recall curves for off-diagonal edge recovery.

    Thresholds sweep the distinct score values from high to low; tied scores
    enter together.  AUCs are trapezoidal; the PR curve starts at
    (recall 0, precision of the first threshold).
    """
    s, y = _edge_labels(score, truth_edges)
    P = int(y.sum())
    Nn = int((~y).sum())
    if P == 0:
        raise ConfigError("truth has no edges; PR is undefined", stage="roc")
    if Nn == 0:
        raise ConfigError("truth has no non-edges; ROC is undefined", stage="roc")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / Nn]
    recall = tp / P
    precision = tp / (tp + fp)
    rec = np.r_[0.0, recall]
    prec = np.r_[precision[0], precision]
    return {
        "fpr": fpr, "tpr": tpr, "recall": rec, "precision": prec,
        "auc": float(np.trapezoid(tpr, fpr)), "aupr": float(np.trapezoid(prec, rec)),
    }


# --------------------------------------------------------------------------
# estimation errors


def sigma_error(draws, Sigma_true: np.ndarray) -> float:
    """||E[Sigma | data] - Sigma*||_F^2."""
    S = _posterior_mean_sigma(draws)
    return float(np.sum((S - Sigma_true) ** 2))


def _posterior_mean_sigma(draws) -> np.ndarray:
    if isinstance(draws, PosteriorDraws):
        return draws.posterior_mean("Sigma")
    if isinstance(draws, list):
        tot = sum(d.posterior_mean("Sigma") * d.n_draws for d in draws)
        return tot / sum(d.n_draws for d in draws)
    return np.asarray(draws, dtype=float)  # already a point estimate


def posterior_mean_sigma_x(draws, X: np.ndarray) -> np.ndarray:
    """E[Sigma(x_i) | data] for every row of X, shape (n, q, q)."""
    chains = draws if isinstance(draws, list) else [draws]
    acc = None
    cnt = 0
    for ch in chains:
        for p in ch.iter_params():
            L = np.einsum("rqd,nd->nrq", p.B[1:], X)
            term = p.Sigma[None] + np.einsum("nrq,nrs->nqs", L, L)
            acc = term if acc is None else acc + term
            cnt += 1
    if cnt == 0:
        raise ConfigError("no retained draws", stage="sigma-x")
    return acc / cnt


def true_sigma_x(Sigma: np.ndarray, B: np.ndarray, X: np.ndarray) -> np.ndarray:
    L = np.einsum("rqd,nd->nrq", B[1:], X)
    return Sigma[None] + np.einsum("nrq,nrs->nqs", L, L)


def sigma_x_error(draws, Sigma_true: np.ndarray, B_true: np.ndarray, X: np.ndarray,
                  X_fit: np.ndarray | None = None) -> float:
    """(1/n) sum_i ||E[Sigma(x_i)] - Sigma*(x_i)||_F^2.

    ``X_fit`` is the design the chain was run with (the intercept-only
    baseline ignores covariates); defaults to ``X``.
    """
    est = posterior_mean_sigma_x(draws, X if X_fit is None else X_fit)
    tru = true_sigma_x(Sigma_true, B_true, X)
    return float(np.mean(np.sum((est - tru) ** 2, axis=(1, 2))))


# --------------------------------------------------------------------------
# comparison harness


def _fit_job(args) -> dict:
    sim, rep_seed, method, R, fit = args
    ds = gen_dataset(replace(sim, seed=rep_seed))
    mode = METHOD_MODES[method]
    cfg = replace(fit, mode=mode, rank=R, seed=fit.seed + 7919 * rep_seed + 101 * R)
    t0 = time.perf_counter()
    dr = run_chain(cfg, ds.nodes, ds.design, 0, ds.phi if mode == "oracle" else None)
    secs = time.perf_counter() - t0
    X_fit = dr.summary["X"]
    Sbar = dr.posterior_mean("Sigma")
    curves = roc_pr_curves(np.abs(Sbar), ds.edges)
    w = waic(dr) if dr.n_draws >= 2 else None
    return {
        "replicate": rep_seed, "method": method, "R": cfg.effective_rank,
        "dataset_hash": data_hash(ds.nodes.N, ds.nodes.y, ds.design.X),
        "auc": curves["auc"], "aupr": curves["aupr"],
        "sigma_err": float(np.sum((Sbar - ds.Sigma) ** 2)),
        "sigma_x_err": sigma_x_error(dr, ds.Sigma, ds.B, ds.design.X, X_fit),
        "waic": np.nan if w is None else w.waic,
        "zero_prop": ds.zero_proportion(),
        "seconds": secs,
    }


def default_workers() -> int:
    return max(1, int(os.environ.get("TRECOR_WORKERS", "1")))


def run_comparison(replicates, sim: SimConfig, methods=("glasso", "trecor", "oracle", "covreg"),
                   ranks=(1, 2, 3, 4, 5), fit: FitConfig | None = None, workers: int | None = None,
                   progress: bool = False) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Fit every method to every replicate dataset.

    Returns ``(per_fit, chosen)``: one row per (replicate, method, R) fit, and
    one row per (replicate, method) at the WAIC-chosen rank (gLASSO has no
    rank, reported as NA).
    """
    fit = fit or FitConfig(iterations=2000, burn_in=1000, thin=5)
    reps = list(range(replicates)) if isinstance(replicates, int) else list(replicates)
    jobs = []
    for rep in reps:
        for m in methods:
            if m not in METHOD_MODES:
                raise ConfigError(f"unknown method {m!r}", stage="eval")
            for R in ([0] if m == "glasso" else ranks):
                jobs.append((sim, rep, m, R, fit))
    workers = default_workers() if workers is None else workers
    rows = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            for k, r in enumerate(ex.map(_fit_job, jobs)):
                rows.append(r)
                if progress:
                    log.info("fit %d/%d done", k + 1, len(jobs))
    else:
        for k, job in enumerate(jobs):
            rows.append(_fit_job(job))
            if progress:
                r = rows[-1]
                log.info("fit %d/%d rep=%s %s R=%d auc=%.3f (%.1fs)", k + 1, len(jobs), r["replicate"],
                         r["method"], r["R"], r["auc"], r["seconds"])
    per_fit = pd.DataFrame(rows)
    chosen = []
    for (rep, m), grp in per_fit.groupby(["replicate", "method"], sort=False):
        if m == "glasso":
            row = grp.iloc[0].to_dict()
            row["chosen_R"] = np.nan
        else:
            R = choose_rank(grp["R"].tolist(), grp["waic"].tolist())
            row = grp[grp["R"] == R].iloc[0].to_dict()
            row["chosen_R"] = R
        chosen.append(row)
    return per_fit, pd.DataFrame(chosen)


def summarize(chosen: pd.DataFrame, R_true: int) -> pd.DataFrame:
    """Summary table: mean (SD) errors, rank-selection rate, AUC/AUPR."""
    out = []
    for m, grp in chosen.groupby("method", sort=False):
        rank_rate = np.nan if m == "glasso" else float(np.mean(grp["chosen_R"] == R_true))
        out.append({
            "method": METHOD_LABELS.get(m, m),
            "sigma_err_mean": grp["sigma_err"].mean(), "sigma_err_sd": grp["sigma_err"].std(ddof=1),
            "sigma_x_err_mean": grp["sigma_x_err"].mean(), "sigma_x_err_sd": grp["sigma_x_err"].std(ddof=1),
            "rank_selection": rank_rate,
            "auc_mean": grp["auc"].mean(), "aupr_mean": grp["aupr"].mean(),
            "replicates": len(grp),
        })
    return pd.DataFrame(out)


def comparison_manifest(sim: SimConfig, fit: FitConfig, replicates, methods, ranks) -> dict:
    return {"sim": asdict(sim), "fit": fit.to_dict(), "replicates": list(replicates) if not isinstance(replicates, int)
            else replicates, "methods": list(methods), "ranks": list(ranks)}
