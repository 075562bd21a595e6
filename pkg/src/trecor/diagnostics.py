"""Multi-chain convergence summaries and trace exports."""
from __future__ import annotations

import os

import numpy as np
import pandas as pd

from .draws import PosteriorDraws
from .errors import ConfigError
from .model import effect_sizes


def split_rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction for an (m chains) x (S draws) array."""
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None]
    S = x.shape[1] // 2
    if S < 2:
        return np.nan
    halves = np.concatenate([x[:, :S], x[:, -S:]])
    W = halves.var(axis=1, ddof=1).mean()
    B = S * halves.mean(axis=1).var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else np.inf
    var_plus = (S - 1) / S * W + B / S
    return float(np.sqrt(var_plus / W))


def effective_size(x: np.ndarray) -> float:
    """Single-chain ESS from the initial positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0:
        return float(n)
    xc = x - x.mean()
    f = np.fft.rfft(xc, n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (np.arange(n, 0, -1) * xc.var())
    tau = 1.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        tau += 2 * pair
    return float(n / tau)


def scalar_traces(draws: PosteriorDraws, rng: np.random.Generator | None = None, n_entries: int = 5) -> dict:
    """Traces of lambda, a few random Sigma entries, and effect sizes."""
    rng = rng or np.random.default_rng(0)
    Sig = draws.stack("Sigma")
    B = draws.stack("B")
    q = Sig.shape[1]
    out = {"lambda": draws.stack("lam")}
    iu = np.triu_indices(q)
    pick = rng.choice(len(iu[0]), size=min(n_entries, len(iu[0])), replace=False)
    for k in sorted(pick):
        i, j = iu[0][k], iu[1][k]
        out[f"Sigma[{i},{j}]"] = Sig[:, i, j]
    mean_eff, cov_eff = effect_sizes(B)
    for j in range(1, B.shape[-1]):
        out[f"mean_effect[{j}]"] = mean_eff[:, j]
        if B.shape[1] > 1:
            out[f"cov_effect[{j}]"] = cov_eff[:, j]
    return out


def chain_diagnostics(chains: list[PosteriorDraws], seed: int = 0) -> dict:
    """Per-parameter split R-hat / ESS across chains for the same trace set."""
    if not chains:
        raise ConfigError("no chains", stage="diagnose")
    traces = [scalar_traces(c, np.random.default_rng(seed)) for c in chains]
    S = min(c.n_draws for c in chains)
    report = {}
    for name in traces[0]:
        arr = np.stack([t[name][:S] for t in traces])
        report[name] = {
            "mean": float(arr.mean()), "sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            "rhat": split_rhat(arr), "ess": float(sum(effective_size(a) for a in arr)),
        }
    return report


def write_traces(chains: list[PosteriorDraws], outdir: str, seed: int = 0) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    paths = []
    for c, ch in enumerate(chains):
        df = pd.DataFrame(scalar_traces(ch, np.random.default_rng(seed)))
        df.index.name = "draw"
        p = os.path.join(outdir, f"trace_chain{c}.csv")
        df.to_csv(p)
        paths.append(p)
    return paths


def write_effect_sizes(chains: list[PosteriorDraws], outdir: str, names=None) -> str:
    """Posterior draws of ||b_j0||^2 and ||B^(j)||_F (intercept excluded)."""
    os.makedirs(outdir, exist_ok=True)
    rows = []
    for c, ch in enumerate(chains):
        mean_eff, cov_eff = effect_sizes(ch.stack("B"))
        for s in range(mean_eff.shape[0]):
            for j in range(1, mean_eff.shape[1]):
                rows.append({"chain": c, "draw": s, "covariate": names[j] if names else j,
                             "mean_effect": mean_eff[s, j], "cov_effect": cov_eff[s, j]})
    p = os.path.join(outdir, "effect_sizes.csv")
    pd.DataFrame(rows).to_csv(p, index=False)
    return p
