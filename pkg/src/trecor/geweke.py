"""Joint-distribution ("getting it right") check of the Gibbs sampler.

Two samplers target the same joint p(theta, phi, g, y):

* marginal-conditional: theta from the prior, then phi, y forward;
* successive-conditional: alternate one Gibbs sweep with y | phi.

If every full conditional is right, scalar functionals of theta have the same
distribution under both.  Comparisons use quantile indicators at forward-sample
quantiles (robust to the heavy tails of Sigma) with batch-means standard errors
on the dependent chain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .gibbs import ChainState, sweep
from .model import Hyper
from .phylo import NodeCounts
from .randdist import draw_inverse_gaussian, draw_polya_gamma

STATS = ("Sigma11", "lambda", "B1_fro", "nu1", "Sigma12", "omega1", "phi11")


@dataclass(frozen=True)
class GewekeProblem:
    X: np.ndarray
    N: np.ndarray
    R: int
    hyper: Hyper


def default_problem(q: int = 4, n: int = 8, d: int = 2, R: int = 1, seed: int = 11) -> GewekeProblem:
    rng = np.random.default_rng(seed)
    X = np.c_[np.ones(n), rng.standard_normal((n, d - 1))]
    N = rng.integers(0, 12, size=(n, q))
    return GewekeProblem(X, N, R, Hyper(v=5.0, s=5.0, a_nu=3.0, b_nu=2.0, a_omega=3.0, b_omega=2.0))


def sample_sigma_prior(rng: np.random.Generator, q: int, lam: float, max_tries: int = 100000) -> np.ndarray:
    """Rejection draw from the PD-restricted Laplace/exponential prior."""
    iu = np.triu_indices(q, 1)
    for _ in range(max_tries):
        S = np.zeros((q, q))
        S[iu] = rng.laplace(0.0, 1.0 / lam, size=len(iu[0]))
        S = S + S.T
        S[np.diag_indices(q)] = rng.exponential(2.0 / lam, size=q)
        try:
            np.linalg.cholesky(S)
            return S
        except np.linalg.LinAlgError:
            continue
    raise RuntimeError("prior rejection sampler did not accept")


def forward_state(prob: GewekeProblem, rng: np.random.Generator) -> tuple[ChainState, NodeCounts]:
    h = prob.hyper
    n, d = prob.X.shape
    q = prob.N.shape[1]
    R = prob.R
    lam = rng.gamma(h.v, 1.0 / h.s)
    Sigma = sample_sigma_prior(rng, q, lam)
    tau = np.ones((q, q))
    iu = np.triu_indices(q, 1)
    tau[iu] = 1.0 / np.atleast_1d(draw_inverse_gaussian(rng, lam / np.abs(Sigma[iu]), lam**2))
    tau.T[iu] = tau[iu]
    nu = 1.0 / rng.gamma(h.a_nu, 1.0 / h.b_nu, size=d)
    omega = 1.0 / rng.gamma(h.a_omega, 1.0 / h.b_omega, size=d)
    L = np.linalg.cholesky(Sigma)
    B = np.empty((R + 1, q, d))
    B[0] = L @ rng.standard_normal((q, d)) * np.sqrt(omega)
    for r in range(1, R + 1):
        B[r] = L @ rng.standard_normal((q, d)) * np.sqrt(nu)
    gamma = rng.standard_normal((n, R))
    mu = prob.X @ B[0].T + np.einsum("nr,rqd,nd->nq", gamma, B[1:], prob.X)
    phi = mu + rng.standard_normal((n, q)) @ L.T
    y = rng.binomial(prob.N, 1.0 / (1.0 + np.exp(-phi)))
    g = draw_polya_gamma(rng, prob.N, phi)
    st = ChainState(Sigma=Sigma, Omega=np.linalg.inv(Sigma), B=B, tau=tau, lam=float(lam), nu=nu,
                    omega=omega, gamma=gamma, phi=phi, g=np.asarray(g, dtype=float), hyper=h, chol=L)
    return st, NodeCounts(prob.N, y)


def functionals(st: ChainState) -> np.ndarray:
    return np.array([st.Sigma[0, 0], st.lam, np.linalg.norm(st.B[1:]) if st.R else 0.0, st.nu[0],
                     st.Sigma[0, 1], st.omega[0], st.phi[0, 0]])


def marginal_conditional(prob: GewekeProblem, n_draws: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.array([functionals(forward_state(prob, rng)[0]) for _ in range(n_draws)])


def successive_conditional(prob: GewekeProblem, n_draws: int, seed: int, thin: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    st, nodes = forward_state(prob, rng)
    out = np.empty((n_draws, len(STATS)))
    for s in range(n_draws):
        for _ in range(thin):
            sweep(st, prob.X, rng, nodes, True)
            y = rng.binomial(prob.N, 1.0 / (1.0 + np.exp(-st.phi)))
            nodes = NodeCounts(prob.N, y)
        out[s] = functionals(st)
    return out


def batch_means_se(x: np.ndarray, n_batches: int = 50) -> float:
    m = len(x) // n_batches
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def compare(forward: np.ndarray, chain: np.ndarray, probs=(0.1, 0.25, 0.5, 0.75, 0.9),
            alpha: float = 0.01) -> list[dict]:
    """z-tests of P(stat <= forward quantile) between the two samplers.

    The family-wise level ``alpha`` is split evenly (Bonferroni) across all
    statistic/quantile pairs.
    """
    rows = []
    n_tests = forward.shape[1] * len(probs)
    crit = stats.norm.ppf(1 - alpha / (2 * n_tests))
    for k, name in enumerate(STATS):
        f, c = forward[:, k], chain[:, k]
        for p in probs:
            t = np.quantile(f, p)
            fi = (f <= t).astype(float)
            ci = (c <= t).astype(float)
            se = np.sqrt(fi.var(ddof=1) / len(fi) + batch_means_se(ci) ** 2)
            z = (ci.mean() - fi.mean()) / se if se > 0 else 0.0
            rows.append({"stat": name, "p": p, "forward": fi.mean(), "gibbs": ci.mean(), "z": z,
                         "pass": bool(abs(z) <= crit)})
    return rows
