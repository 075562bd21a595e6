"""Conjugate Gibbs sampler for the tree covariance-regression model.

The chain state is a mutable :class:`ChainState` owned by one sweep loop; the
``update_*`` functions each redraw one block from its full conditional in
place.  Stored draws are copies, so every retained :class:`ModelParams` is an
immutable snapshot.

Sweep order: residuals -> S -> Sigma columns -> lambda -> tau -> gamma_r ->
B_r -> B_0 -> nu -> omega -> phi (with g from the previous sweep) -> g.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from . import __version__
from . import _kernels as K
from .draws import DrawWriter, PosteriorDraws
from .errors import ConfigError, NumericalError
from .model import Design, Hyper, ModelParams, latent_loglik_rows
from .phylo import NodeCounts, node_log_odds
from .randdist import B_EXACT, RngStream, cholesky, draw_inverse_gaussian

log = logging.getLogger(__name__)

MODES = ("full", "fixed_phi", "oracle", "no_covariates")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 10000
    burn_in: int = 5000
    thin: int = 5
    rank: int = 3
    hyper: Hyper = field(default_factory=Hyper)
    seed: int = 0
    n_chains: int = 1
    mode: str = "full"
    pseudocount: float = 0.5
    pg_b_exact: int = B_EXACT
    init_jitter: float = 0.5
    chunk_size: int = 200
    store_binomial_loglik: bool = False

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            object.__setattr__(self, "hyper", Hyper(**self.hyper))
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations:
            raise ConfigError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.rank < 0:
            raise ConfigError("rank must be >= 0")
        if self.pseudocount <= 0:
            raise ConfigError("pseudocount must be positive")

    @property
    def effective_rank(self) -> int:
        return 0 if self.mode == "no_covariates" else self.rank

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def data_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if a is None:
            continue
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# chain state


@dataclass
class ChainState:
    Sigma: np.ndarray
    Omega: np.ndarray
    B: np.ndarray  # (R+1, q, d)
    tau: np.ndarray
    lam: float
    nu: np.ndarray
    omega: np.ndarray
    gamma: np.ndarray  # (n, R)
    phi: np.ndarray  # (n, q)
    g: np.ndarray  # (n, q)
    hyper: Hyper = field(default_factory=Hyper)
    chol: np.ndarray | None = None

    @property
    def R(self) -> int:
        return self.B.shape[0] - 1

    def params(self) -> ModelParams:
        return ModelParams(self.Sigma.copy(), self.B.copy(), self.tau.copy(), float(self.lam),
                           self.nu.copy(), self.omega.copy(), self.hyper)

    def refresh_inverse(self, what: str = "Sigma") -> None:
        self.Sigma = 0.5 * (self.Sigma + self.Sigma.T)
        L = cholesky(self.Sigma, what)
        self.chol = L
        Li = solve_triangular(L, np.eye(L.shape[0]), lower=True)
        self.Omega = Li.T @ Li


def _loadings(B: np.ndarray, X: np.ndarray) -> np.ndarray:
    """B_r x_i for every r >= 1 and sample; shape (R, n, q)."""
    return np.einsum("rqd,nd->rnq", B[1:], X)


def conditional_mean(state: ChainState, X: np.ndarray) -> np.ndarray:
    """mu_i = B_0 x_i + sum_r gamma_ir B_r x_i, shape (n, q)."""
    mu = X @ state.B[0].T
    if state.R:
        mu += np.einsum("nr,rnq->nq", state.gamma, _loadings(state.B, X))
    return mu


def sufficient_stat(state: ChainState, X: np.ndarray) -> np.ndarray:
    """S = sum_i res_i res_i^T + sum_r B_r D_nu^-1 B_r^T + B_0 D_omega^-1 B_0^T."""
    res = state.phi - conditional_mean(state, X)
    S = res.T @ res
    B0 = state.B[0]
    S += (B0 / state.omega) @ B0.T
    for r in range(1, state.R + 1):
        S += (state.B[r] / state.nu) @ state.B[r].T
    return 0.5 * (S + S.T)


# --------------------------------------------------------------------------
# block updates


def update_sigma_block(state: ChainState, S: np.ndarray, n: int, rng: np.random.Generator) -> None:
    """Column-wise redraw of Sigma given S, tau, lambda (Omega kept in sync)."""
    q = state.Sigma.shape[0]
    d = state.B.shape[2]
    m = n + d * (state.R + 1)
    if q == 1:
        from .randdist import draw_gig

        u = draw_gig(rng, 1.0 - 0.5 * m, state.lam, max(S[0, 0], 1e-300))
        state.Sigma[0, 0] = u
    else:
        fail = K.sigma_sweep(rng, state.Sigma, state.Omega, np.ascontiguousarray(S), state.tau, float(state.lam), float(m))
        if fail >= 0:
            raise NumericalError(f"Sigma column {fail} update failed after jitter retry", stage="sigma-block")
    state.refresh_inverse("Sigma")


def update_lambda(state: ChainState, rng: np.random.Generator) -> None:
    """lambda | Sigma with tau integrated out."""
    h = state.hyper
    q = state.Sigma.shape[0]
    shape = h.v + q * (q + 1) / 2
    rate = h.s + 0.5 * np.abs(state.Sigma).sum()
    state.lam = float(rng.gamma(shape, 1.0 / rate))


def update_tau(state: ChainState, rng: np.random.Generator) -> None:
    q = state.Sigma.shape[0]
    if q == 1:
        return
    iu = np.triu_indices(q, 1)
    a = np.maximum(np.abs(state.Sigma[iu]), 1e-300)
    inv_tau = draw_inverse_gaussian(rng, state.lam / a, state.lam**2)
    tau = np.ones((q, q))
    tau[iu] = 1.0 / np.atleast_1d(inv_tau)
    tau.T[iu] = tau[iu]
    state.tau = tau


def update_gamma(state: ChainState, X: np.ndarray, rng: np.random.Generator) -> None:
    """gamma_ir, sequentially over r, vectorised over samples."""
    R = state.R
    if R == 0:
        return
    Lr = _loadings(state.B, X)  # (R, n, q)
    W = state.phi - X @ state.B[0].T - np.einsum("nr,rnq->nq", state.gamma, Lr)
    for r in range(R):
        W += state.gamma[:, r, None] * Lr[r]  # remove component r
        LO = Lr[r] @ state.Omega
        s = 1.0 + np.einsum("nq,nq->n", LO, Lr[r])
        mean = np.einsum("nq,nq->n", LO, W) / s
        state.gamma[:, r] = mean + rng.standard_normal(W.shape[0]) / np.sqrt(s)
        W -= state.gamma[:, r, None] * Lr[r]


def _mn_regression(state: ChainState, W: np.ndarray, Z: np.ndarray, prior_prec: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw B ~ MN((W^T Z) Sz^{-1}, Sigma, Sz^{-1}) with Sz = Z^T Z + diag(prior_prec)."""
    Sz = Z.T @ Z + np.diag(prior_prec)
    Lz = cholesky(Sz, "coefficient precision")
    M = solve_triangular(Lz, (W.T @ Z).T, lower=True)
    M = solve_triangular(Lz, M, lower=True, trans="T").T  # (q, d)
    E = rng.standard_normal(M.shape)
    # column covariance Sz^{-1}: right-multiply by Lz^{-1} (E Lz^{-1} has cov Sz^{-1} per row)
    E = solve_triangular(Lz, E.T, lower=True, trans="T").T
    Ls = state.chol if state.chol is not None else cholesky(state.Sigma, "Sigma")
    return M + Ls @ E


def update_Br(state: ChainState, X: np.ndarray, rng: np.random.Generator) -> None:
    R = state.R
    if R == 0:
        return
    Lr = _loadings(state.B, X)
    W = state.phi - X @ state.B[0].T - np.einsum("nr,rnq->nq", state.gamma, Lr)
    for r in range(1, R + 1):
        gr = state.gamma[:, r - 1]
        W += gr[:, None] * Lr[r - 1]
        state.B[r] = _mn_regression(state, W, gr[:, None] * X, 1.0 / state.nu, rng)
        Lr[r - 1] = X @ state.B[r].T
        W -= gr[:, None] * Lr[r - 1]


def update_B0(state: ChainState, X: np.ndarray, rng: np.random.Generator) -> None:
    W = state.phi.copy()
    if state.R:
        W -= np.einsum("nr,rnq->nq", state.gamma, _loadings(state.B, X))
    state.B[0] = _mn_regression(state, W, X, 1.0 / state.omega, rng)


def update_scales(state: ChainState, rng: np.random.Generator) -> None:
    """nu_j and omega_j from their inverse-gamma conditionals."""
    h = state.hyper
    q = state.Sigma.shape[0]
    R = state.R
    OB0 = state.Omega @ state.B[0]
    quad0 = np.einsum("qd,qd->d", state.B[0], OB0)
    state.omega = 1.0 / rng.gamma(h.a_omega + q / 2, 1.0 / (h.b_omega + 0.5 * quad0))
    if R:
        quad = sum(np.einsum("qd,qd->d", state.B[r], state.Omega @ state.B[r]) for r in range(1, R + 1))
        state.nu = 1.0 / rng.gamma(h.a_nu + q * R / 2, 1.0 / (h.b_nu + 0.5 * quad))
    else:
        state.nu = 1.0 / rng.gamma(h.a_nu, 1.0 / h.b_nu, size=state.nu.shape)


def update_phi(state: ChainState, X: np.ndarray, nodes: NodeCounts, rng: np.random.Generator) -> None:
    mu = conditional_mean(state, X)
    kappa = nodes.y - 0.5 * nodes.N
    out = np.empty_like(state.phi)
    fail = K.phi_sweep(rng, state.Omega, np.ascontiguousarray(mu @ state.Omega), state.g,
                       np.ascontiguousarray(kappa, dtype=float), out)
    if fail >= 0:
        raise NumericalError(f"phi precision not PD for sample {fail}", stage="phi")
    state.phi = out


def update_pg(state: ChainState, nodes: NodeCounts, rng: np.random.Generator, b_exact: int = B_EXACT) -> None:
    out = np.empty_like(state.phi)
    K.pg_fill(rng, np.ascontiguousarray(nodes.N, dtype=np.int64), np.ascontiguousarray(state.phi), int(b_exact), out)
    state.g = out


def sweep(state: ChainState, X: np.ndarray, rng: np.random.Generator, nodes: NodeCounts | None = None,
          update_latent: bool = True, b_exact: int = B_EXACT) -> None:
    """One full Gibbs scan."""
    S = sufficient_stat(state, X)
    update_sigma_block(state, S, X.shape[0], rng)
    update_lambda(state, rng)
    update_tau(state, rng)
    update_gamma(state, X, rng)
    update_Br(state, X, rng)
    update_B0(state, X, rng)
    update_scales(state, rng)
    if update_latent:
        update_phi(state, X, nodes, rng)
        update_pg(state, nodes, rng, b_exact)


# --------------------------------------------------------------------------
# chains


def initial_state(phi0: np.ndarray, X: np.ndarray, R: int, hyper: Hyper, rng: np.random.Generator,
                  nodes: NodeCounts | None = None, b_exact: int = B_EXACT) -> ChainState:
    n, q = phi0.shape
    d = X.shape[1]
    # Non-intercept coefficients start from their prior given Sigma = I and
    # unit scales.  Starting them at zero would leave the first scatter matrix
    # with rank <= n + 1 and make the first Sigma draw degenerate when q > n + 1.
    B = rng.standard_normal((R + 1, q, d))
    B[0, :, 0] = phi0.mean(axis=0)
    st = ChainState(Sigma=np.eye(q), Omega=np.eye(q), B=B, tau=np.ones((q, q)), lam=1.0,
                    nu=np.ones(d), omega=np.ones(d), gamma=rng.standard_normal((n, R)),
                    phi=phi0.copy(), g=np.zeros((n, q)), hyper=hyper, chol=np.eye(q))
    if nodes is not None:
        update_pg(st, nodes, rng, b_exact)
    return st


def _check_finite(state: ChainState, it: int) -> None:
    for name in ("Sigma", "B", "phi", "g", "gamma", "tau", "nu", "omega"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise NumericalError(f"non-finite {name} at iteration {it}", stage="gibbs")
    if not np.isfinite(state.lam):
        raise NumericalError(f"non-finite lambda at iteration {it}", stage="gibbs")


def _binomial_loglik(nodes: NodeCounts, phi: np.ndarray) -> np.ndarray:
    from scipy.special import gammaln

    N, y = nodes.N, nodes.y
    logc = gammaln(N + 1) - gammaln(y + 1) - gammaln(N - y + 1)
    # y log p + (N - y) log(1 - p) with p = logistic(phi)
    ll = logc + y * phi - N * np.logaddexp(0.0, phi)
    return ll.sum(axis=1)


def run_chain(config: FitConfig, nodes: NodeCounts | None, design: Design, chain: int = 0,
              phi_true: np.ndarray | None = None, outdir: str | None = None,
              progress: bool = False) -> PosteriorDraws:
    """Run one chain and return its thinned post-burn-in draws."""
    mode = config.mode
    X = design.X
    if mode == "no_covariates":
        X = X[:, :1]
    R = config.effective_rank
    if mode == "oracle":
        if phi_true is None:
            raise ConfigError("mode 'oracle' requires the true latent balances", stage="fit")
        phi0 = np.asarray(phi_true, dtype=float)
    else:
        if nodes is None:
            raise ConfigError(f"mode {mode!r} requires node counts", stage="fit")
        phi0 = node_log_odds(nodes, config.pseudocount)
    n, q = phi0.shape
    if X.shape[0] != n:
        raise ConfigError(f"design has {X.shape[0]} rows but data has {n} samples", stage="fit")
    if nodes is not None and nodes.N.shape != (n, q):
        raise ConfigError("node counts and latent balances disagree in shape", stage="fit")
    m = n + X.shape[1] * (R + 1)
    if q > m:
        raise ConfigError(f"q={q} internal nodes exceed n + d(R+1) = {m}; the scatter matrix behind the Sigma "
                          "update is then rank-deficient and its conditional collapses onto singular matrices. "
                          "Use more samples, fewer taxa, or a larger design/rank", stage="fit")

    stream = RngStream(config.seed, chain)
    rng = stream.generator()
    latent = mode == "full"
    if latent and chain > 0 and config.init_jitter > 0:
        phi0 = phi0 + config.init_jitter * rng.standard_normal(phi0.shape)
    state = initial_state(phi0, X, R, config.hyper, rng, nodes if latent else None, config.pg_b_exact)

    dh = data_hash(None if nodes is None else nodes.N, None if nodes is None else nodes.y, X, phi_true)
    writer = DrawWriter(outdir, config.chunk_size)
    ll_rows, llb_rows = [], []
    phi_sum = np.zeros((n, q))
    phi_sq = np.zeros((n, q))
    gam_sum = np.zeros((n, R))
    gam_sq = np.zeros((n, R))
    t0 = time.perf_counter()
    for it in range(config.iterations):
        sweep(state, X, rng, nodes, latent, config.pg_b_exact)
        _check_finite(state, it)
        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            writer.append(state.Sigma, state.B, state.tau, state.lam, state.nu, state.omega)
            ll_rows.append(latent_loglik_rows(state.Sigma, state.B, X, state.phi, state.chol))
            if latent and config.store_binomial_loglik:
                llb_rows.append(_binomial_loglik(nodes, state.phi))
            phi_sum += state.phi
            phi_sq += state.phi**2
            gam_sum += state.gamma
            gam_sq += state.gamma**2
        if progress and (it + 1) % max(1, config.iterations // 10) == 0:
            log.info("chain %d: %d/%d sweeps (%.1fs)", chain, it + 1, config.iterations, time.perf_counter() - t0)
    elapsed = time.perf_counter() - t0
    S = max(writer.n_draws, 1)
    summary = {
        "loglik": np.array(ll_rows).reshape(len(ll_rows), n),
        "phi_mean": phi_sum / S,
        "phi_var": phi_sq / S - (phi_sum / S) ** 2,
        "gamma_mean": gam_sum / S,
        "gamma_var": gam_sq / S - (gam_sum / S) ** 2,
        "X": X,
    }
    if llb_rows:
        summary["loglik_binomial"] = np.array(llb_rows)
    manifest = {
        "dims": {"n": n, "q": q, "d": X.shape[1], "R": R},
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "data_hash": dh,
        "seed": config.seed,
        "chain": chain,
        "mode": mode,
        "covariate_names": list(design.covariate_names[: X.shape[1]]),
        "version": __version__,
        "seconds": elapsed,
        "seconds_per_iteration": elapsed / config.iterations,
        "chunk_size": config.chunk_size,
    }
    return PosteriorDraws.from_writer(writer, manifest, summary)


def run_chains(config: FitConfig, nodes, design, phi_true=None, outdir: str | None = None,
               progress: bool = False) -> list[PosteriorDraws]:
    import os

    out = []
    for c in range(config.n_chains):
        sub = None if outdir is None else os.path.join(outdir, f"chain_{c}")
        out.append(run_chain(config, nodes, design, c, phi_true, sub, progress))
    return out


def with_rank(config: FitConfig, R: int, seed_offset: int = 0) -> FitConfig:
    return replace(config, rank=R, seed=config.seed + seed_offset)
