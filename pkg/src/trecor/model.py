"""Parameter containers, the covariance function and prior densities."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class Hyper:
    v: float = 1.0
    s: float = 0.01
    a_nu: float = 5.0
    b_nu: float = 0.5
    a_omega: float = 5.0
    b_omega: float = 0.5


@dataclass(frozen=True)
class Design:
    X: np.ndarray
    covariate_names: tuple[str, ...] = ()
    intercept: bool = True

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if not np.all(np.isfinite(X)):
            raise ConfigError("design matrix has non-finite entries")
        if self.intercept and not np.allclose(X[:, 0], 1.0):
            raise ConfigError("first design column must be the intercept (all ones)")
        object.__setattr__(self, "X", X)
        if not self.covariate_names:
            names = ("intercept",) + tuple(f"x{j}" for j in range(1, X.shape[1])) if self.intercept \
                else tuple(f"x{j}" for j in range(X.shape[1]))
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def intercept_only(self) -> "Design":
        return Design(self.X[:, :1], self.covariate_names[:1], self.intercept)


@dataclass(frozen=True)
class ModelParams:
    """One full parameter state.

    ``B`` has shape ``(R + 1, q, d)``; ``B[0]`` holds the mean coefficients.
    ``tau`` stores the normal-mixture variances of the off-diagonal entries of
    ``Sigma`` (diagonal entries are unused).
    """

    Sigma: np.ndarray
    B: np.ndarray
    tau: np.ndarray
    lam: float
    nu: np.ndarray
    omega: np.ndarray
    hyper: Hyper = field(default_factory=Hyper)

    @property
    def q(self) -> int:
        return self.Sigma.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[2]

    @property
    def R(self) -> int:
        return self.B.shape[0] - 1

    @property
    def B0(self) -> np.ndarray:
        return self.B[0]

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class LatentState:
    phi: np.ndarray
    gamma: np.ndarray
    g: np.ndarray


def default_params(q: int, d: int, R: int, hyper: Hyper | None = None) -> ModelParams:
    return ModelParams(np.eye(q), np.zeros((R + 1, q, d)), np.ones((q, q)), 1.0,
                       np.ones(d), np.ones(d), hyper or Hyper())


# --------------------------------------------------------------------------
# covariance function and effect sizes


def covariance_at(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    L = params.B[1:] @ x  # (R, q)
    return params.Sigma + L.T @ L


def covariate_cov_effect(params: ModelParams, j: int) -> float:
    """Frobenius norm of (b_j1, ..., b_jR); ``j`` is a 0-based column index."""
    if not 0 <= j < params.d:
        raise ConfigError(f"covariate index {j} out of range")
    return float(np.linalg.norm(params.B[1:, :, j]))


def covariate_mean_effect(params: ModelParams, j: int) -> float:
    """Squared Euclidean norm of column ``j`` of B_0."""
    if not 0 <= j < params.d:
        raise ConfigError(f"covariate index {j} out of range")
    return float(np.sum(params.B[0, :, j] ** 2))


def effect_sizes(B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean (||b_j0||^2) and covariance (||B^(j)||_F) effects for stacked draws ``(..., R+1, q, d)``."""
    mean_eff = np.sum(B[..., 0, :, :] ** 2, axis=-2)
    cov_eff = np.sqrt(np.sum(B[..., 1:, :, :] ** 2, axis=(-3, -2)))
    return mean_eff, cov_eff


# --------------------------------------------------------------------------
# likelihood at the latent Gaussian layer


def latent_layer_loglik(params: ModelParams, x, phi) -> float:
    x = np.asarray(x, dtype=float)
    return float(latent_loglik_rows(params.Sigma, params.B, x[None, :], np.asarray(phi, dtype=float)[None, :])[0])


def latent_loglik_rows(Sigma, B, X, Phi, Sigma_chol=None) -> np.ndarray:
    """log N(phi_i; B_0 x_i, Sigma + sum_r B_r x_i x_i^T B_r^T) for every row.

    The rank-R part is handled with the determinant lemma and Woodbury so the
    only q^3 work is one Cholesky of Sigma.
    """
    from scipy.linalg import solve_triangular

    q = Sigma.shape[0]
    L = np.linalg.cholesky(Sigma) if Sigma_chol is None else Sigma_chol
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    resid = Phi - X @ B[0].T  # (n, q)
    Rk = B.shape[0] - 1
    # whitened residuals and loadings
    wr = solve_triangular(L, resid.T, lower=True)  # (q, n)
    quad = np.sum(wr * wr, axis=0)
    if Rk == 0:
        return -0.5 * (q * LOG_2PI + logdet + quad)
    loads = np.einsum("rqd,nd->nqr", B[1:], X)  # (n, q, R)
    n = X.shape[0]
    wl = solve_triangular(L, loads.transpose(1, 0, 2).reshape(q, n * Rk), lower=True).reshape(q, n, Rk)
    M = np.eye(Rk)[None] + np.einsum("qnr,qns->nrs", wl, wl)  # I + L^T Sigma^-1 L
    t = np.einsum("qnr,qn->nr", wl, wr)
    if Rk == 1:
        m = M[:, 0, 0]
        logdet_m = np.log(m)
        corr = t[:, 0] ** 2 / m
    else:
        Lm = np.linalg.cholesky(M)
        logdet_m = 2.0 * np.sum(np.log(np.diagonal(Lm, axis1=1, axis2=2)), axis=1)
        sol = np.linalg.solve(M, t[..., None])[..., 0]
        corr = np.sum(t * sol, axis=1)
    return -0.5 * (q * LOG_2PI + logdet + logdet_m + quad - corr)


# --------------------------------------------------------------------------
# prior


def _inv_gamma_logpdf(x, a, b):
    return a * np.log(b) - gammaln(a) - (a + 1) * np.log(x) - b / x


def _matrix_normal_logpdf(Bm, Sigma_inv, logdet_sigma, col_var):
    q, d = Bm.shape
    tr = np.sum((Sigma_inv @ Bm) * Bm / col_var[None, :])
    return -0.5 * (q * d * LOG_2PI + d * logdet_sigma + q * np.sum(np.log(col_var)) + tr)


def prior_logdensity(params: ModelParams) -> float:
    """Joint prior log density, dropping the C_tau constant that cancels.

    Off-diagonal entries enter through their normal scale mixture
    sigma_kl | tau_kl ~ N(0, tau_kl), diagonal entries are Exp(lambda/2),
    tau_kl ~ Exp(lambda^2/2) and lambda ~ Gamma(v, s).
    """
    h = params.hyper
    S = params.Sigma
    q = params.q
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return -np.inf
    lam = params.lam
    iu = np.triu_indices(q, 1)
    sig = S[iu]
    tau = params.tau[iu]
    lp = np.sum(-0.5 * (LOG_2PI + np.log(tau)) - sig**2 / (2 * tau))
    lp += np.sum(np.log(lam / 2) - lam * np.diag(S) / 2)
    lp += np.sum(np.log(lam**2 / 2) - lam**2 * tau / 2)
    lp += h.v * np.log(h.s) - gammaln(h.v) + (h.v - 1) * np.log(lam) - h.s * lam
    Sinv = np.linalg.inv(S)
    logdet = 2 * np.sum(np.log(np.diag(L)))
    lp += _matrix_normal_logpdf(params.B[0], Sinv, logdet, params.omega)
    for r in range(1, params.R + 1):
        lp += _matrix_normal_logpdf(params.B[r], Sinv, logdet, params.nu)
    lp += np.sum(_inv_gamma_logpdf(params.nu, h.a_nu, h.b_nu))
    lp += np.sum(_inv_gamma_logpdf(params.omega, h.a_omega, h.b_omega))
    return float(lp)


# --------------------------------------------------------------------------
# persistence


def params_schema(params: ModelParams) -> dict:
    return {
        "dims": {"q": params.q, "d": params.d, "R": params.R},
        "hyper": asdict(params.hyper),
        "lambda": float(params.lam),
        "nu": params.nu.tolist(),
        "omega": params.omega.tolist(),
    }


def save_params(params: ModelParams, outdir: str | os.PathLike) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "params.json"), "w") as fh:
        json.dump(params_schema(params), fh, indent=2)
    np.savetxt(os.path.join(outdir, "Sigma.csv"), params.Sigma, delimiter=",")
    np.savetxt(os.path.join(outdir, "tau.csv"), params.tau, delimiter=",")
    for r in range(params.R + 1):
        np.savetxt(os.path.join(outdir, f"B{r}.csv"), params.B[r], delimiter=",")


def load_params(indir: str | os.PathLike) -> ModelParams:
    with open(os.path.join(indir, "params.json")) as fh:
        meta = json.load(fh)
    dims = meta["dims"]
    B = np.stack([np.loadtxt(os.path.join(indir, f"B{r}.csv"), delimiter=",", ndmin=2)
                  for r in range(dims["R"] + 1)])
    return ModelParams(np.loadtxt(os.path.join(indir, "Sigma.csv"), delimiter=",", ndmin=2), B,
                       np.loadtxt(os.path.join(indir, "tau.csv"), delimiter=",", ndmin=2),
                       meta["lambda"], np.array(meta["nu"]), np.array(meta["omega"]), Hyper(**meta["hyper"]))
