"""Random variate generators used by the Gibbs sweep.

Every sampler takes a :class:`numpy.random.Generator`.  :class:`RngStream`
pins the bit generator (PCG64) and derives independent per-chain streams from
``(seed, stream_id)`` via :class:`numpy.random.SeedSequence`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ConfigError, NumericalError

B_EXACT = 200


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & ((1 << 64) - 1), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.PCG64(ss))

    def substream(self, *key: int) -> np.random.Generator:
        """Deterministic child stream, e.g. ``substream(iteration, sample)``."""
        ss = np.random.SeedSequence(entropy=int(self.seed) & ((1 << 64) - 1),
                                    spawn_key=(int(self.stream_id),) + tuple(int(k) for k in key))
        return np.random.Generator(np.random.PCG64(ss))


def cholesky(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor with a single diagonal-jitter retry."""
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    q = A.shape[0]
    jitter = 1e-8 * abs(np.trace(A)) / q
    try:
        return np.linalg.cholesky(A + jitter * np.eye(q))
    except np.linalg.LinAlgError:
        from scipy.linalg import ldl

        _, D, _ = ldl(0.5 * (A + A.T), lower=True)
        piv = float(np.min(np.diag(D)))
        raise NumericalError(f"{what} is not positive definite (smallest pivot {piv:.3g})") from None


def draw_mvn(rng: np.random.Generator, mean, mat, form: str = "covariance") -> np.ndarray:
    """One draw from N(mean, C), with ``mat`` either C or its inverse."""
    mean = np.asarray(mean, dtype=float)
    L = cholesky(mat, form)
    z = rng.standard_normal(mean.shape[0])
    if form == "covariance":
        return mean + L @ z
    if form == "precision":
        # x = L^{-T} z has covariance (L L^T)^{-1}
        from scipy.linalg import solve_triangular

        return mean + solve_triangular(L, z, lower=True, trans="T")
    raise ConfigError(f"unknown form {form!r}")


def draw_matrix_normal(rng: np.random.Generator, mean, row_cov, col_cov, row_chol=None) -> np.ndarray:
    """MN(mean, row_cov, col_cov): vec(X) has covariance col_cov (x) row_cov."""
    mean = np.asarray(mean, dtype=float)
    Lr = cholesky(row_cov, "row covariance") if row_chol is None else row_chol
    Lc = cholesky(col_cov, "column covariance")
    Z = rng.standard_normal(mean.shape)
    return mean + Lr @ Z @ Lc.T


def polya_gamma_moments(b, c):
    """Analytic mean and variance of PG(b, c) (vectorised)."""
    b = np.asarray(b, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    small = c < 1e-4
    cs = np.where(small, 1.0, c)
    mean = np.where(small, b * (0.25 - c**2 / 48.0), b * np.tanh(cs / 2) / (2 * cs))
    ratio = np.where(c < 1e-2, 1.0 / 6.0 + c**2 / 120.0, (np.sinh(cs) - cs) / cs**3)
    var = 0.25 * b * ratio / np.cosh(c / 2) ** 2
    return mean, var


def draw_polya_gamma(rng: np.random.Generator, b, c, b_exact: int = B_EXACT):
    """PG(b, c) draws for integer b >= 0; scalar in, scalar out.

    Exact (sum of b PG(1, c) draws) for b <= b_exact, moment-matched Gaussian
    truncated at zero above.
    """
    b_arr = np.asarray(b)
    if np.any(b_arr < 0):
        raise ConfigError("Polya-Gamma shape must be nonnegative")
    c_arr = np.asarray(c, dtype=float)
    shape = np.broadcast(b_arr, c_arr).shape
    bb = np.ascontiguousarray(np.broadcast_to(b_arr, shape).astype(np.int64))
    cc = np.ascontiguousarray(np.broadcast_to(c_arr, shape))
    out = np.empty(shape)
    K.pg_fill(rng, bb, cc, int(b_exact), out)
    return float(out) if out.ndim == 0 else out


def draw_polya_gamma_approx(rng: np.random.Generator, b, c, size=None):
    """The Gaussian branch alone (used to compare regimes)."""
    mean, var = polya_gamma_moments(b, c)
    out = np.empty(size if size is not None else np.shape(mean))
    flat = out.reshape(-1)
    for i in range(flat.size):
        flat[i] = K.pg_approx(rng, float(b), float(c))
    return out


def _check_gig(p, a, b):
    if not (np.isfinite(p) and np.isfinite(a) and np.isfinite(b)):
        raise NumericalError("GIG parameters must be finite")
    if a < 0 or b < 0:
        raise NumericalError(f"GIG domain error: a={a}, b={b}")
    if (p > 0 and a <= 0) or (p < 0 and b <= 0) or (p == 0 and (a <= 0 or b <= 0)):
        raise NumericalError(f"GIG domain error: p={p}, a={a}, b={b}")


def draw_gig(rng: np.random.Generator, p: float, a: float, b: float, size=None):
    """GIG with density proportional to x^(p-1) exp(-(a x + b / x) / 2)."""
    p, a, b = float(p), float(a), float(b)
    _check_gig(p, a, b)
    n = 1 if size is None else int(np.prod(size))
    if b == 0.0:
        out = rng.gamma(p, 2.0 / a, size=n)
    elif a == 0.0:
        out = 1.0 / rng.gamma(-p, 2.0 / b, size=n)
    else:
        out = np.array([K.gig(rng, p, a, b) for _ in range(n)])
    return float(out[0]) if size is None else out.reshape(size)


def gig_pdf(x, p, a, b):
    """Normalised GIG density (used by quadrature checks)."""
    from scipy.special import kve

    x = np.asarray(x, dtype=float)
    omega = np.sqrt(a * b)
    # kve(p, w) = K_p(w) * exp(w)
    log_norm = (p / 2) * np.log(a / b) - np.log(2 * kve(p, omega)) + omega
    with np.errstate(divide="ignore"):
        return np.exp(log_norm + (p - 1) * np.log(x) - 0.5 * (a * x + b / x))


def draw_inverse_gaussian(rng: np.random.Generator, mean, shape, size=None):
    """Inverse-Gaussian(mean, shape) by the Michael-Schucany-Haas transform."""
    mean = np.asarray(mean, dtype=float)
    shape = np.asarray(shape, dtype=float)
    if np.any(mean <= 0) or np.any(shape <= 0):
        raise ConfigError("inverse-Gaussian parameters must be positive")
    out_shape = np.broadcast(mean, shape).shape if size is None else size
    mu = np.broadcast_to(mean, out_shape)
    lam = np.broadcast_to(shape, out_shape)
    y = rng.standard_normal(out_shape) ** 2
    r = mu * y / (2.0 * lam)
    # x = mu (1 + r - sqrt(r^2 + 2r)), written without cancellation
    x = mu / (1.0 + r + np.sqrt(r * r + 2.0 * r))
    u = rng.random(out_shape)
    x = np.where(u <= mu / (mu + x), x, mu * mu / x)
    return float(x) if np.ndim(x) == 0 else x


def draw_gamma(rng: np.random.Generator, shape, rate, size=None):
    shape = np.asarray(shape, dtype=float)
    rate = np.asarray(rate, dtype=float)
    if np.any(shape <= 0) or np.any(rate <= 0):
        raise ConfigError("gamma shape and rate must be positive")
    return rng.gamma(shape, 1.0 / rate, size=size)


def draw_inverse_gamma(rng: np.random.Generator, shape, scale, size=None):
    """IG(shape, scale): 1/X ~ Gamma(shape, rate=scale)."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise ConfigError("inverse-gamma shape and scale must be positive")
    return 1.0 / rng.gamma(shape, 1.0 / scale, size=size)
