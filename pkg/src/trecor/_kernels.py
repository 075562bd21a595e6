"""Compiled inner loops.  All randomness comes from a numpy Generator passed in."""
import math

import numba as nb
import numpy as np

_PI = math.pi
_TRUNC = 0.64
_LOG_HALF_PI = math.log(0.5 * math.pi)
_SQRT2 = math.sqrt(2.0)


@nb.njit(cache=True)
def log_ndtr(x):
    if x > -30.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    # asymptotic tail, relative error < 1e-3 here
    return -0.5 * x * x - math.log(-x) - 0.5 * math.log(2.0 * _PI) + math.log1p(-1.0 / (x * x))


# --------------------------------------------------------------------------
# Polya-Gamma


@nb.njit(cache=True)
def _pg_coef(n, x):
    k = (n + 0.5) * _PI
    if x > _TRUNC:
        return k * math.exp(-0.5 * k * k * x)
    if x <= 0.0:
        return 0.0
    return math.exp(-1.5 * (_LOG_HALF_PI + math.log(x)) + math.log(k) - 2.0 * (n + 0.5) * (n + 0.5) / x)


@nb.njit(cache=True)
def _pg_mass_texpon(z):
    t = _TRUNC
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    b = math.sqrt(1.0 / t) * (t * z - 1.0)
    a = -math.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = math.log(fz) + fz * t
    xb = x0 - z + log_ndtr(b)
    xa = x0 + z + log_ndtr(a)
    qdivp = 4.0 / _PI * (math.exp(xb) + math.exp(xa))
    return 1.0 / (1.0 + qdivp)


@nb.njit(cache=True)
def _pg_tigauss(rng, z):
    """Inverse-Gaussian(1/z, 1) truncated to (0, TRUNC)."""
    r = _TRUNC
    x = r + 1.0
    if z < 1.0 / r:
        alpha = 0.0
        while rng.random() > alpha:
            e1 = rng.standard_exponential()
            e2 = rng.standard_exponential()
            while e1 * e1 > 2.0 * e2 / r:
                e1 = rng.standard_exponential()
                e2 = rng.standard_exponential()
            x = r / ((1.0 + r * e1) * (1.0 + r * e1))
            alpha = math.exp(-0.5 * z * z * x)
    else:
        mu = 1.0 / z
        while x > r:
            yy = rng.standard_normal()
            yy = yy * yy
            x = mu + 0.5 * mu * mu * yy - 0.5 * mu * math.sqrt(4.0 * mu * yy + (mu * yy) * (mu * yy))
            if rng.random() > mu / (mu + x):
                x = mu * mu / x
    return x


@nb.njit(cache=True)
def _pg1_core(rng, z, fz, p_exp):
    while True:
        if rng.random() < p_exp:
            x = _TRUNC + rng.standard_exponential() / fz
        else:
            x = _pg_tigauss(rng, z)
        s = _pg_coef(0, x)
        yv = rng.random() * s
        n = 0
        while True:
            n += 1
            if n % 2 == 1:
                s -= _pg_coef(n, x)
                if yv <= s:
                    return 0.25 * x
            else:
                s += _pg_coef(n, x)
                if yv > s:
                    break


@nb.njit(cache=True)
def pg1(rng, c):
    """One exact PG(1, c) draw (Devroye-type alternating series)."""
    z = 0.5 * abs(c)
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    return _pg1_core(rng, z, fz, _pg_mass_texpon(z))


@nb.njit(cache=True)
def pg_moments(b, c):
    """Mean and variance of PG(b, c)."""
    c = abs(c)
    if c < 1e-4:
        c2 = c * c
        return b * (0.25 - c2 / 48.0), b * (1.0 / 24.0 - c2 / 240.0)
    mean = b * math.tanh(0.5 * c) / (2.0 * c)
    ch = math.cosh(0.5 * c)
    if c < 1e-2:
        ratio = 1.0 / 6.0 + c * c / 120.0
    else:
        ratio = (math.sinh(c) - c) / (c * c * c)
    var = 0.25 * b * ratio / (ch * ch)
    return mean, var


@nb.njit(cache=True)
def pg_approx(rng, b, c):
    mean, var = pg_moments(b, c)
    sd = math.sqrt(var)
    while True:
        x = mean + sd * rng.standard_normal()
        if x > 0.0:
            return x


@nb.njit(cache=True)
def pg(rng, b, c, b_exact):
    if b <= 0:
        return 0.0
    if b > b_exact:
        return pg_approx(rng, b, c)
    z = 0.5 * abs(c)
    fz = 0.125 * _PI * _PI + 0.5 * z * z
    p_exp = _pg_mass_texpon(z)
    acc = 0.0
    for _ in range(b):
        acc += _pg1_core(rng, z, fz, p_exp)
    return acc


@nb.njit(cache=True)
def pg_fill(rng, b, c, b_exact, out):
    flat_b = b.ravel()
    flat_c = c.ravel()
    flat_o = out.ravel()
    for i in range(flat_b.size):
        flat_o[i] = pg(rng, flat_b[i], flat_c[i], b_exact)


# --------------------------------------------------------------------------
# generalized inverse Gaussian, density x^(p-1) exp(-(a x + b / x) / 2)


@nb.njit(cache=True)
def _gig_mode(lam, omega):
    if lam >= 1.0:
        return (math.sqrt((lam - 1.0) * (lam - 1.0) + omega * omega) + (lam - 1.0)) / omega
    return omega / (math.sqrt((1.0 - lam) * (1.0 - lam) + omega * omega) + (1.0 - lam))


@nb.njit(cache=True)
def _gig_rou_shift(rng, lam, omega):
    t = 0.5 * (lam - 1.0)
    s = 0.25 * omega
    xm = _gig_mode(lam, omega)
    nc = t * math.log(xm) - s * (xm + 1.0 / xm)
    # roots of the cubic bounding the shifted region
    a = -(2.0 * (lam + 1.0) / omega + xm)
    b = 2.0 * (lam - 1.0) * xm / omega - 1.0
    c = xm
    p = b - a * a / 3.0
    q = (2.0 * a * a * a) / 27.0 - (a * b) / 3.0 + c
    fi = math.acos(max(-1.0, min(1.0, -q / (2.0 * math.sqrt(-(p * p * p) / 27.0)))))
    fak = 2.0 * math.sqrt(-p / 3.0)
    y1 = fak * math.cos(fi / 3.0) - a / 3.0
    y2 = fak * math.cos(fi / 3.0 + 4.0 / 3.0 * _PI) - a / 3.0
    uplus = (y1 - xm) * math.exp(t * math.log(y1) - s * (y1 + 1.0 / y1) - nc)
    uminus = (y2 - xm) * math.exp(t * math.log(y2) - s * (y2 + 1.0 / y2) - nc)
    while True:
        u = uminus + rng.random() * (uplus - uminus)
        v = rng.random()
        x = u / v + xm
        if x <= 0.0:
            continue
        if math.log(v) <= t * math.log(x) - s * (x + 1.0 / x) - nc:
            return x


@nb.njit(cache=True)
def _gig_rou_noshift(rng, lam, omega):
    t = 0.5 * (lam - 1.0)
    s = 0.25 * omega
    xm = _gig_mode(lam, omega)
    nc = t * math.log(xm) - s * (xm + 1.0 / xm)
    ym = ((lam + 1.0) + math.sqrt((lam + 1.0) * (lam + 1.0) + omega * omega)) / omega
    um = math.exp(0.5 * (lam + 1.0) * math.log(ym) - s * (ym + 1.0 / ym) - nc)
    while True:
        u = um * rng.random()
        v = rng.random()
        x = u / v
        if x > 0.0 and math.log(v) <= t * math.log(x) - s * (x + 1.0 / x) - nc:
            return x


@nb.njit(cache=True)
def _gig_small(rng, lam, omega):
    """Rejection for 0 <= lam < 1 and small omega (non T-concave region)."""
    x0 = omega / (1.0 - lam)
    xm = _gig_mode(lam, omega)
    k0 = math.exp((lam - 1.0) * math.log(xm) - 0.5 * omega * (xm + 1.0 / xm))
    a0 = k0 * x0
    if x0 >= 2.0 / omega:
        k1 = 0.0
        a1 = 0.0
        k2 = x0 ** (lam - 1.0)
        xs = x0
    else:
        k1 = math.exp(-omega)
        if lam > 0.0:
            a1 = k1 * ((2.0 / omega) ** lam - x0 ** lam) / lam
        else:
            a1 = k1 * math.log(2.0 / (omega * omega))
        k2 = (2.0 / omega) ** (lam - 1.0)
        xs = 2.0 / omega
    a2 = k2 * 2.0 * math.exp(-xs * omega / 2.0) / omega
    atot = a0 + a1 + a2
    while True:
        v = atot * rng.random()
        if v <= a0:
            x = x0 * v / a0
            h = k0
        elif v <= a0 + a1:
            v -= a0
            if lam > 0.0:
                x = (x0 ** lam + v * lam / k1) ** (1.0 / lam)
            else:
                x = omega * math.exp(v * math.exp(omega))
            h = k1 * x ** (lam - 1.0)
        else:
            v -= a0 + a1
            x = -2.0 / omega * math.log(math.exp(-xs * omega / 2.0) - v * omega / (2.0 * k2))
            h = k2 * math.exp(-0.5 * omega * x)
        u = rng.random() * h
        if x > 0.0 and math.log(u) <= (lam - 1.0) * math.log(x) - 0.5 * omega * (x + 1.0 / x):
            return x


@nb.njit(cache=True)
def gig(rng, p, a, b):
    """GIG(p, a, b) for a > 0, b > 0 (boundary cases handled by the caller)."""
    lam = abs(p)
    omega = math.sqrt(a * b)
    if lam > 1.0 or omega > 1.0:
        x = _gig_rou_shift(rng, lam, omega)
    elif omega >= min(0.5, 2.0 / 3.0 * math.sqrt(1.0 - lam)):
        x = _gig_rou_noshift(rng, lam, omega)
    else:
        x = _gig_small(rng, lam, omega)
    scale = math.sqrt(b / a)
    if p < 0.0:
        return scale / x
    return scale * x


# --------------------------------------------------------------------------
# dense helpers


@nb.njit(cache=True)
def chol_lower(A, out):
    """In-place lower Cholesky factor of A into out; returns False if not PD."""
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return False
        d = math.sqrt(s)
        out[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / d
        for i in range(j):
            out[i, j] = 0.0
    return True


@nb.njit(cache=True)
def chol_jitter(A, out):
    if chol_lower(A, out):
        return True
    n = A.shape[0]
    tr = 0.0
    for i in range(n):
        tr += A[i, i]
    B = A.copy()
    eps = 1e-8 * abs(tr) / n
    for i in range(n):
        B[i, i] += eps
    return chol_lower(B, out)


@nb.njit(cache=True)
def solve_lower(L, b, out):
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]


@nb.njit(cache=True)
def solve_upper_t(L, b, out):
    """Solve L^T x = b for lower-triangular L."""
    n = L.shape[0]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


# --------------------------------------------------------------------------
# column-wise covariance update


@nb.njit(cache=True)
def sigma_sweep(rng, Sigma, Omega, S, tau, lam, m):
    """One pass over the columns of Sigma; Sigma and Omega updated in place.

    Omega must equal inv(Sigma) on entry.  P = Omega S Omega is carried
    through rank-one corrections so each column costs O(q^2) plus one
    (q-1)-dimensional Cholesky factorisation.  Returns -1 on success, else the
    failing column.
    """
    q = Sigma.shape[0]
    P = Omega @ S @ Omega
    p_gig = 1.0 - 0.5 * m
    qm = q - 1
    idx = np.empty(qm, dtype=np.int64)
    H = np.empty((qm, qm))
    Theta = np.empty((qm, qm))
    L = np.empty((qm, qm))
    rhs = np.empty(qm)
    v = np.empty(qm)
    beta = np.empty(qm)
    w = np.empty(qm)
    sk = np.empty(qm)
    for k in range(q):
        pos = 0
        for j in range(q):
            if j != k:
                idx[pos] = j
                pos += 1
        c = Omega[k, k]
        bvec = Omega[:, k].copy()
        Sb = S @ bvec
        h = Omega @ Sb
        bSb = bvec @ Sb
        u_old = 1.0 / c
        for a_ in range(qm):
            ia = idx[a_]
            sk[a_] = S[ia, k]
            for b_ in range(qm):
                ib = idx[b_]
                H[a_, b_] = Omega[ia, ib] - bvec[ia] * bvec[ib] / c
                hsh = P[ia, ib] - (h[ia] * bvec[ib] + bvec[ia] * h[ib]) / c + bvec[ia] * bvec[ib] * bSb / (c * c)
                Theta[a_, b_] = hsh / u_old + lam * H[a_, b_]
            Theta[a_, a_] += 1.0 / tau[ia, k]
        # symmetrise against roundoff before factorising
        for a_ in range(qm):
            for b_ in range(a_):
                avg = 0.5 * (Theta[a_, b_] + Theta[b_, a_])
                Theta[a_, b_] = avg
                Theta[b_, a_] = avg
        if not chol_jitter(Theta, L):
            return k
        for a_ in range(qm):
            acc = 0.0
            for b_ in range(qm):
                acc += H[a_, b_] * sk[b_]
            rhs[a_] = acc / u_old
        solve_lower(L, rhs, v)
        for a_ in range(qm):
            v[a_] += rng.standard_normal()
        solve_upper_t(L, v, beta)
        chi = S[k, k]
        for a_ in range(qm):
            acc = 0.0
            for b_ in range(qm):
                acc += H[a_, b_] * beta[b_]
            w[a_] = acc
            chi -= 2.0 * sk[a_] * acc
        for a_ in range(qm):
            ia = idx[a_]
            acc = 0.0
            for b_ in range(qm):
                acc += S[ia, idx[b_]] * w[b_]
            chi += w[a_] * acc
        if chi < 1e-300:
            chi = 1e-300
        u = gig(rng, p_gig, lam, chi)
        if not (u > 0.0) or not math.isfinite(u):
            return k
        # update Sigma
        bw = 0.0
        for a_ in range(qm):
            ia = idx[a_]
            Sigma[ia, k] = beta[a_]
            Sigma[k, ia] = beta[a_]
            bw += beta[a_] * w[a_]
        Sigma[k, k] = u + bw
        # P <- Omega0 S Omega0 + rank-one terms in a = (-w, 1)
        avec = np.zeros(q)
        for a_ in range(qm):
            avec[idx[a_]] = -w[a_]
        avec[k] = 1.0
        Sa = S @ avec
        bSa = bvec @ Sa
        tvec = Omega @ Sa - bvec * (bSa / c)
        aSa = avec @ Sa
        for i in range(q):
            for j in range(q):
                P[i, j] += (-(h[i] * bvec[j] + bvec[i] * h[j]) / c + bvec[i] * bvec[j] * bSb / (c * c)
                            + (tvec[i] * avec[j] + avec[i] * tvec[j]) / u + avec[i] * avec[j] * aSa / (u * u))
        # Omega <- [[H + w w^T / u, -w / u], [-w^T / u, 1 / u]]
        for a_ in range(qm):
            ia = idx[a_]
            for b_ in range(qm):
                Omega[ia, idx[b_]] = H[a_, b_] + w[a_] * w[b_] / u
            Omega[ia, k] = -w[a_] / u
            Omega[k, ia] = -w[a_] / u
        Omega[k, k] = 1.0 / u
    return -1


# --------------------------------------------------------------------------
# latent balances


@nb.njit(cache=True)
def phi_sweep(rng, Omega, Omega_mu, g, kappa, out):
    """Draw phi_i ~ N(O_i^{-1}(kappa_i + Omega mu_i), O_i^{-1}), O_i = Omega + diag(g_i).

    Returns -1 on success, else the failing sample index.
    """
    n, q = out.shape
    O = np.empty((q, q))
    L = np.empty((q, q))
    rhs = np.empty(q)
    v = np.empty(q)
    x = np.empty(q)
    for i in range(n):
        for a in range(q):
            for b in range(q):
                O[a, b] = Omega[a, b]
            O[a, a] += g[i, a]
            rhs[a] = kappa[i, a] + Omega_mu[i, a]
        if not chol_jitter(O, L):
            return i
        solve_lower(L, rhs, v)
        for a in range(q):
            v[a] += rng.standard_normal()
        solve_upper_t(L, v, x)
        for a in range(q):
            out[i, a] = x[a]
    return -1
