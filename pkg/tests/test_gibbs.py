import numpy as np
import pytest
from scipy import integrate
from scipy.stats import multivariate_normal

from trecor.errors import ConfigError
from trecor.gibbs import (
    ChainState,
    FitConfig,
    initial_state,
    run_chain,
    sufficient_stat,
    update_B0,
    update_Br,
    update_gamma,
    update_lambda,
    update_phi,
    update_pg,
    update_scales,
    update_sigma_block,
)
from trecor.model import Design, Hyper, ModelParams, prior_logdensity
from trecor.phylo import NodeCounts, node_log_odds
from trecor.randdist import polya_gamma_moments


def make_state(rng, q=2, n=5, d=2, R=1, Sigma=None):
    Sigma = np.eye(q) if Sigma is None else np.asarray(Sigma, dtype=float)
    st = ChainState(Sigma=Sigma.copy(), Omega=np.linalg.inv(Sigma), B=rng.normal(size=(R + 1, q, d)),
                    tau=np.ones((q, q)), lam=1.0, nu=np.ones(d), omega=np.ones(d),
                    gamma=rng.normal(size=(n, R)), phi=rng.normal(size=(n, q)), g=np.zeros((n, q)))
    st.refresh_inverse()
    return st


def batch_se(x, nb=50):
    m = x.size // nb
    b = x[: m * nb].reshape(nb, m).mean(axis=1)
    return b.std(ddof=1) / np.sqrt(nb)


def sigma_target_moments(S, m, tau, lam):
    """Posterior moments of (s11, s12, s22) under the q=2 Sigma conditional, by grid quadrature."""
    a = np.linspace(1e-3, 8, 220)
    r = np.linspace(-0.999, 0.999, 221)
    A, Bb, Rr = np.meshgrid(a, a, r, indexing="ij")
    c = Rr * np.sqrt(A * Bb)
    det = A * Bb - c * c
    tr = (S[0, 0] * Bb + S[1, 1] * A - 2 * S[0, 1] * c) / det
    logp = -0.5 * m * np.log(det) - 0.5 * tr - c * c / (2 * tau) - 0.5 * lam * (A + Bb) + 0.5 * np.log(A * Bb)
    w = np.exp(logp - logp.max())
    Z = w.sum()
    return {"s11": (w * A).sum() / Z, "s12": (w * c).sum() / Z, "s22": (w * Bb).sum() / Z}


def test_sigma_block_stationary_q2():
    rng = np.random.default_rng(0)
    st = make_state(rng, q=2, n=10, d=1, R=0)
    S = np.array([[10.0, 3.0], [3.0, 8.0]])
    n = 10  # m = n + d (R + 1) = 11
    draws = np.empty((30000, 3))
    for t in range(30000):
        update_sigma_block(st, S, n, rng)
        assert np.all(np.linalg.eigvalsh(st.Sigma) > 0)
        draws[t] = st.Sigma[0, 0], st.Sigma[0, 1], st.Sigma[1, 1]
    ref = sigma_target_moments(S, 11, 1.0, 1.0)
    for k, name in enumerate(("s11", "s12", "s22")):
        x = draws[1000:, k]
        assert abs(x.mean() - ref[name]) < 4 * batch_se(x), name


def test_sigma_block_keeps_omega_in_sync():
    rng = np.random.default_rng(1)
    st = make_state(rng, q=5, n=20, d=2, R=1)
    S = sufficient_stat(st, np.c_[np.ones(20), rng.normal(size=20)])
    update_sigma_block(st, S, 20, rng)
    assert np.allclose(st.Omega @ st.Sigma, np.eye(5), atol=1e-8)


def test_lambda_conditional_is_gamma():
    rng = np.random.default_rng(2)
    st = make_state(rng, q=3, R=0)
    st.Sigma = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 1.5]])
    h = st.hyper
    draws = []
    for _ in range(50000):
        update_lambda(st, rng)
        draws.append(st.lam)
    shape = h.v + 6
    rate = h.s + 0.5 * np.abs(st.Sigma).sum()
    d = np.array(draws)
    assert abs(d.mean() - shape / rate) < 3 * d.std() / np.sqrt(d.size)


def test_gamma_conditional_quadrature():
    rng = np.random.default_rng(3)
    n = 100000
    st = make_state(rng, q=2, n=n, d=2, R=1, Sigma=[[1.0, 0.4], [0.4, 2.0]])
    x = np.array([1.0, 0.7])
    X = np.tile(x, (n, 1))
    st.phi[:] = np.array([0.3, -1.2])
    st.gamma[:] = 0.0
    update_gamma(st, X, rng)
    g = st.gamma[:, 0]
    mu0 = st.B[0] @ x
    l = st.B[1] @ x
    Om = st.Omega

    def logj(t):
        r = st.phi[0] - mu0 - t * l
        return -0.5 * r @ Om @ r - 0.5 * t * t

    Z = integrate.quad(lambda t: np.exp(logj(t)), -30, 30)[0]
    m1 = integrate.quad(lambda t: t * np.exp(logj(t)), -30, 30)[0] / Z
    m2 = integrate.quad(lambda t: t * t * np.exp(logj(t)), -30, 30)[0] / Z
    var = m2 - m1**2
    assert var <= 1.0
    assert abs(g.mean() - m1) < 3 * np.sqrt(var / n)
    assert abs(g.var() - var) < 3 * var * np.sqrt(2 / n)


def test_gamma_prior_when_no_loading():
    rng = np.random.default_rng(4)
    n = 50000
    st = make_state(rng, q=3, n=n, d=2, R=1)
    st.B[1] = 0.0
    update_gamma(st, np.c_[np.ones(n), rng.normal(size=n)], rng)
    g = st.gamma[:, 0]
    assert abs(g.mean()) < 3 / np.sqrt(n) and abs(g.var() - 1) < 4 * np.sqrt(2 / n)


def test_br_prior_draw_when_gamma_zero():
    rng = np.random.default_rng(5)
    st = make_state(rng, q=2, n=3, d=2, R=1, Sigma=[[2.0, 0.5], [0.5, 1.0]])
    st.nu = np.array([0.5, 3.0])
    st.gamma[:] = 0.0
    X = np.c_[np.ones(3), rng.normal(size=3)]
    draws = []
    for _ in range(20000):
        update_Br(st, X, rng)
        draws.append(st.B[1].copy())
    D = np.array(draws)
    target = np.outer(np.diag(st.Sigma), st.nu)
    assert np.all(np.abs(D.mean(axis=0)) < 4 * np.sqrt(target / D.shape[0]))
    assert np.allclose(D.var(axis=0), target, rtol=0.05)


def test_br_and_b0_shrink_to_zero():
    rng = np.random.default_rng(6)
    st = make_state(rng, q=3, n=10, d=2, R=2)
    X = np.c_[np.ones(10), rng.normal(size=10)]
    st.nu = np.full(2, 1e-14)
    st.omega = np.full(2, 1e-14)
    update_Br(st, X, rng)
    update_B0(st, X, rng)
    assert np.max(np.abs(st.B)) < 1e-5


def test_b0_single_sample_column_structure():
    rng = np.random.default_rng(7)
    st = make_state(rng, q=3, n=1, d=3, R=0, Sigma=1e-20 * np.eye(3))
    X = np.array([[1.0, 0.0, 0.0]])
    update_B0(st, X, rng)
    assert np.all(np.abs(st.B[0][:, 0]) > 1e-3)
    assert np.max(np.abs(st.B[0][:, 1:])) < 1e-8


def test_br_permutation_symmetry():
    rng = np.random.default_rng(8)
    q, d, R, n = 3, 2, 3, 4
    A = rng.normal(size=(q, q))
    p = ModelParams(A @ A.T + q * np.eye(q), rng.normal(size=(R + 1, q, d)), np.ones((q, q)), 1.0,
                    np.ones(d), np.ones(d))
    X = np.c_[np.ones(n), rng.normal(size=n)]
    gam = rng.normal(size=(n, R))
    phi = rng.normal(size=(n, q))

    def joint(params, gamma):
        mu = X @ params.B[0].T + np.einsum("nr,rnq->nq", gamma, np.einsum("rqd,nd->rnq", params.B[1:], X))
        ll = sum(multivariate_normal(mu[i], params.Sigma).logpdf(phi[i]) for i in range(n))
        return prior_logdensity(params) + ll - 0.5 * np.sum(gamma**2)

    perm = [2, 0, 1]
    B2 = np.concatenate([p.B[:1], p.B[1:][perm]])
    assert joint(p.with_(B=B2), gam[:, perm]) == pytest.approx(joint(p, gam), abs=1e-10)


def test_scales_prior_when_b_zero():
    rng = np.random.default_rng(9)
    st = make_state(rng, q=4, n=3, d=2, R=2)
    st.B[:] = 0.0
    h = st.hyper
    nus = []
    for _ in range(40000):
        update_scales(st, rng)
        nus.append(st.nu.copy())
    nus = np.array(nus)
    shape = h.a_nu + 4 * 2 / 2
    assert np.allclose(nus.mean(axis=0), h.b_nu / (shape - 1), rtol=0.01)


def test_scales_conjugacy_quadrature():
    rng = np.random.default_rng(10)
    st = make_state(rng, q=3, n=3, d=2, R=2, Sigma=[[1.0, 0.3, 0.0], [0.3, 2.0, 0.1], [0.0, 0.1, 0.5]])
    h = Hyper(a_nu=3.0, b_nu=2.0)
    st.hyper = h
    quad = sum(st.B[r][:, 0] @ st.Omega @ st.B[r][:, 0] for r in (1, 2))

    def dens(v):  # IG prior x two matrix-normal column terms, up to a constant
        return v ** (-h.a_nu - 1) * np.exp(-h.b_nu / v) * v ** (-3 * 2 / 2) * np.exp(-quad / (2 * v))

    Z = integrate.quad(dens, 0, np.inf)[0]
    m1 = integrate.quad(lambda v: v * dens(v), 0, np.inf)[0] / Z
    draws = []
    for _ in range(50000):
        update_scales(st, rng)
        draws.append(st.nu[0])
    d = np.array(draws)
    assert abs(d.mean() - m1) < 3 * d.std() / np.sqrt(d.size)


def test_omega_update_independent_of_rank():
    rng = np.random.default_rng(11)
    a = make_state(rng, q=3, n=3, d=2, R=1)
    b = make_state(rng, q=3, n=3, d=2, R=3)
    b.B[0] = a.B[0]
    b.Sigma, b.Omega = a.Sigma.copy(), a.Omega.copy()
    update_scales(a, np.random.default_rng(99))
    update_scales(b, np.random.default_rng(99))
    assert np.array_equal(a.omega, b.omega)


def test_phi_no_data_is_prior_draw():
    rng = np.random.default_rng(12)
    n = 40000
    Sig = np.array([[1.0, 0.5], [0.5, 2.0]])
    st = make_state(rng, q=2, n=n, d=1, R=0, Sigma=Sig)
    st.B[0][:, 0] = [1.0, -2.0]
    nodes = NodeCounts(np.zeros((n, 2), dtype=int), np.zeros((n, 2), dtype=int))
    update_phi(st, np.ones((n, 1)), nodes, rng)
    assert np.allclose(st.phi.mean(axis=0), [1.0, -2.0], atol=4 * np.sqrt(2.0 / n))
    assert np.allclose(np.cov(st.phi.T), Sig, atol=0.05)


def test_phi_concentrates_at_even_split():
    rng = np.random.default_rng(13)
    n = 20
    st = make_state(rng, q=2, n=n, d=1, R=0)
    st.B[:] = 0.0
    nodes = NodeCounts(np.full((n, 2), 20000), np.full((n, 2), 10000))
    for _ in range(30):
        update_pg(st, nodes, rng)
        update_phi(st, np.ones((n, 1)), nodes, rng)
    assert np.max(np.abs(st.phi)) < 0.1


def test_pg_binomial_identity_quadrature():
    # binomial kernel e^{y phi} / (1 + e^phi)^N = 2^-N e^{(y - N/2) phi} E[exp(-g phi^2 / 2)], g ~ PG(N, 0)
    n_terms = np.arange(4000)
    h = n_terms + 0.5

    def pg10_density(x):
        return 4 * np.sum((-1.0) ** n_terms * np.pi * h * np.exp(-(h**2) * np.pi**2 * 2 * x))

    for phi in (-1.3, 0.4, 2.0):
        laplace = integrate.quad(lambda x: np.exp(-x * phi * phi / 2) * pg10_density(x), 1e-4, 50, limit=400)[0]
        assert laplace == pytest.approx(1 / np.cosh(phi / 2), abs=1e-6)
        N, y = 1, 1
        lhs = np.exp(y * phi) / (1 + np.exp(phi)) ** N
        rhs = 2.0**-N * np.exp((y - N / 2) * phi) * laplace
        assert lhs == pytest.approx(rhs, abs=1e-6)
    # the exact identity for general N follows from the convolution
    for N, y, phi in ((5, 2, 0.7), (12, 9, -1.1)):
        lhs = np.exp(y * phi) / (1 + np.exp(phi)) ** N
        assert lhs == pytest.approx(2.0**-N * np.exp((y - N / 2) * phi) / np.cosh(phi / 2) ** N, rel=1e-12)


def test_update_pg_moments():
    rng = np.random.default_rng(14)
    n = 40000
    st = make_state(rng, q=3, n=n, d=1, R=0)
    st.phi[:] = [0.0, 1.5, -2.0]
    N = np.tile([0, 4, 7], (n, 1))
    update_pg(st, NodeCounts(N, N // 2), rng)
    assert np.all(st.g[:, 0] == 0.0)
    assert np.all(st.g[:, 1:] > 0)
    for j, (b, c) in enumerate([(4, 1.5), (7, -2.0)], start=1):
        mean = polya_gamma_moments(b, c)[0]
        assert mean == pytest.approx(b / (2 * abs(c)) * np.tanh(abs(c) / 2))
        assert abs(st.g[:, j].mean() - mean) < 3 * st.g[:, j].std() / np.sqrt(n)


# --------------------------------------------------------------------------
# whole chains


def small_problem(rng, n=30, q=4, d=2):
    X = np.c_[np.ones(n), rng.normal(size=(n, d - 1))]
    phi = rng.normal(size=(n, q))
    N = rng.integers(0, 60, size=(n, q))
    y = rng.binomial(N, 1 / (1 + np.exp(-phi)))
    return NodeCounts(N, y), Design(X), phi


def test_determinism_and_modes():
    rng = np.random.default_rng(15)
    nodes, design, phi = small_problem(rng)
    cfg = FitConfig(iterations=60, burn_in=20, thin=2, rank=1, seed=3)
    a = run_chain(cfg, nodes, design)
    b = run_chain(cfg, nodes, design)
    for key in ("Sigma", "B", "lam", "nu", "omega", "tau"):
        assert np.array_equal(a.stack(key), b.stack(key))
    assert np.array_equal(a.loglik, b.loglik)
    assert a.manifest["config_hash"] == b.manifest["config_hash"]
    assert a.n_draws == 20

    fixed = run_chain(FitConfig(iterations=30, burn_in=10, rank=1, mode="fixed_phi"), nodes, design)
    assert np.allclose(fixed.summary["phi_mean"], node_log_odds(nodes, 0.5))
    assert np.all(fixed.summary["phi_var"] < 1e-20)

    oracle = run_chain(FitConfig(iterations=30, burn_in=10, rank=1, mode="oracle"), None, design, phi_true=phi)
    assert np.allclose(oracle.summary["phi_mean"], phi)
    with pytest.raises(ConfigError):
        run_chain(FitConfig(iterations=30, burn_in=10, mode="oracle"), nodes, design)

    base = run_chain(FitConfig(iterations=30, burn_in=10, rank=2, mode="no_covariates"), nodes, design)
    assert base.dims["R"] == 0 and base.dims["d"] == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        FitConfig(iterations=10, burn_in=10)
    with pytest.raises(ConfigError):
        FitConfig(mode="bogus")
    with pytest.raises(ConfigError):
        FitConfig(thin=0)


def test_dimension_mismatch():
    rng = np.random.default_rng(16)
    nodes, design, _ = small_problem(rng)
    with pytest.raises(ConfigError):
        run_chain(FitConfig(iterations=5, burn_in=1), nodes, Design(design.X[:-1]))


def test_too_many_nodes_for_samples_is_rejected():
    rng = np.random.default_rng(18)
    n, q = 6, 12
    X = np.c_[np.ones(n), rng.normal(size=n)]
    phi = rng.normal(size=(n, q))
    # n + d(R+1) = 6 + 2 * 3 = 12 is allowed, 6 + 2 * 2 = 10 is not.
    run_chain(FitConfig(iterations=3, burn_in=1, rank=2, mode="oracle"), None, Design(X), phi_true=phi)
    with pytest.raises(ConfigError, match="exceed"):
        run_chain(FitConfig(iterations=3, burn_in=1, rank=1, mode="oracle"), None, Design(X), phi_true=phi)


def test_initial_scatter_has_full_rank():
    rng = np.random.default_rng(19)
    n, q, d, R = 5, 18, 3, 4
    phi0 = rng.normal(size=(n, q))
    X = np.c_[np.ones(n), rng.normal(size=(n, d - 1))]
    st = initial_state(phi0, X, R, Hyper(), rng)
    assert np.all(st.B[0, :, 0] == phi0.mean(axis=0))
    S = sufficient_stat(st, X)
    assert np.linalg.matrix_rank(S) == q


def test_sigma_and_b0_recovery_large_n():
    rng = np.random.default_rng(17)
    n = 5000
    Sig = np.array([[2.0, 0.8], [0.8, 1.0]])
    B0 = np.array([[0.5, 1.0], [-1.0, 0.3]])
    X = np.c_[np.ones(n), rng.normal(size=n)]
    phi = X @ B0.T + rng.multivariate_normal(np.zeros(2), Sig, size=n)
    dr = run_chain(FitConfig(iterations=600, burn_in=200, thin=1, rank=0, mode="oracle", seed=1), None,
                   Design(X), phi_true=phi)
    Sbar = dr.posterior_mean("Sigma")
    assert np.all(np.abs(Sbar - Sig) <= 0.05 * np.abs(Sig))
    Bd = dr.stack("B")[:, 0]
    assert np.all(np.abs(Bd.mean(axis=0) - B0) < 3 * Bd.std(axis=0))
