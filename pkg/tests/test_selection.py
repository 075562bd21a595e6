import numpy as np
import pytest
from scipy.special import logsumexp

from trecor.errors import ConfigError
from trecor.gibbs import FitConfig
from trecor.model import Design
from trecor.phylo import NodeCounts
from trecor.selection import choose_rank, elbow_index, select_rank, waic_from_loglik


def test_constant_loglik():
    ll = np.tile([-1.5, -0.5, -2.0], (7, 1))
    w = waic_from_loglik(ll)
    assert w.p_waic == 0.0
    assert w.waic == pytest.approx(-2 * ll[0].sum())


def test_hand_values():
    # rows are draws, columns are data points: point 1 sees (-1, -1), point 2 sees (-2, -4)
    ll = np.array([[-1.0, -2.0], [-1.0, -4.0]])
    w = waic_from_loglik(ll)
    lppd = -1.0 + np.log((np.exp(-2.0) + np.exp(-4.0)) / 2)
    p = 0.0 + 2.0  # sample variance of (-2, -4)
    assert w.lppd == pytest.approx(lppd, abs=1e-12)
    assert w.p_waic == pytest.approx(p, abs=1e-12)
    assert w.waic == pytest.approx(-2 * (lppd - p), abs=1e-12)
    assert w.pointwise.sum() == pytest.approx(w.waic)


def test_duplicate_draw_invariance_of_lppd():
    rng = np.random.default_rng(0)
    ll = rng.normal(size=(2, 5))
    w1 = waic_from_loglik(ll)
    w2 = waic_from_loglik(np.vstack([ll, ll]))
    # the empirical distribution is unchanged; lppd is exactly invariant and
    # p_waic only moves by the ddof=1 small-sample factor
    assert w2.lppd == pytest.approx(w1.lppd, abs=1e-12)
    v = ll.var(axis=0, ddof=0).sum()
    assert w1.p_waic == pytest.approx(2 * v) and w2.p_waic == pytest.approx(4 / 3 * v)


def test_stability_large_magnitudes():
    ll = np.array([[-1000.0, -2000.0], [-1001.0, -2002.0]])
    w = waic_from_loglik(ll)
    assert np.isfinite(w.waic)
    assert w.lppd == pytest.approx(float(np.sum(logsumexp(ll, axis=0) - np.log(2))))


def test_too_few_draws():
    with pytest.raises(ConfigError):
        waic_from_loglik(np.zeros((1, 3)))


def test_choose_rank_rules():
    assert choose_rank([3], [10.0]) == 3
    assert choose_rank([1, 2, 3], [5.0, 4.0, 4.0]) == 2  # tie goes to the smaller rank
    assert choose_rank([3, 1, 2], [4.0, 5.0, 4.0]) == 2
    assert choose_rank([1, 2, 3], [100.0, 99.5, 99.0], rtol=0.02) == 1
    assert elbow_index([10.0, 5.0, 4.5, 4.4]) == 1
    assert choose_rank([1, 2, 3, 4, 5], [100, 60, 30, 28, 27], rule="elbow") == 3
    with pytest.raises(ConfigError):
        choose_rank([1, 2], [1.0, 2.0], rule="bogus")


def test_select_rank_single_candidate(tmp_path):
    rng = np.random.default_rng(1)
    n, q = 20, 3
    N = rng.integers(1, 40, size=(n, q))
    nodes = NodeCounts(N, rng.binomial(N, 0.4))
    design = Design(np.c_[np.ones(n), rng.normal(size=n)])
    cfg = FitConfig(iterations=40, burn_in=20, thin=2, rank=1)
    res = select_rank([2], cfg, nodes, design, outdir=str(tmp_path))
    assert res.chosen == 2 and len(res.curve) == 1
    assert (tmp_path / "R2" / "chain_0" / "manifest.json").exists()
    res_b = select_rank([1, 2], cfg, nodes, design, layer="binomial")
    assert res_b.chosen in (1, 2) and np.isfinite(res_b.curve[0]["waic"])
