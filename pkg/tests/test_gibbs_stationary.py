import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from openkpz import gibbs_stationary as gs
from openkpz.errors import InputError
from openkpz.grid_paths import Grid, RngStream, sample_bm, sample_bridge

FAST = gs.GibbsChainConfig(n_sweeps=40, burn_in=20, thinning=4, n_pool=4000, chain_batch=64)


def test_config_validation():
    with pytest.raises(InputError):
        gs.GibbsChainConfig(n_sweeps=0)
    with pytest.raises(InputError):
        gs.GibbsChainConfig(block_length=-1.0)
    assert gs.GibbsChainConfig().resolved_block_length(8.0) == 2.0
    with pytest.raises(InputError):
        gs.GibbsChainConfig(block_length=5.0).resolved_block_length(4.0)


@given(st.integers(0, 10**6), st.floats(0, 3), st.floats(0, 3))
def test_log_weight_matches_scipy_trapezoid(seed, u, v):
    g = Grid.from_dx(2.0, 0.1)
    gen = RngStream(seed).generator()
    lam = sample_bm(g, 0.0, 1.0, gen).values
    lamp = sample_bm(g, gen.normal(), 1.0, gen).values
    st_ = gs.TwoLayerState.from_arrays(g, lam, lamp, u + 1e-3, v)
    gap = lam - lamp
    ref = -(u + 1e-3) * gap[0] - v * gap[-1] - integrate.trapezoid(np.exp(-gap), g.x)
    assert gs.rn_log_weight(st_) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_state_validation():
    g = Grid(1.0, 11)
    z = np.zeros(11)
    with pytest.raises(InputError):
        gs.TwoLayerState.from_arrays(g, z, z, 0.0, 0.0)
    with pytest.raises(InputError):
        gs.TwoLayerState.from_arrays(g, z, None, 1.0, 0.0)
    with pytest.raises(InputError):
        gs.TwoLayerState.from_arrays(g, z, z, -1.0, 0.0)


def test_brownian_fallback():
    g = Grid.from_dx(2.0, 0.05)
    st_ = gs.sample_two_layer(2.0, 0.0, 0.0, g, FAST, RngStream(0), 5)
    assert st_.brownian_fallback and st_.lambda_prime is None
    assert np.all(st_.lam[:, 0] == 0)


def test_sampler_reproducible_and_pinned():
    g = Grid.from_dx(2.0, 0.1)
    a = gs.sample_two_layer(2.0, 1.0, 0.5, g, FAST, RngStream(5), 30)
    b = gs.sample_two_layer(2.0, 1.0, 0.5, g, FAST, RngStream(5), 30)
    assert np.array_equal(a.lam, b.lam) and np.array_equal(a.lamp, b.lamp)
    assert np.all(a.lam[:, 0] == 0)
    assert a.diagnostics["block"]["proposals"] > 0


def test_block_update_only_touches_the_block():
    g = Grid.from_dx(4.0, 0.1)
    gen = RngStream(1).generator()
    lam = sample_bm(g, 0.0, 1.0, gen, 6).values
    lamp = lam - 1.0 + 0.1 * sample_bm(g, 0.0, 1.0, gen, 6).values
    st_ = gs.TwoLayerState.from_arrays(g, lam, lamp, 1.0, 1.0)
    out = gs.block_gibbs_update_lambda(st_, 1.0, 2.0, RngStream(2))
    i1, i2 = g.index_of(1.0), g.index_of(2.0)
    assert np.array_equal(out.lam[:, : i1 + 1], lam[:, : i1 + 1])
    assert np.array_equal(out.lam[:, i2:], lam[:, i2:])
    assert np.array_equal(out.lamp, lamp)
    assert not np.array_equal(out.lam[:, i1 + 1 : i2], lam[:, i1 + 1 : i2])
    out2 = gs.block_gibbs_update_lambda_prime(st_, 0.0, 1.0, RngStream(3))
    assert np.array_equal(out2.lam, lam)
    assert np.array_equal(out2.lamp[:, i1:], lamp[:, i1:])


def _replicate(g, lam, lamp, m, u=1.0, v=1.0):
    return gs.TwoLayerState.from_arrays(g, np.tile(lam, (m, 1)), np.tile(lamp, (m, 1)), u, v)


def test_coupling_identical_inputs_identical_outputs():
    g = Grid.from_dx(4.0, 0.1)
    gen = RngStream(0).generator()
    lam = sample_bm(g, 0.0, 1.0, gen, 5).values
    st_ = gs.TwoLayerState.from_arrays(g, lam, lam - 0.5, 1.0, 1.0)
    rep = gs.monotone_coupling_check(st_, st_, 1.0, 3.0, RngStream(4))
    assert np.array_equal(rep.lo.lam, rep.hi.lam)
    with pytest.raises(InputError):
        other = gs.TwoLayerState.from_arrays(Grid.from_dx(4.0, 0.2), np.zeros((5, 21)), np.zeros((5, 21)), 1.0, 1.0)
        gs.monotone_coupling_check(st_, other, 1.0, 3.0, RngStream(4))


def test_coupling_common_shift_is_pathwise():
    g = Grid.from_dx(4.0, 0.1)
    lam = sample_bm(g, 0.0, 1.0, RngStream(1).generator()).values
    lo = _replicate(g, lam, lam - 0.3, 200)
    hi = lo.shifted(1.0)
    rep = gs.monotone_coupling_check(lo, hi, 1.0, 3.0, RngStream(2))
    assert rep.all_ordered
    assert np.allclose(rep.hi.lam - rep.lo.lam, 1.0)


def test_coupling_raised_lambda_dominates_in_law():
    g = Grid.from_dx(4.0, 0.1)
    lam = sample_bm(g, 0.0, 1.0, RngStream(3).generator()).values
    lamp = lam - 0.5
    n = 10_000
    lo = _replicate(g, lam, lamp, n)
    hi = _replicate(g, lam + 1.0, lamp, n)
    rep = gs.monotone_coupling_check(lo, hi, 1.0, 3.0, RngStream(4))
    mid = g.index_of(2.0)
    # alternative "greater": the CDF of the raised sample lies above somewhere
    res = stats.ks_2samp(rep.hi.lam[:, mid], rep.lo.lam[:, mid], alternative="greater")
    assert res.pvalue > 0.01
    assert rep.ordered.mean() > 0.5


def test_acceptance_rate_falls_as_lambda_prime_rises():
    g = Grid.from_dx(4.0, 0.1)
    lam = np.zeros(g.n_points)
    rates = []
    for level in (-1.0, 0.0, 1.0):
        st_ = _replicate(g, lam, lam + level, 4000)
        out = gs.block_gibbs_update_lambda(st_, 1.0, 3.0, RngStream(5))
        rates.append(out.diagnostics["block"]["acceptance_rate"])
    assert rates[0] > rates[1] > rates[2]


def test_acceptance_near_one_for_large_gap():
    g = Grid.from_dx(4.0, 0.1)
    lam = np.zeros(g.n_points)
    out = gs.block_gibbs_update_lambda(_replicate(g, lam, lam - 20.0, 10_000), 1.0, 3.0, RngStream(6))
    d = out.diagnostics["block"]
    assert d["accepted"] == d["blocks"]
    assert d["proposals"] <= 1.01 * d["blocks"]


def test_acceptance_rate_matches_direct_bridge_oracle():
    # gap identically zero: each try accepts with probability exp(-int exp(-B)), B a bridge 0 -> 0
    g = Grid.from_dx(4.0, 0.1)
    lam = np.zeros(g.n_points)
    out = gs.block_gibbs_update_lambda(_replicate(g, lam, lam, 20_000), 1.0, 3.0, RngStream(7))
    d = out.diagnostics["block"]
    bg = Grid(2.0, 21)
    b = sample_bridge(bg, 0.0, 0.0, 1.0, np.random.default_rng(8), 400_000).values
    w = np.exp(-integrate.trapezoid(np.exp(-b), bg.x, axis=1))
    # accepted / proposals is a ratio estimator; compare with a binomial-scale tolerance
    rate = d["accepted"] / d["proposals"]
    tol = 4 * math.sqrt(rate * (1 - rate) / d["proposals"]) + 4 * w.std() / math.sqrt(w.size)
    assert abs(rate - w.mean()) < tol


def test_log_weight_examples():
    g = Grid(1.0, 11)
    c = 0.7
    st0 = gs.TwoLayerState.from_arrays(g, np.full(11, c), np.zeros(11), 0.0, 0.0, brownian_fallback=True)
    assert gs.rn_log_weight(st0) == pytest.approx(-math.exp(-c), rel=1e-14)
    g2 = Grid(2.0, 21)
    st1 = gs.TwoLayerState.from_arrays(g2, np.full(21, 2.0), np.zeros(21), 1.0, 0.0)
    assert gs.rn_log_weight(st1) == pytest.approx(-2 - 2 * math.exp(-2), rel=1e-14)


@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_log_weight_shift_invariant(seed, c):
    g = Grid.from_dx(2.0, 0.1)
    gen = RngStream(seed).generator()
    lam = sample_bm(g, 0.0, 1.0, gen).values
    lamp = sample_bm(g, -1.0, 1.0, gen).values
    st_ = gs.TwoLayerState.from_arrays(g, lam, lamp, 0.4, 1.3)
    assert gs.rn_log_weight(st_.shifted(c)) == pytest.approx(gs.rn_log_weight(st_), rel=1e-12, abs=1e-12)


def test_log_weight_overflow_gives_sentinel():
    g = Grid(1.0, 11)
    st_ = gs.TwoLayerState.from_arrays(g, np.full(11, -1000.0), np.zeros(11), 1.0, 1.0)
    assert gs.rn_log_weight(st_) == -np.inf
    assert st_.diagnostics["overflow"] == 1


def test_log_weight_against_refined_quadrature():
    # piecewise-linear gap on a fine grid (dx=1e-4) against adaptive quadrature
    g = Grid(2.0, 20001)
    knots = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
    gap_k = np.array([0.3, -0.4, 1.2, 0.1, 0.8])
    gap = np.interp(g.x, knots, gap_k)
    st_ = gs.TwoLayerState.from_arrays(g, gap, np.zeros_like(gap), 0.5, 0.25)
    ref = integrate.quad(lambda s: math.exp(-np.interp(s, knots, gap_k)), 0, 2, points=knots[1:-1], epsabs=1e-13)[0]
    exact = -0.5 * 0.3 - 0.25 * 0.8 - ref
    assert gs.rn_log_weight(st_) == pytest.approx(exact, abs=1e-8)


def test_reflection_symmetry():
    L = 4.0
    g = Grid.from_dx(L, 0.1)
    cfg = gs.GibbsChainConfig(n_sweeps=20, burn_in=40, thinning=20, chain_batch=512)
    st_ = gs.sample_two_layer(L, 1.0, 1.0, g, cfg, RngStream(9), 1500)
    mid = g.index_of(L / 2)
    res = stats.ks_2samp(st_.lam[:, mid], -st_.lamp[:, mid] + st_.lamp[:, 0])
    assert res.pvalue > 0.01


def _reference_v0_mean(L, u, v, n, seed):
    """Self-normalized importance sampling of E[G(0)] under the reweighted law.

    G = Lam - Lam' is a Brownian motion with diffusion 2 started from a
    Lebesgue-distributed point; the start is proposed uniformly on a wide window.
    """
    g = Grid.from_dx(L, 0.05)
    gen = np.random.default_rng(seed)
    a = 12.0
    c = gen.uniform(-a, a, n)
    V = sample_bm(g, 0.0, 2.0, gen, n).values + c[:, None]
    logw = -u * V[:, 0] - v * V[:, -1] - integrate.trapezoid(np.exp(-V), g.x, axis=1)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    m = float(w @ V[:, 0])
    se = math.sqrt(float(w**2 @ (V[:, 0] - m) ** 2))
    return m, se


def test_gap_at_zero_matches_importance_oracle():
    L, u, v = 1.0, 1.0, 1.0
    ref, ref_se = _reference_v0_mean(L, u, v, 400_000, 11)
    g = Grid.from_dx(L, 0.05)
    cfg = gs.GibbsChainConfig(n_sweeps=100, burn_in=50, thinning=10, chain_batch=256)
    st_ = gs.sample_two_layer(L, u, v, g, cfg, RngStream(12), 4000)
    v0 = st_.gap()[:, 0]
    se = v0.std(ddof=1) / math.sqrt(400)  # 400 chains, 10 draws each
    assert abs(v0.mean() - ref) < 4 * math.hypot(se, ref_se)


def test_sum_layer_is_brownian():
    L = 4.0
    g = Grid.from_dx(L, 0.05)
    st_ = gs.sample_two_layer(L, 1.0, 1.0, g, FAST, RngStream(13), 2000)
    inc = (st_.lam + st_.lamp)[:, -1] - (st_.lam + st_.lamp)[:, 0]
    # diffusion 2 over length L; samples within a chain are correlated, so allow a wide band
    assert abs(inc.var(ddof=1) - 2 * L) < 0.2 * 2 * L


def test_rejects_bad_parameters():
    g = Grid.from_dx(2.0, 0.1)
    with pytest.raises(InputError):
        gs.sample_two_layer(2.0, -1.0, 0.0, g, FAST, RngStream(0))
    with pytest.raises(InputError):
        gs.sample_two_layer(3.0, 1.0, 0.0, g, FAST, RngStream(0))
