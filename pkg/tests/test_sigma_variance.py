import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from openkpz import sigma_variance as sv
from openkpz.errors import InputError
from openkpz.grid_paths import Grid, Path, RngStream, sample_bm


def _triple(L, seed, n=None, dx=0.05):
    g = Grid.from_dx(L, dx)
    gen = RngStream(seed).generator()
    return tuple(sample_bm(g, 0.0, 1.0, gen, n) for _ in range(3))


def _const(L, c, dx=0.05):
    g = Grid.from_dx(L, dx)
    return Path(g, np.full(g.n_points, c))


def test_ratio_of_constant_paths_is_one_over_L():
    z = _const(10.0, 0.0)
    assert sv.sigma_ratio(z, z, z) == pytest.approx(0.1, rel=1e-14)
    c = _const(10.0, 3.7)
    assert sv.sigma_ratio(c, c, c) == pytest.approx(0.1, rel=1e-14)


@given(st.integers(0, 10**6), st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100))
def test_ratio_invariant_under_separate_shifts(seed, c1, c2, c3):
    l1, l2, l3 = _triple(4.0, seed)
    sh = lambda p, c: Path(p.grid, p.values + c)
    r0 = sv.sigma_ratio(l1, l2, l3)
    assert sv.sigma_ratio(sh(l1, c1), sh(l2, c2), sh(l3, c3)) == pytest.approx(r0, rel=1e-11)


def test_ratio_overflow_safe():
    g = Grid.from_dx(4.0, 0.05)
    up = Path(g, np.linspace(-500, 500, g.n_points))
    down = Path(g, np.linspace(500, -500, g.n_points))
    for trip in ((up, up, up), (up, down, up), (down, up, down)):
        r = sv.sigma_ratio(*trip)
        assert math.isfinite(r) and r > 0


def test_ratio_against_linear_space_formula():
    l1, l2, l3 = _triple(4.0, 3)
    a, b, c = (p.values for p in (l1, l2, l3))
    x = l1.grid.x
    direct = integrate.trapezoid(np.exp(a + 2 * b + c), x) / (
        integrate.trapezoid(np.exp(a + b), x) * integrate.trapezoid(np.exp(b + c), x)
    )
    assert sv.sigma_ratio(l1, l2, l3) == pytest.approx(direct, rel=1e-12)


def _exact_linear_integral(f, dx):
    # integral of exp of the piecewise-linear interpolant, cell by cell
    f0, f1 = f[:-1], f[1:]
    d = f1 - f0
    small = np.abs(d) < 1e-8
    cell = np.where(small, np.exp(f0) * (1 + d / 2), (np.exp(f1) - np.exp(f0)) / np.where(small, 1.0, d))
    return dx * cell.sum()


def test_ratio_against_interpolant_integral():
    # trapezoid-on-grid versus the exact integral of the interpolant: second-order agreement
    l1, l2, l3 = _triple(4.0, 4, dx=0.005)
    a, b, c = (p.values for p in (l1, l2, l3))
    dx = l1.grid.dx
    exact = _exact_linear_integral(a + 2 * b + c, dx) / (
        _exact_linear_integral(a + b, dx) * _exact_linear_integral(b + c, dx)
    )
    assert sv.sigma_ratio(l1, l2, l3) == pytest.approx(exact, rel=1e-3)


def test_site_terms_of_zero_paths():
    z = _const(10.0, 0.0)
    for y in (0, 4, 9):
        assert sv.f_of_y(z, z, z, y) == pytest.approx(0.01, rel=1e-13)
        assert sv.fhat_of_y(z, z, z, y) == pytest.approx(0.01, rel=1e-13)
    with pytest.raises(InputError):
        sv.f_of_y(z, z, z, 10)
    with pytest.raises(InputError):
        sv.f_of_y(*_triple(4.5, 0), 0)


@given(st.integers(0, 10**6), st.sampled_from([2.0, 3.0, 5.0, 8.0]))
def test_site_sum_identity(seed, L):
    l1, l2, l3 = _triple(L, seed, n=20)
    total = sum(sv.f_of_y(l1, l2, l3, y) for y in range(int(L)))
    assert np.allclose(total, sv.sigma_ratio(l1, l2, l3), rtol=1e-12, atol=0)


def test_site_term_against_direct_formula():
    L, y = 8.0, 3
    l1, l2, l3 = _triple(L, 5)
    a, b, c = (p.values for p in (l1, l2, l3))
    x = l1.grid.x
    iy = 60
    win = slice(iy, iy + 21)
    s = a + 2 * b + c
    num = integrate.trapezoid(np.exp(s[win] - s[iy]), x[win])
    d1 = integrate.trapezoid(np.exp(a + b - (a + b)[iy]), x)
    d2 = integrate.trapezoid(np.exp(b + c - (b + c)[iy]), x)
    assert sv.f_of_y(l1, l2, l3, y) == pytest.approx(num / (d1 * d2), rel=1e-10)
    assert sv.f_numerator(l1, l2, l3, y) == pytest.approx(num, rel=1e-10)


@given(st.integers(0, 10**6), st.integers(0, 5))
def test_f_over_fhat_is_the_numerator(seed, y):
    l1, l2, l3 = _triple(6.0, seed)
    ratio = sv.f_of_y(l1, l2, l3, y) / sv.fhat_of_y(l1, l2, l3, y)
    assert ratio == pytest.approx(sv.f_numerator(l1, l2, l3, y), rel=1e-12)


@given(st.integers(0, 10**6), st.floats(-30, 30))
def test_site_term_shift_invariant(seed, c):
    l1, l2, l3 = _triple(4.0, seed)
    sh = Path(l2.grid, l2.values + c)
    assert sv.f_of_y(l1, sh, l3, 2) == pytest.approx(sv.f_of_y(l1, l2, l3, 2), rel=1e-11)


def test_fhat_same_order_as_f():
    l1, l2, l3 = _triple(16.0, 6, n=1000)
    f = sv.f_of_y(l1, l2, l3, 8).mean()
    fh = sv.fhat_of_y(l1, l2, l3, 8).mean()
    assert 0.1 < fh / f < 10


def _straight_line_sigma(L, n, seed, dx=0.05):
    """Plain-exponential estimator with extended-precision accumulation."""
    gen = np.random.default_rng(seed)
    m = int(round(L / dx))
    out = np.empty(n, dtype=np.longdouble)
    w = np.full(m + 1, dx, dtype=np.longdouble)
    w[[0, -1]] /= 2
    for lo in range(0, n, 5000):
        k = min(5000, n - lo)
        paths = []
        for _ in range(3):
            p = np.zeros((k, m + 1), dtype=np.longdouble)
            p[:, 1:] = np.cumsum(gen.standard_normal((k, m)) * math.sqrt(dx), axis=1)
            paths.append(p)
        a, b, c = paths
        out[lo : lo + k] = (np.exp(a + 2 * b + c) @ w) / ((np.exp(a + b) @ w) * (np.exp(b + c) @ w))
    x = out.astype(float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(n))


def test_sigma2_matches_independent_implementation():
    est = sv.estimate_sigma2(4.0, 0.0, 0.0, 100_000, None, RngStream(21))
    ref, ref_se = _straight_line_sigma(4.0, 100_000, 22)
    assert est.mean > 0 and math.isfinite(est.std_error)
    assert abs(est.mean - ref) < 2 * math.hypot(est.std_error, ref_se)


def test_sigma2_decreases_in_L():
    a = sv.estimate_sigma2(4.0, 0.0, 0.0, 20_000, None, RngStream(23))
    b = sv.estimate_sigma2(16.0, 0.0, 0.0, 20_000, None, RngStream(24))
    assert a.mean - b.mean > 4 * math.hypot(a.std_error, b.std_error)


def test_sigma2_independent_of_scheduling():
    a = sv.estimate_sigma2(2.0, 0.0, 0.0, 2000, None, RngStream(25), chunk=300, per_site="fhat")
    with ThreadPoolExecutor(3) as pool:
        b = sv.estimate_sigma2(2.0, 0.0, 0.0, 2000, None, RngStream(25), chunk=300, per_site="fhat", map_fn=pool.map)
    assert a.mean == b.mean and a.std_error == b.std_error
    assert np.array_equal(a.per_site, b.per_site)
    assert a.per_site.shape == (2,)


def test_sigma2_input_checks():
    with pytest.raises(InputError):
        sv.estimate_sigma2(4.0, 0.0, 0.0, 50, None, RngStream(0))
    with pytest.raises(InputError):
        sv.estimate_sigma2(4.0, 0.0, 0.0, 200, None, RngStream(0), n_batches=10)
    with pytest.raises(InputError):
        sv.fit_scaling([4, 8], 0.0, 0.0, 200, RngStream(0))


def test_batch_means_on_iid_data():
    x = np.random.default_rng(1).standard_normal(100_000)
    assert sv.batch_means_stderr(x, 50) == pytest.approx(1 / math.sqrt(100_000), rel=0.3)


def test_fit_exact_power_law():
    Ls = np.array([4.0, 8.0, 16.0, 32.0])
    slope, icpt, se, ci, chi2 = sv.fit_loglog(Ls, Ls**-0.5, 0.01 * Ls**-0.5)
    assert slope == pytest.approx(-0.5, abs=1e-12)
    assert icpt == pytest.approx(0.0, abs=1e-12)
    assert ci[0] <= -0.5 <= ci[1]


@given(st.integers(0, 10**6), st.floats(0.1, 10))
def test_fit_with_one_percent_noise(seed, c):
    gen = np.random.default_rng(seed)
    Ls = np.array([4.0, 8.0, 16.0, 32.0])
    # perturbations bounded by 1% shift the slope by at most 0.0115 here
    m = c * Ls**-0.5 * (1 + gen.uniform(-0.01, 0.01, 4))
    slope = sv.fit_loglog(Ls, m, 0.01 * m)[0]
    assert abs(slope + 0.5) < 0.02


def test_yl_constant_profiles():
    g = Grid.from_dx(5.0, 0.05)
    z = Path(g, np.zeros(g.n_points))
    inner = np.zeros((12, g.n_points))
    assert sv.estimate_YL(z, 0.0, 0.0, 12, RngStream(0), inner=inner) == pytest.approx(math.log(5.0), rel=1e-14)


@given(st.integers(0, 10**6), st.floats(-20, 20))
def test_yl_shift(seed, c):
    g = Grid.from_dx(4.0, 0.05)
    p = sample_bm(g, 0.0, 1.0, RngStream(seed))
    y0 = sv.estimate_YL(p, 0.0, 0.0, 10, RngStream(seed, 1))
    y1 = sv.estimate_YL(Path(g, p.values + c), 0.0, 0.0, 10, RngStream(seed, 1))
    assert y1 == pytest.approx(y0 + c, abs=1e-11)


def test_yl_needs_enough_inner_samples():
    g = Grid.from_dx(4.0, 0.05)
    with pytest.raises(InputError):
        sv.estimate_YL(Path(g, np.zeros(g.n_points)), 0.0, 0.0, 5, RngStream(0))


def test_maxsum_degenerate_is_max_of_bm():
    est = sv.limit_var_maxsum(40_000, 1, Grid(1.0, 2001), RngStream(31), degenerate=True)
    # grid maximum sits below the continuum maximum by about 0.58 sqrt(dx); the variance shift is far smaller
    assert abs(est.value - (1 - 2 / math.pi)) < 4 * est.stderr + 0.01


def test_maxsum_nonnegative_and_stable_in_n_inner():
    g = Grid(1.0, 201)
    a = sv.limit_var_maxsum(1500, 20, g, RngStream(32))
    b = sv.limit_var_maxsum(1500, 40, g, RngStream(33))
    assert a.value >= 0 and b.value >= 0
    assert abs(a.value - b.value) < 2 * math.hypot(a.stderr, b.stderr)


def test_coupled_marginals_match_uncoupled():
    c = sv.yl_limit_coupled([4.0], 1500, 20, RngStream(34), refine=2)
    u = sv.yl_variance(4.0, 0.0, 0.0, 1500, 20, RngStream(35))
    lim = sv.limit_var_maxsum(1500, 20, Grid(1.0, 161), RngStream(36))
    assert abs(c.yl[0].value - u.value) < 4 * math.hypot(c.yl[0].stderr, u.stderr)
    assert abs(c.limit.value - lim.value) < 4 * math.hypot(c.limit.stderr, lim.stderr)
