import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import simpson

from openkpz import robin_heat as rh
from openkpz.errors import InputError
from openkpz.grid_paths import Grid, Path, RngStream

SPECS = [
    rh.RobinSpec(3.0, 0.0, 0.0),
    rh.RobinSpec.from_uv(3.0, 0.0, 0.0),
    rh.RobinSpec.from_uv(4.0, 1.0, 1.0),
    rh.RobinSpec.from_uv(2.5, 0.3, 1.7),
    rh.RobinSpec.from_uv(5.0, 2.0, 0.1),
]


def _gl(L, n=400):
    z, w = np.polynomial.legendre.leggauss(n)
    return (z + 1) * L / 2, w * L / 2


def test_neumann_eigenvalues_are_cosines():
    b = rh.find_eigenvalues(rh.RobinSpec(3.0, 0.0, 0.0), 20)
    expected = -((np.arange(20) * math.pi / 3.0) ** 2)
    assert np.allclose(b.eigenvalues, expected, atol=1e-10)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"L{s.L}_A{s.A:g}_B{s.B:g}")
def test_basis_orthonormal(spec):
    b = rh.find_eigenvalues(spec, 40)
    x, w = _gl(spec.L)
    psi = b.values(x)
    gram = (psi * w) @ psi.T
    assert np.allclose(gram, np.eye(b.n_modes), atol=1e-9)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"L{s.L}_A{s.A:g}_B{s.B:g}")
def test_eigenfunctions_solve_the_robin_problem(spec):
    b = rh.find_eigenvalues(spec, 12)
    h = 1e-4
    for n in range(b.n_modes):
        x = np.linspace(0.3, spec.L - 0.3, 7)
        f = lambda z: rh.eigenfunction(b, n, z)
        second = (f(x + h) - 2 * f(x) + f(x - h)) / h**2
        scale = max(1.0, abs(b.eigenvalues[n]))
        assert np.allclose(second, b.eigenvalues[n] * f(x), atol=1e-4 * scale)
        d0 = rh.eigenfunction_derivative(b, n, 0.0)
        dL = rh.eigenfunction_derivative(b, n, spec.L)
        assert d0 == pytest.approx(spec.A * f(0.0), abs=1e-9 * scale)
        assert dL == pytest.approx(spec.B * f(spec.L), abs=1e-9 * scale)


def test_eigenvalues_sorted_and_distinct():
    b = rh.find_eigenvalues(rh.RobinSpec.from_uv(4.0, 0.0, 0.0), 60)
    ev = b.eigenvalues
    assert np.all(np.diff(ev) < 0)
    kap = b.oscillatory_kappas()
    assert np.max(np.abs(rh.osc_residual(b.spec, kap))) < 1e-8


@given(st.floats(1e-3, 2.0), st.floats(0, 3), st.floats(0, 3))
def test_neumann_kernel_matches_images(t, x, y):
    b = rh.find_eigenvalues(rh.RobinSpec(3.0, 0.0, 0.0), 64)
    assert rh.kernel(b, t, x, y) == pytest.approx(float(rh.neumann_image_kernel(3.0, t, x, y)), abs=1e-10)


@given(st.floats(0.01, 1.0), st.floats(0, 2.5), st.floats(0, 2.5), st.floats(0, 3), st.floats(0, 3))
def test_kernel_symmetric(t, x, y, u, v):
    b = rh.find_eigenvalues(rh.RobinSpec.from_uv(2.5, u, v), 48)
    k1, k2 = rh.kernel(b, t, x, y), rh.kernel(b, t, y, x)
    assert k1 == pytest.approx(k2, rel=1e-10, abs=1e-12)
    # positive up to round-off; far-apart points at small t give values near 1e-28
    assert k1 > -1e-13


def test_semigroup_property():
    spec = rh.RobinSpec.from_uv(2.5, 0.3, 1.7)
    b = rh.find_eigenvalues(spec, 200)
    z, w = _gl(spec.L, 600)
    for x, y in [(0.1, 2.0), (1.2, 1.3), (0.0, 2.5)]:
        lhs = rh.kernel(b, 0.5, x, y)
        rhs = np.sum(w * rh.kernel(b, 0.2, x, z) * rh.kernel(b, 0.3, z, y))
        assert lhs == pytest.approx(rhs, abs=1e-8)


def test_semigroup_acts_on_eigenfunctions():
    spec = rh.RobinSpec.from_uv(4.0, 1.0, 0.5)
    b = rh.find_eigenvalues(spec, 64)
    g = Grid.from_dx(4.0, 0.01)
    for n in (0, 3):
        f = lambda x, n=n: rh.eigenfunction(b, n, x)
        out = rh.apply_semigroup(b, 0.4, f, g)
        assert np.allclose(out.values, math.exp(0.4 * b.eigenvalues[n]) * f(g.x), atol=1e-10)


def test_neumann_heat_flow_conserves_mass():
    spec = rh.RobinSpec(3.0, 0.0, 0.0)
    g = Grid.from_dx(3.0, 0.01)
    f = Path(g, np.exp(np.sin(2 * g.x)))
    out = rh.heat_solution(spec, 0.7, f)
    mass = lambda p: simpson(p.values, dx=p.grid.dx)
    assert mass(out) == pytest.approx(mass(f), rel=1e-9)


def test_norm_constants_approach_flat_value():
    spec = rh.RobinSpec.from_uv(3.0, 0.3, 1.7)
    b = rh.find_eigenvalues(spec, 200)
    a = b.norm_a[[k == "oscillatory" for k in b.kinds]][50:]
    assert np.max(np.abs(a**2 * 3.0 / 2 - 1)) < 0.01


def test_regularity_report_is_finite_and_positive():
    b = rh.find_eigenvalues(rh.RobinSpec.from_uv(2.0, 0.5, 0.5), 64)
    rep = rh.kernel_regularity_report(b, (0.05, 1.0), 200, RngStream(0))
    assert rep.positive and rep.min_kernel > 0
    assert all(math.isfinite(c) for c in (rep.c_gaussian, rep.c_lipschitz, rep.c_time))


def test_input_validation():
    with pytest.raises(InputError):
        rh.RobinSpec(-1.0, 0.0, 0.0)
    b = rh.find_eigenvalues(rh.RobinSpec(1.0, 0.0, 0.0), 8)
    with pytest.raises(InputError):
        rh.kernel(b, 0.0, 0.5, 0.5)
