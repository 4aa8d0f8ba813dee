"""Robin Laplacian on [0, L]: eigenpairs, heat kernel and heat semigroup.

Boundary conditions are ``psi'(0) = A psi(0)`` and ``psi'(L) = B psi(L)``.
For the open KPZ problem ``A = u - 1/2`` and ``B = -(v - 1/2)``.

The kernel solves ``d_t w = d_zz w`` (no factor 1/2):

    K_t(x, y) = sum_n exp(lambda_n t) psi_n(x) psi_n(y)

Three kinds of modes occur:

* oscillatory: ``psi = a (cos kz + (A/k) sin kz)``, ``lambda = -k^2``. Roots of
  ``G(k) = (k^2 + AB) sin(Lk)/k - (A - B) cos(Lk)``, which is the
  ``tan(Lk) = k(A-B)/(k^2+AB)`` condition with the poles removed.
* hyperbolic (bound states): ``psi = a (cosh mz + (A/m) sinh mz)``,
  ``lambda = +m^2``; at most two of them.
* constant/linear: ``psi = a (1 + Az)``, ``lambda = 0``. It exists exactly when
  ``A - B - ABL = 0`` (for example, the Neumann case ``A = B = 0``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import brentq

from .errors import InputError, NumericalError
from .grid_paths import Grid, Path, as_generator, RngStream

OSC, HYP, CONST = "oscillatory", "hyperbolic", "constant"

TERM_TOL = 1e-14
MIN_MODES = 32
ROOT_RESIDUAL_TOL = 1e-12
DUPLICATE_TOL = 1e-9


@dataclass(frozen=True)
class RobinSpec:
    L: float
    A: float
    B: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.L) and self.L > 0):
            raise InputError(f"L must be positive, got {self.L}")
        if not (math.isfinite(self.A) and math.isfinite(self.B)):
            raise InputError("A and B must be finite")

    @classmethod
    def from_uv(cls, L: float, u: float, v: float) -> "RobinSpec":
        return cls(float(L), u - 0.5, -(v - 0.5))


@dataclass(frozen=True, eq=False)
class RobinEigenBasis:
    """Eigenpairs sorted by decreasing eigenvalue ``lambda_n``.

    ``kinds[i]`` is one of ``"hyperbolic"``, ``"constant"``, ``"oscillatory"``;
    ``k[i]`` is ``mu`` (hyperbolic), 0 (constant) or ``kappa`` (oscillatory);
    ``norm_a[i]`` is the normalizing constant ``a_n``.
    """

    spec: RobinSpec
    kinds: tuple[str, ...]
    k: np.ndarray
    norm_a: np.ndarray
    # per-mode shape coefficients, see _shape
    coef: np.ndarray

    @property
    def n_modes(self) -> int:
        return len(self.kinds)

    @property
    def eigenvalues(self) -> np.ndarray:
        sign = np.array([1.0 if kd == HYP else -1.0 for kd in self.kinds])
        return sign * self.k**2

    @property
    def n_oscillatory(self) -> int:
        return sum(kd == OSC for kd in self.kinds)

    def oscillatory_kappas(self) -> np.ndarray:
        return self.k[[kd == OSC for kd in self.kinds]]

    def values(self, x) -> np.ndarray:
        """Matrix ``psi_n(x_j)`` of shape ``(n_modes, len(x))``."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        A = self.spec.A
        out = np.empty((self.n_modes, x.size))
        for i in range(self.n_modes):
            out[i] = self.norm_a[i] * _shape(self.kinds[i], self.k[i], self.coef[i], self.spec.L, x)
        return out

    def to_dict(self) -> dict:
        return {
            "L": self.spec.L,
            "A": self.spec.A,
            "B": self.spec.B,
            "modes": [
                {"kind": kd, "kappa_or_mu": float(k), "norm_a": float(a)}
                for kd, k, a in zip(self.kinds, self.k, self.norm_a)
            ],
        }


def _shape(kind: str, k: float, c: np.ndarray, L: float, x: np.ndarray) -> np.ndarray:
    """Unnormalized mode shape.

    oscillatory ``c0 cos kz + c1 sin kz``; constant ``c0 + c1 z``; hyperbolic
    ``c0 cosh kz + c1 sinh kz`` when ``kL <= 1`` and otherwise the overflow-free
    ``c0 exp(-kz) + c1 exp(-k(L-z))`` (flagged by ``c[2] == 1``).
    """
    if kind == OSC:
        return c[0] * np.cos(k * x) + c[1] * np.sin(k * x)
    if kind == HYP:
        if c[2] == 1.0:
            return c[0] * np.exp(-k * x) + c[1] * np.exp(-k * (L - x))
        return c[0] * np.cosh(k * x) + c[1] * np.sinh(k * x)
    return c[0] + c[1] * x


def _shape_deriv(kind: str, k: float, c: np.ndarray, L: float, x: np.ndarray) -> np.ndarray:
    if kind == OSC:
        return k * (-c[0] * np.sin(k * x) + c[1] * np.cos(k * x))
    if kind == HYP:
        if c[2] == 1.0:
            return k * (-c[0] * np.exp(-k * x) + c[1] * np.exp(-k * (L - x)))
        return k * (c[0] * np.sinh(k * x) + c[1] * np.cosh(k * x))
    return np.full_like(np.asarray(x, dtype=float), c[1])


def _norm_sq(kind: str, k: float, c: np.ndarray, L: float) -> float:
    """Closed-form ``int_0^L shape^2``."""
    if kind == OSC:
        p, q = c[0], c[1]
        return (
            0.5 * L * (p * p + q * q)
            + math.sin(2 * k * L) / (4 * k) * (p * p - q * q)
            + p * q * (1 - math.cos(2 * k * L)) / (2 * k)
        )
    if kind == HYP:
        p, q = c[0], c[1]
        if c[2] == 1.0:
            e = math.exp(-k * L)
            return (p * p + q * q) * (-math.expm1(-2 * k * L)) / (2 * k) + 2 * p * q * L * e
        s = math.sinh(2 * k * L) / (4 * k)
        return p * p * (0.5 * L + s) + q * q * (s - 0.5 * L) + p * q * (math.cosh(2 * k * L) - 1) / (2 * k)
    p, q = c[0], c[1]
    return p * p * L + p * q * L**2 + q * q * L**3 / 3


def osc_residual(spec: RobinSpec, kappa) -> np.ndarray:
    """``sin(Lk)(k^2+AB) - cos(Lk) k (A-B)``, scaled by ``k^2 + |AB| + k|A-B|``."""
    k = np.asarray(kappa, dtype=float)
    A, B, L = spec.A, spec.B, spec.L
    raw = np.sin(L * k) * (k * k + A * B) - np.cos(L * k) * k * (A - B)
    return raw / (k * k + abs(A * B) + k * abs(A - B))


def _g_osc(spec: RobinSpec, k):
    A, B, L = spec.A, spec.B, spec.L
    k = np.asarray(k, dtype=float)
    return (k * k + A * B) * np.sin(L * k) / k - (A - B) * np.cos(L * k)


def _h_hyp(spec: RobinSpec, m):
    """``(m+A)(m-B) - exp(-2mL)(m-A)(m+B)``: the bound-state condition without overflow."""
    A, B, L = spec.A, spec.B, spec.L
    m = np.asarray(m, dtype=float)
    return (m + A) * (m - B) - np.exp(-2 * m * L) * (m - A) * (m + B)


def _symmetric(spec: RobinSpec) -> bool:
    return abs(spec.A + spec.B) <= 1e-14 * (1 + abs(spec.A))


def _has_zero_mode(spec: RobinSpec) -> bool:
    A, B, L = spec.A, spec.B, spec.L
    return abs(A - B - A * B * L) <= 1e-12 * (1 + abs(A) + abs(B) + abs(A * B * L))


def _sign_change_roots(f: Callable, grid: np.ndarray) -> list[float]:
    vals = f(grid)
    roots = []
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) <= 0):
        a, b = grid[i], grid[i + 1]
        fa, fb = vals[i], vals[i + 1]
        if fa == 0.0:
            roots.append(float(a))
        elif fb == 0.0:
            continue
        else:
            roots.append(brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))
    return roots


def _hyperbolic_roots(spec: RobinSpec) -> list[tuple[float, np.ndarray]]:
    """Bound states as ``(mu, coef)`` pairs, at most two of them.

    When ``A = -B`` the two states can be split by less than machine precision
    for large ``L``; the condition then factors into an even and an odd branch
    ``m - b = +/- exp(-mL)(m + b)`` with ``b = B``, each solved separately.
    """
    A, B, L = spec.A, spec.B, spec.L
    mmax = 2 * (abs(A) + abs(B)) + 10.0 / L
    grid = np.linspace(mmax * 1e-6, mmax, 20001)
    pts = [grid]
    for c in (-A, B):
        if 0 < c < mmax:
            pts.append(c + np.linspace(-1e-3, 1e-3, 2001) * max(c, 1e-3))
    grid = np.unique(np.concatenate(pts))
    grid = grid[grid > 0]
    out = []
    if _symmetric(spec):
        b = B
        for sign in (1.0, -1.0):
            f = lambda m, s_=sign: m - b - s_ * np.exp(-m * L) * (m + b)
            for r in _sign_change_roots(f, grid):
                if r > 1e-7:
                    out.append((r, _hyp_coef(spec, r, even=sign)))
    else:
        for r in _sign_change_roots(lambda m: _h_hyp(spec, m), grid):
            if r > 1e-7:
                out.append((r, _hyp_coef(spec, r)))
    if len(out) > 2:
        raise NumericalError(f"found {len(out)} hyperbolic modes, at most 2 are possible")
    return sorted(out, key=lambda p: -p[0])


def _hyp_coef(spec: RobinSpec, m: float, even: float | None = None) -> np.ndarray:
    A, B, L = spec.A, spec.B, spec.L
    if m * L <= 1.0:
        return np.array([1.0, A / m, 0.0])
    if even is not None:
        return np.array([1.0, even, 1.0])
    e = math.exp(-m * L)
    if abs(m + A) >= abs(m - B):
        return np.array([e * (m - A) / (m + A), 1.0, 1.0])
    return np.array([1.0, e * (m + B) / (m - B), 1.0])


def _oscillatory_roots(spec: RobinSpec, n_modes: int) -> list[float]:
    A, B, L = spec.A, spec.B, spec.L
    step = math.pi / L
    f = lambda k: _g_osc(spec, k)
    roots: list[float] = []
    # low region: dense scan, where brackets may hold 0 or 2 roots
    k_low = max(4 * step, 2 * math.sqrt(abs(A * B)) + 2 * (abs(A) + abs(B)) + 2 * step)
    n = int(math.ceil(k_low / step))
    k_low = (n - 0.5) * step
    low_grid = np.linspace(step * 1e-6, k_low, 400 * n + 2)
    roots.extend(r for r in _sign_change_roots(f, low_grid) if 1e-7 < r < k_low)
    # high region: exactly one root per bracket ((n-1/2)pi/L, (n+1/2)pi/L)
    while len(roots) < n_modes:
        lo, hi = (n - 0.5) * step, (n + 0.5) * step
        sub = np.linspace(lo, hi, 9)
        found = _sign_change_roots(f, sub)
        found = [r for r in found if lo <= r < hi]
        if len(found) != 1:
            raise NumericalError(
                f"oscillatory branch n={n}: expected one root in ({lo:.6g}, {hi:.6g}), found {len(found)}"
            )
        roots.extend(found)
        n += 1
    return sorted(roots)[:n_modes]


@lru_cache(maxsize=64)
def _basis_cached(L: float, A: float, B: float, n_modes: int) -> RobinEigenBasis:
    spec = RobinSpec(L, A, B)
    kinds: list[str] = []
    ks: list[float] = []
    coefs: list[np.ndarray] = []
    for m, c in _hyperbolic_roots(spec):
        kinds.append(HYP)
        ks.append(m)
        coefs.append(c)
    if _has_zero_mode(spec):
        kinds.append(CONST)
        ks.append(0.0)
        coefs.append(np.array([1.0, A, 0.0]))
    n_osc = max(n_modes - len(ks), 1)
    osc = _oscillatory_roots(spec, n_osc)
    kinds.extend([OSC] * len(osc))
    ks.extend(osc)
    coefs.extend(np.array([1.0, A / k, 0.0]) for k in osc)
    kap = np.asarray(osc)
    if kap.size > 1 and np.min(np.diff(kap)) < DUPLICATE_TOL:
        raise NumericalError("duplicate oscillatory roots")
    res = np.abs(osc_residual(spec, kap))
    if res.size and res.max() > ROOT_RESIDUAL_TOL:
        raise NumericalError(f"root residual {res.max():.3g} exceeds {ROOT_RESIDUAL_TOL}")
    coef = np.array(coefs)
    norm = np.array([1.0 / math.sqrt(_norm_sq(kd, k, c, L)) for kd, k, c in zip(kinds, ks, coef)])
    return RobinEigenBasis(spec, tuple(kinds), np.asarray(ks), norm, coef)


def find_eigenvalues(spec: RobinSpec, n_modes: int) -> RobinEigenBasis:
    """Eigenbasis holding all non-oscillatory modes plus enough oscillatory ones
    to reach ``n_modes`` in total (at least one oscillatory mode)."""
    if int(n_modes) != n_modes or n_modes < 1:
        raise InputError(f"n_modes must be a positive integer, got {n_modes}")
    return _basis_cached(float(spec.L), float(spec.A), float(spec.B), int(n_modes))


def modes_needed(spec: RobinSpec, t: float) -> int:
    """Number of oscillatory modes after which every term is below ``TERM_TOL``."""
    if not (t > 0 and math.isfinite(t)):
        raise InputError(f"t must be positive and finite, got {t}")
    L, A = spec.L, spec.A
    # bound a_n^2 (1 + A^2/k^2) by 4/L (1 + A^2) for safety; k_n >= (n - 1/2 - c) pi / L
    c = 4.0 / L * (1 + A * A) + 1.0
    kmax = math.sqrt(max(math.log(c / TERM_TOL), 0.0) / t)
    extra = 2 * (abs(spec.A) + abs(spec.B)) * L / math.pi
    return max(MIN_MODES, int(kmax * L / math.pi + extra) + 3)


def _basis_for_time(basis: RobinEigenBasis, t: float) -> RobinEigenBasis:
    need = modes_needed(basis.spec, t)
    if basis.n_oscillatory >= need:
        return basis
    return find_eigenvalues(basis.spec, need + (basis.n_modes - basis.n_oscillatory))


def _check_t(t: float) -> None:
    if not (math.isfinite(t) and t > 0):
        raise InputError(f"t must be positive, got {t}")


def eigenfunction(basis: RobinEigenBasis, n: int, x) -> np.ndarray | float:
    """``psi_n(x)``; modes are indexed in decreasing eigenvalue order."""
    if not (0 <= n < basis.n_modes):
        raise InputError(f"mode index {n} outside [0, {basis.n_modes})")
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0) or np.any(xs > basis.spec.L * (1 + 1e-12)):
        raise InputError("x outside [0, L]")
    val = basis.norm_a[n] * _shape(basis.kinds[n], basis.k[n], basis.coef[n], basis.spec.L, xs)
    return float(val) if val.ndim == 0 else val


def eigenfunction_derivative(basis: RobinEigenBasis, n: int, x) -> np.ndarray | float:
    xs = np.asarray(x, dtype=float)
    val = basis.norm_a[n] * _shape_deriv(basis.kinds[n], basis.k[n], basis.coef[n], basis.spec.L, xs)
    return float(val) if val.ndim == 0 else val


def kernel(basis: RobinEigenBasis, t: float, x, y) -> np.ndarray | float:
    """Heat kernel ``K_t(x, y)``, vectorized over broadcastable ``x`` and ``y``."""
    _check_t(t)
    b = _basis_for_time(basis, t)
    xs, ys = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    px = b.values(xs.ravel())
    py = b.values(ys.ravel())
    w = np.exp(b.eigenvalues * t)
    out = np.einsum("n,nj,nj->j", w, px, py).reshape(xs.shape)
    return float(out) if out.ndim == 0 else out


def project(basis: RobinEigenBasis, f: Path | Callable) -> np.ndarray:
    """Coefficients ``<f, psi_n>``.

    Paths are integrated with composite Simpson on their grid values; callables
    with 2048-point Gauss-Legendre on [0, L].
    """
    L = basis.spec.L
    if isinstance(f, Path):
        if f.grid.length != L:
            raise InputError("path grid length differs from the basis length")
        psi = basis.values(f.grid.x)
        vals = f.values
        if vals.ndim == 1:
            return simpson(psi * vals, dx=f.grid.dx, axis=-1)
        return simpson(psi[None, :, :] * vals[:, None, :], dx=f.grid.dx, axis=-1)
    nodes, weights = np.polynomial.legendre.leggauss(2048)
    xs = 0.5 * L * (nodes + 1)
    fv = np.asarray(f(xs), dtype=float)
    return basis.values(xs) @ (0.5 * L * weights * fv)


def apply_semigroup(basis: RobinEigenBasis, t: float, f: Path | Callable, grid: Grid | None = None) -> Path:
    """``int K_t(x, z) f(z) dz`` on the grid of ``f`` (or on ``grid`` for callables)."""
    _check_t(t)
    b = _basis_for_time(basis, t)
    if grid is None:
        if not isinstance(f, Path):
            raise InputError("a grid is needed when f is a callable")
        grid = f.grid
    coef = project(b, f) * np.exp(b.eigenvalues * t)
    return Path(grid, coef @ b.values(grid.x))


def heat_solution(spec: RobinSpec, t: float, f: Path | Callable, grid: Grid | None = None) -> Path:
    """Convenience wrapper: build the basis and apply the semigroup."""
    return apply_semigroup(find_eigenvalues(spec, modes_needed(spec, t)), t, f, grid)


def neumann_image_kernel(L: float, t: float, x, y, n_images: int = 50) -> np.ndarray:
    """Method-of-images Neumann kernel for ``d_t w = d_zz w`` on [0, L]."""
    x = np.asarray(x, dtype=float)[..., None]
    y = np.asarray(y, dtype=float)[..., None]
    k = np.arange(-n_images, n_images + 1)
    g = lambda z: np.exp(-(z**2) / (4 * t)) / math.sqrt(4 * math.pi * t)
    return (g(x - y + 2 * k * L) + g(x + y + 2 * k * L)).sum(axis=-1)


@dataclass(frozen=True)
class RegularityReport:
    n_samples: int
    b: float
    c_gaussian: float
    c_lipschitz: float
    c_time: float
    min_kernel: float
    positive: bool


def kernel_regularity_report(
    basis: RobinEigenBasis,
    t_range: tuple[float, float],
    samples: int,
    rng: RngStream | np.random.Generator,
    b: float = 1.0,
) -> RegularityReport:
    """Largest observed constants in three standard kernel bounds.

    ``K_t(x,y) <= C t^{-1/2} exp(-b|x-y|/sqrt t)``,
    ``|K_t(x,z)-K_t(y,z)| <= C t^{-1} |x-y|`` and
    ``|K_t - K_s| <= C s^{-3/2} |t-s|``. This is an empirical sanity bound.
    """
    gen = as_generator(rng)
    L = basis.spec.L
    t0, t1 = t_range
    ts = np.exp(gen.uniform(math.log(t0), math.log(t1), samples))
    x, y, z = (gen.uniform(0, L, samples) for _ in range(3))
    s = np.exp(gen.uniform(math.log(t0), math.log(t1), samples))
    b_all = _basis_for_time(basis, min(t0, s.min(), ts.min()))
    lam = b_all.eigenvalues
    px, py, pz = b_all.values(x), b_all.values(y), b_all.values(z)
    wt = np.exp(np.outer(lam, ts))
    ws = np.exp(np.outer(lam, s))
    kxy = np.einsum("nj,nj,nj->j", wt, px, py)
    kxz = np.einsum("nj,nj,nj->j", wt, px, pz)
    kyz = np.einsum("nj,nj,nj->j", wt, py, pz)
    kxy_s = np.einsum("nj,nj,nj->j", ws, px, py)
    c1 = float(np.max(kxy * np.sqrt(ts) * np.exp(b * np.abs(x - y) / np.sqrt(ts))))
    c2 = float(np.max(np.abs(kxz - kyz) * ts / np.maximum(np.abs(x - y), 1e-300)))
    smin = np.minimum(ts, s)
    c3 = float(np.max(np.abs(kxy - kxy_s) * smin**1.5 / np.maximum(np.abs(ts - s), 1e-300)))
    kmin = float(kxy.min())
    return RegularityReport(samples, b, c1, c2, c3, kmin, kmin > 0)
