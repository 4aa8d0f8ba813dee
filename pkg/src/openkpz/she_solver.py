"""Finite-difference solver for the open stochastic heat equation.

    d_t Z = (1/2) d_xx Z + Z xi,   d_x Z(0) = A Z(0),   d_x Z(L) = B Z(L).

One step of the semi-implicit Euler-Maruyama scheme is

    (I - dt D / 2) Z^{m+1} = Z^m (1 + xi^m),   xi^m_i ~ N(0, dt/w_i) independent,

with control-volume widths ``w_i = dx`` inside and ``dx/2`` at the two end nodes.

Here ``D`` is the second difference with Robin ghost points
``Z_{-1} = Z_1 - 2 dx A Z_0`` and ``Z_n = Z_{n-2} + 2 dx B Z_{n-1}``. The noise is
read in the Ito sense and no counterterm is added. The tridiagonal system is
solved by LAPACK's banded solver, with every replica as a right-hand side.
``D`` is self-adjoint for the trapezoid inner product with the same weights
``w_i``. The half cells at the ends must carry the doubled noise variance;
with ``dt/dx`` there, the height increment over the first cell has only about
60% of its stationary variance.

Without noise the scheme is implicit Euler for ``d_t w = (1/2) d_xx w``. Its
exact solution at time ``t`` is the Robin heat semigroup of ``d_t w = d_zz w``
evaluated at time ``t/2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.linalg import solve_banded

from .errors import InputError, NumericalError
from .gibbs_stationary import GibbsChainConfig, sample_two_layer
from .grid_paths import Grid, Path, RngStream, as_generator, log_trapezoid_exp, sample_bm, trapezoid
from .robin_heat import RobinSpec
from .sigma_variance import VarEstimate

CLIP_WARN_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class SheTrajectory:
    """Stored snapshots ``fields[k]`` of ``Z(., times[k])``; each has shape ``(n,)`` or ``(m, n)``."""

    spec: RobinSpec
    grid: Grid
    dt: float
    times: np.ndarray
    fields: np.ndarray
    scheme: str = "semi_implicit"
    clip_count: int = 0
    site_steps: int = 0
    seed_info: dict = field(default_factory=dict)

    @property
    def clip_fraction(self) -> float:
        return self.clip_count / self.site_steps if self.site_steps else 0.0

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 0.5 * self.dt + 1e-12:
            raise InputError(f"time {t} was not stored; stored times {self.times.tolist()}")
        return self.fields[k]


@dataclass(frozen=True)
class HeightStats:
    L: float
    u: float
    v: float
    t: float
    var_height: float
    stderr: float
    sigma2_ref: float | None
    n_replicas: int
    clip_fraction: float = 0.0

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class KSReport:
    xs: tuple[float, ...]
    statistics: tuple[float, ...]
    pvalues: tuple[float, ...]
    control_statistics: tuple[float, ...]
    control_pvalues: tuple[float, ...]
    n_replicas: int
    clip_fraction: float

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class SwapReport:
    mean_gf: float
    mean_fg: float
    var_gf: float
    var_fg: float
    se_mean_gf: float
    se_mean_fg: float
    se_var_gf: float
    se_var_fg: float
    ks_pvalue: float
    n_replicas: int

    @property
    def means_agree(self) -> bool:
        return abs(self.mean_gf - self.mean_fg) <= 3 * math.hypot(self.se_mean_gf, self.se_mean_fg)

    @property
    def vars_agree(self) -> bool:
        return abs(self.var_gf - self.var_fg) <= 3 * math.hypot(self.se_var_gf, self.se_var_fg)


def robin_banded(spec: RobinSpec, grid: Grid, dt: float) -> np.ndarray:
    """Banded form of ``I - (dt/2) D`` for :func:`scipy.linalg.solve_banded`."""
    n, dx = grid.n_points, grid.dx
    r = 0.5 * dt / dx**2
    ab = np.zeros((3, n))
    ab[1, :] = 1 + 2 * r
    ab[0, 1:] = -r
    ab[2, :-1] = -r
    ab[1, 0] = 1 + r * (2 + 2 * dx * spec.A)
    ab[0, 1] = -2 * r
    ab[1, -1] = 1 + r * (2 - 2 * dx * spec.B)
    ab[2, -2] = -2 * r
    return ab


def _n_steps(t_end: float, dt: float) -> int:
    k = t_end / dt
    n = int(round(k))
    if abs(k - n) > 1e-9 * max(1.0, k):
        warnings.warn(f"t_end/dt = {k:.6g} is not an integer; using {n} steps", stacklevel=3)
    return n


def solve_she(
    spec: RobinSpec,
    init: Path,
    t_end: float,
    dt: float,
    rng: RngStream | np.random.Generator | None,
    noise_scale: float = 1.0,
    save_times: Sequence[float] | None = None,
    strict: bool = False,
) -> SheTrajectory:
    """Evolve ``init`` (one profile or a batch of replicas) to ``t_end``.

    ``noise_scale=0`` gives the deterministic heat flow (``rng`` may then be
    ``None``). Snapshots are kept at ``save_times`` (default: ``t_end`` only),
    rounded to the time grid.
    """
    grid = init.grid
    if abs(grid.length - spec.L) > 1e-12 * spec.L:
        raise InputError("init grid length differs from L")
    if np.any(init.values < 0) or np.all(init.values == 0):
        raise InputError("init must be nonnegative and not identically zero")
    if not (dt > 0 and t_end >= 0):
        raise InputError("need dt > 0 and t_end >= 0")
    n_steps = _n_steps(t_end, dt)
    save = [t_end] if save_times is None else sorted(save_times)
    save_steps = sorted({int(round(s / dt)) for s in save})
    if save_steps and save_steps[-1] > n_steps:
        raise InputError("save time beyond t_end")
    batch = init.values.ndim == 2
    z = np.array(init.values.T if batch else init.values[:, None], dtype=float)
    n, m = z.shape
    ab = robin_banded(spec, grid, dt)
    sd = np.full((n, 1), noise_scale * math.sqrt(dt / grid.dx))
    sd[[0, -1]] *= math.sqrt(2.0)
    gen = as_generator(rng) if noise_scale != 0 else None
    snaps = []
    clips = 0
    if save_steps and save_steps[0] == 0:
        snaps.append(z.copy())
    for step in range(1, n_steps + 1):
        if gen is not None:
            xi = gen.standard_normal((n, m))
            xi *= sd
            xi += 1.0
            z *= xi
        z = solve_banded((1, 1), ab, z, overwrite_b=True, check_finite=False)
        neg = z < 0
        if neg.any():
            clips += int(neg.sum())
            z[neg] = 0.0
        if step in save_steps:
            snaps.append(z.copy())
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite values in the SHE solution")
    site_steps = n * m * n_steps
    frac = clips / site_steps if site_steps else 0.0
    if frac > CLIP_WARN_FRACTION:
        msg = f"clip fraction {frac:.3g} exceeds {CLIP_WARN_FRACTION}"
        if strict:
            raise NumericalError(msg)
        warnings.warn(msg, stacklevel=2)
    fields = np.array([s.T if batch else s[:, 0] for s in snaps])
    times = np.array(save_steps, dtype=float) * dt
    seed = rng.to_dict() if isinstance(rng, RngStream) else {}
    return SheTrajectory(spec, grid, dt, times, fields, "semi_implicit", clips, site_steps, seed)


def height(traj: SheTrajectory, t: float) -> Path:
    """``log Z(., t)``; raises if any value is zero (for example, after clipping)."""
    z = traj.at(t)
    if np.any(z <= 0):
        raise NumericalError(
            f"Z has {int(np.sum(z <= 0))} nonpositive values at t={t} "
            f"(clip count {traj.clip_count}, clip fraction {traj.clip_fraction:.3g})"
        )
    return Path(traj.grid, np.log(z))


# --------------------------------------------------------------------------- experiments


def stationary_profiles(L, u, v, grid, n, rng: RngStream, cfg: GibbsChainConfig | None) -> np.ndarray:
    if u == 0 and v == 0:
        return sample_bm(grid, 0.0, 1.0, rng.generator(), n).values
    return sample_two_layer(L, u, v, grid, cfg or GibbsChainConfig(), rng, n).lam


def _evolve_stationary(L, u, v, t, n_replicas, cfg, rng: RngStream, dx, dt, save_times=None):
    grid = Grid.from_dx(L, dx)
    lam = stationary_profiles(L, u, v, grid, n_replicas, rng.spawn(0), cfg)
    spec = RobinSpec.from_uv(L, u, v)
    traj = solve_she(spec, Path(grid, np.exp(lam)), t, dt, rng.spawn(1), save_times=save_times)
    return grid, lam, traj


def stationarity_test(
    L: float,
    u: float,
    v: float,
    t: float,
    n_replicas: int,
    cfg: GibbsChainConfig | None,
    rng: RngStream,
    dx: float = 0.05,
    dt: float = 2.5e-4,
) -> KSReport:
    """Two-sample KS of ``H(x,t) - H(0,t)`` against fresh stationary ``Lam(x)``.

    Points ``x = L/4, L/2, 3L/4``. The control compares the same increments
    with Brownian samples of doubled variance and should fail.
    """
    if t < 0:
        raise InputError("t must be nonnegative")
    grid, lam, traj = _evolve_stationary(L, u, v, t, n_replicas, cfg, rng, dx, dt)
    h = np.log(traj.at(t)) if t > 0 else lam
    fresh = stationary_profiles(L, u, v, grid, n_replicas, rng.spawn(2), cfg)
    control = sample_bm(grid, 0.0, 2.0, rng.spawn(3).generator(), n_replicas).values
    xs = (L / 4, L / 2, 3 * L / 4)
    st, pv, cst, cpv = [], [], [], []
    for x in xs:
        i = grid.index_of(x)
        inc = h[:, i] - h[:, 0]
        r = stats.ks_2samp(inc, fresh[:, i])
        c = stats.ks_2samp(inc, control[:, i])
        st.append(float(r.statistic))
        pv.append(float(r.pvalue))
        cst.append(float(c.statistic))
        cpv.append(float(c.pvalue))
    return KSReport(xs, tuple(st), tuple(pv), tuple(cst), tuple(cpv), n_replicas, traj.clip_fraction)


def _moment_se(x: np.ndarray) -> tuple[float, float, float, float]:
    n = x.size
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    c = x - mean
    se_var = math.sqrt(max(float(np.mean(c**4)) - var**2, 0.0) / n)
    return mean, math.sqrt(var / n), var, se_var


def swap_invariance_test(
    L: float,
    u: float,
    v: float,
    t: float,
    f: Path,
    g: Path,
    n_replicas: int,
    rng: RngStream | None,
    dt: float = 2.5e-4,
    noise_scale: float = 1.0,
) -> SwapReport:
    """Compare ``log Z(g,0;f,t)`` and ``log Z(f,0;g,t)`` over independent noises."""
    if f.grid != g.grid:
        raise InputError("f and g must share a grid")
    spec = RobinSpec.from_uv(L, u, v)
    grid = f.grid
    out = []
    for k, (a, b) in enumerate(((g, f), (f, g))):
        init = Path(grid, np.broadcast_to(a.values, (n_replicas, grid.n_points)))
        stream = rng.spawn(k) if rng is not None else None
        traj = solve_she(spec, init, t, dt, stream, noise_scale=noise_scale)
        z = traj.at(t)
        out.append(np.log(trapezoid(z * b.values, grid.dx)))
    gf, fg = out
    m1, s1, v1, sv1 = _moment_se(gf)
    m2, s2, v2, sv2 = _moment_se(fg)
    if noise_scale == 0:
        ks_p = 1.0
    else:
        ks_p = float(stats.ks_2samp(gf, fg).pvalue)
    return SwapReport(m1, m2, v1, v2, s1, s2, sv1, sv2, ks_p, n_replicas)


def jackknife_variance(x: np.ndarray) -> tuple[float, float]:
    """Sample variance and its delete-one jackknife standard error."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 3:
        raise InputError("need at least 3 replicas")
    xc = x - x.mean()
    S = xc.sum()
    Q = np.sum(xc**2)
    loo = ((Q - xc**2) - (S - xc) ** 2 / (n - 1)) / (n - 2)
    var = float(Q / (n - 1))
    se = math.sqrt((n - 1) / n * float(np.sum((loo - loo.mean()) ** 2)))
    return var, se


def variance_of_height(
    L: float,
    u: float,
    v: float,
    t: float | Sequence[float],
    n_replicas: int,
    cfg: GibbsChainConfig | None,
    rng: RngStream,
    dx: float = 0.05,
    dt: float = 2.5e-4,
    sigma2_ref: float | None = None,
) -> HeightStats | list[HeightStats]:
    """``Var H(0,t)`` under stationary initial data; several ``t`` share one run."""
    ts = [t] if np.isscalar(t) else list(t)
    if any(s < 0 for s in ts):
        raise InputError("t must be nonnegative")
    tmax = max(ts)
    grid, lam, traj = _evolve_stationary(L, u, v, tmax, n_replicas, cfg, rng, dx, dt, save_times=ts)
    res = []
    for s in ts:
        h0 = np.log(traj.at(s)[:, 0]) if s > 0 else lam[:, 0]
        var, se = jackknife_variance(h0)
        res.append(HeightStats(L, u, v, s, var, se, sigma2_ref, n_replicas, traj.clip_fraction))
    return res[0] if np.isscalar(t) else res


def estimate_IL_variance(
    L: float,
    u: float,
    v: float,
    t: float,
    n_outer: int,
    n_inner: int,
    cfg: GibbsChainConfig | None,
    rng: RngStream,
    dx: float = 0.05,
    dt: float = 2.5e-4,
) -> VarEstimate:
    """Variance over replicas of the leading-order term ``I_L(t)``.

    Per replica, with inner stationary samples ``Lam2_j`` shared by both times:
    ``I = mean_j [log int Z(x,t) e^{Lam2_j} - log int e^{Lam1 + Lam2_j}]``.
    The expectation over replicas and noise is replaced by the replica mean,
    which does not change the variance. The inner Monte Carlo noise adds
    ``E[var_j]/n_inner`` to the raw variance; this is subtracted.
    """
    if n_inner < 10:
        raise InputError(f"n_inner must be at least 10, got {n_inner}")
    if t == 0:
        return VarEstimate(0.0, 0.0, n_outer)
    grid, lam, traj = _evolve_stationary(L, u, v, t, n_outer, cfg, rng, dx, dt)
    z = traj.at(t)
    if np.any(z <= 0):
        raise NumericalError("clipped SHE values; cannot take logarithms")
    logz = np.log(z)
    vals = np.empty(n_outer)
    ivar = np.empty(n_outer)
    chunk = max(1, 2**21 // (n_inner * grid.n_points))
    for k, lo in enumerate(range(0, n_outer, chunk)):
        n = min(chunk, n_outer - lo)
        inner = stationary_profiles(L, u, v, grid, n * n_inner, rng.spawn(10 + k), cfg).reshape(n, n_inner, -1)
        d = log_trapezoid_exp(logz[lo : lo + n, None, :] + inner, grid.dx) - log_trapezoid_exp(
            lam[lo : lo + n, None, :] + inner, grid.dx
        )
        vals[lo : lo + n] = d.mean(axis=1)
        ivar[lo : lo + n] = d.var(axis=1, ddof=1)
    var, se = jackknife_variance(vals)
    var = max(0.0, var - float(ivar.mean()) / n_inner)
    return VarEstimate(var, se, n_outer)
