"""Monte Carlo estimators for the asymptotic variance sigma_L^2 and related statistics.

``sigma_L^2 = E[ int e^{L1+2L2+L3} / (int e^{L1+L2} * int e^{L2+L3}) ]`` for three
independent stationary profiles ``L1, L2, L3``. All integrals are evaluated in
log space.

For the per-site split over unit windows ``[y, y+1]``, the second denominator
is shifted by ``(L2+L3)(y)``, so the shifts cancel and the per-site terms sum
to the full ratio on every sample. ``printed_shift=True`` selects the variant
that shifts both denominators by ``(L1+L2)(y)``. That variant multiplies each
term by ``exp(L1(y) - L3(y))``, and it is kept only for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Sequence

import numpy as np

from .errors import InputError
from .gibbs_stationary import GibbsChainConfig, sample_two_layer
from .grid_paths import Grid, Path, RngStream, as_generator, log_trapezoid_exp, sample_bm

MIN_BATCHES = 20


@dataclass(frozen=True)
class SigmaEstimate:
    L: float
    u: float
    v: float
    n_samples: int
    mean: float
    std_error: float
    per_site: np.ndarray | None = None
    per_site_stderr: np.ndarray | None = None

    def as_row(self) -> dict:
        return {"L": self.L, "u": self.u, "v": self.v, "n": self.n_samples, "mean": self.mean, "stderr": self.std_error}


@dataclass(frozen=True)
class ScalingFit:
    Ls: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    slope: float
    intercept: float
    slope_stderr: float
    slope_ci: tuple[float, float]
    chi2_red: float
    estimates: tuple = field(default=())

    def as_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_stderr": self.slope_stderr,
            "ci": list(self.slope_ci),
            "chi2_red": self.chi2_red,
            "points": [
                {"L": float(L), "mean": float(m), "stderr": float(s)}
                for L, m, s in zip(self.Ls, self.means, self.stderrs)
            ],
        }


@dataclass(frozen=True)
class VarEstimate:
    """A variance-type estimate with its standard error."""

    value: float
    stderr: float
    n: int


# --------------------------------------------------------------------------- ratio functionals


def _values(*paths: Path) -> list[np.ndarray]:
    g = paths[0].grid
    for p in paths[1:]:
        if p.grid != g:
            raise InputError("paths must share a grid")
    return [p.values for p in paths]


def log_sigma_ratio(l1: Path, l2: Path, l3: Path) -> np.ndarray | float:
    a, b, c = _values(l1, l2, l3)
    dx = l1.grid.dx
    out = log_trapezoid_exp(a + 2 * b + c, dx) - log_trapezoid_exp(a + b, dx) - log_trapezoid_exp(b + c, dx)
    return out


def sigma_ratio(l1: Path, l2: Path, l3: Path) -> np.ndarray | float:
    """Per-sample ratio whose mean is ``sigma_L^2``; batches give an array."""
    out = np.exp(log_sigma_ratio(l1, l2, l3))
    return float(out) if np.ndim(out) == 0 else out


def _unit_windows(grid: Grid) -> int:
    L = grid.length
    if abs(L - round(L)) > 1e-9:
        raise InputError(f"per-site terms need an integer L, got {L}")
    per_unit = 1.0 / grid.dx
    if abs(per_unit - round(per_unit)) > 1e-9:
        raise InputError(f"per-site terms need 1/dx integer, got dx={grid.dx}")
    return int(round(per_unit))


def _site_terms(l1, l2, l3, y: int, with_numerator: bool, printed_shift: bool):
    a, b, c = _values(l1, l2, l3)
    grid = l1.grid
    m = _unit_windows(grid)
    L = int(round(grid.length))
    if int(y) != y or not (0 <= y <= L - 1):
        raise InputError(f"y must be an integer in [0, {L - 1}], got {y}")
    iy = y * m
    dx = grid.dx
    s12 = a + b
    s23 = b + c
    sh12 = s12[..., iy : iy + 1]
    sh23 = s12[..., iy : iy + 1] if printed_shift else s23[..., iy : iy + 1]
    log_den = log_trapezoid_exp(s12 - sh12, dx) + log_trapezoid_exp(s23 - sh23, dx)
    if not with_numerator:
        return -log_den
    s = a + 2 * b + c
    win = s[..., iy : iy + m + 1] - s[..., iy : iy + 1]
    return log_trapezoid_exp(win, dx) - log_den


def f_of_y(l1: Path, l2: Path, l3: Path, y: int, printed_shift: bool = False):
    """Per-sample term of the unit-window split of the ratio.

    Numerator ``int_y^{y+1} e^{S(x)-S(y)}`` with ``S = L1+2L2+L3``; denominators
    ``int e^{(L1+L2)(x)-(L1+L2)(y)}`` and ``int e^{(L2+L3)(x)-(L2+L3)(y)}``.
    """
    out = np.exp(_site_terms(l1, l2, l3, y, True, printed_shift))
    return float(out) if np.ndim(out) == 0 else out


def fhat_of_y(l1: Path, l2: Path, l3: Path, y: int, printed_shift: bool = False):
    """:func:`f_of_y` with the numerator replaced by 1."""
    out = np.exp(_site_terms(l1, l2, l3, y, False, printed_shift))
    return float(out) if np.ndim(out) == 0 else out


def f_numerator(l1: Path, l2: Path, l3: Path, y: int):
    a, b, c = _values(l1, l2, l3)
    m = _unit_windows(l1.grid)
    s = a + 2 * b + c
    iy = int(y) * m
    out = np.exp(log_trapezoid_exp(s[..., iy : iy + m + 1] - s[..., iy : iy + 1], l1.grid.dx))
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------- sampling


def triple_sampler(
    L: float, u: float, v: float, grid: Grid, cfg: GibbsChainConfig | None
) -> Callable[[RngStream, int], tuple[Path, Path, Path]]:
    """Returns ``draw(stream, n) -> (L1, L2, L3)``, three independent batches."""
    cfg = cfg or GibbsChainConfig()

    def draw(stream: RngStream, n: int) -> tuple[Path, Path, Path]:
        if u == 0 and v == 0:
            gen = stream.generator()
            return tuple(sample_bm(grid, 0.0, 1.0, gen, n) for _ in range(3))
        return tuple(sample_two_layer(L, u, v, grid, cfg, stream.spawn(k), n).lambda_ for k in range(3))

    return draw


def batch_means_stderr(x: np.ndarray, n_batches: int) -> float:
    """Standard error of the mean of ``x`` by non-overlapping batch means."""
    if n_batches < MIN_BATCHES:
        raise InputError(f"need at least {MIN_BATCHES} batches, got {n_batches}")
    x = np.asarray(x, dtype=float)
    if x.shape[0] < n_batches:
        raise InputError("fewer samples than batches")
    means = np.array([b.mean(axis=0) for b in np.array_split(x, n_batches)])
    return np.std(means, axis=0, ddof=1) / math.sqrt(n_batches)


def _default_chunk(grid: Grid) -> int:
    return max(64, 2**20 // grid.n_points)


def _sigma_chunk(L, u, v, dx, cfg, per_site, stream: RngStream, n: int):
    grid = Grid.from_dx(L, dx)
    l1, l2, l3 = triple_sampler(L, u, v, grid, cfg)(stream, n)
    ratios = sigma_ratio(l1, l2, l3)
    if per_site is None:
        return ratios, None
    fn = f_of_y if per_site == "f" else fhat_of_y
    sites = np.stack([fn(l1, l2, l3, y) for y in range(int(round(L)))], axis=-1)
    return ratios, sites


def estimate_sigma2(
    L: float,
    u: float,
    v: float,
    n_samples: int,
    sampler_cfg: GibbsChainConfig | None,
    rng: RngStream,
    dx: float = 0.05,
    n_batches: int = MIN_BATCHES,
    per_site: str | None = None,
    chunk: int | None = None,
    map_fn: Callable = map,
) -> SigmaEstimate:
    """Mean of :func:`sigma_ratio` over ``n_samples`` independent triples.

    Chunk ``k`` of the sample uses ``rng.spawn(k)``, so the result does not depend
    on how chunks are scheduled; ``map_fn`` may be a process-pool map.
    ``per_site`` may be ``"f"`` or ``"fhat"``.
    """
    if n_samples < 100:
        raise InputError(f"n_samples must be at least 100, got {n_samples}")
    if not isinstance(rng, RngStream):
        raise InputError("estimate_sigma2 needs an RngStream")
    grid = Grid.from_dx(L, dx)
    if abs(grid.length - L) > 1e-12:
        raise InputError("L must be a multiple of dx")
    if per_site is not None:
        if per_site not in ("f", "fhat"):
            raise InputError("per_site must be 'f' or 'fhat'")
        _unit_windows(grid)
    chunk = chunk or _default_chunk(grid)
    starts = list(range(0, n_samples, chunk))
    sizes = [min(chunk, n_samples - lo) for lo in starts]
    work = partial(_sigma_chunk, L, u, v, dx, sampler_cfg, per_site)
    parts = list(map_fn(work, [rng.spawn(k) for k in range(len(starts))], sizes))
    ratios = np.concatenate([p[0] for p in parts])
    mean = float(np.mean(ratios))
    se = float(batch_means_stderr(ratios, n_batches))
    ps = pse = None
    if per_site is not None:
        sites = np.concatenate([p[1] for p in parts])
        ps = sites.mean(axis=0)
        pse = batch_means_stderr(sites, n_batches)
    return SigmaEstimate(float(L), float(u), float(v), n_samples, mean, se, ps, pse)


def fit_loglog(Ls: Sequence[float], means: Sequence[float], stderrs: Sequence[float], level: float = 0.95):
    """Weighted least squares of ``log mean`` on ``log L``.

    Weights use the delta method, ``se(log m) = se/m``. The slope error is
    inflated by ``sqrt(chi2_red)`` when the scatter exceeds the error bars.
    Returns ``(slope, intercept, slope_stderr, ci, chi2_red)``.
    """
    from scipy.stats import norm

    Ls = np.asarray(Ls, dtype=float)
    m = np.asarray(means, dtype=float)
    se = np.asarray(stderrs, dtype=float)
    if len(np.unique(Ls)) < 3:
        raise InputError("need at least 3 distinct L values")
    if np.any(m <= 0):
        raise InputError("means must be positive")
    x = np.log(Ls)
    y = np.log(m)
    sl = se / m
    if np.all(sl == 0):
        w = np.ones_like(x)
    else:
        w = 1.0 / np.maximum(sl, 1e-300) ** 2
    X = np.column_stack([np.ones_like(x), x])
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    beta = cov @ (X.T @ (w * y))
    resid = y - X @ beta
    dof = len(x) - 2
    chi2_red = float(np.sum(w * resid**2) / dof) if dof > 0 else 0.0
    if np.all(sl == 0):
        slope_se = 0.0
    else:
        slope_se = float(math.sqrt(cov[1, 1]) * max(1.0, math.sqrt(chi2_red)))
    z = norm.ppf(0.5 + level / 2)
    slope = float(beta[1])
    return slope, float(beta[0]), slope_se, (slope - z * slope_se, slope + z * slope_se), chi2_red


def fit_from_estimates(estimates: Sequence[SigmaEstimate]) -> ScalingFit:
    Ls = np.array([e.L for e in estimates])
    means = np.array([e.mean for e in estimates])
    ses = np.array([e.std_error for e in estimates])
    slope, icpt, sse, ci, chi2 = fit_loglog(Ls, means, ses)
    return ScalingFit(Ls, means, ses, slope, icpt, sse, ci, chi2, tuple(estimates))


def fit_scaling(
    Ls: Sequence[float],
    u: float,
    v: float,
    n_samples: int,
    rng: RngStream,
    sampler_cfg: GibbsChainConfig | None = None,
    dx: float = 0.05,
    map_fn: Callable = map,
) -> ScalingFit:
    """Estimate ``sigma_L^2`` for each ``L`` (stream ``rng.spawn(i)``) and fit the slope."""
    Ls = list(Ls)
    if len(set(Ls)) < 3 or max(Ls) / min(Ls) < 8:
        raise InputError("need at least 3 distinct L values spanning a factor of 8")
    ests = [
        estimate_sigma2(L, u, v, n_samples, sampler_cfg, rng.spawn(i), dx, map_fn=map_fn) for i, L in enumerate(Ls)
    ]
    return fit_from_estimates(ests)


# --------------------------------------------------------------------------- subleading statistic


def _inner_profiles(L, u, v, grid, n, stream_or_gen, cfg):
    if u == 0 and v == 0:
        return sample_bm(grid, 0.0, 1.0, as_generator(stream_or_gen), n).values
    if not isinstance(stream_or_gen, RngStream):
        raise InputError("u + v > 0 needs an RngStream for the inner sampler")
    return sample_two_layer(L, u, v, grid, cfg or GibbsChainConfig(), stream_or_gen, n).lam


def estimate_YL(
    l1_profile: Path,
    u: float,
    v: float,
    n_inner: int,
    rng: RngStream | np.random.Generator,
    cfg: GibbsChainConfig | None = None,
    inner: np.ndarray | None = None,
) -> float:
    """``mean_j log int_0^L exp(L1(x) + L2_j(x)) dx`` over fresh stationary ``L2_j``.

    ``inner`` may supply the ``L2_j`` grid values directly.
    """
    if n_inner < 10:
        raise InputError(f"n_inner must be at least 10, got {n_inner}")
    grid = l1_profile.grid
    if inner is None:
        inner = _inner_profiles(grid.length, u, v, grid, n_inner, rng, cfg)
    vals = log_trapezoid_exp(l1_profile.values[None, :] + inner, grid.dx)
    return float(np.mean(vals))


def _nested_variance(samples: np.ndarray, inner_var: np.ndarray, n_inner: int) -> VarEstimate:
    """Variance of conditional means with the inner-noise bias removed (clipped at 0)."""
    n = samples.size
    raw = float(np.var(samples, ddof=1))
    val = max(0.0, raw - float(np.mean(inner_var)) / n_inner)
    c = samples - samples.mean()
    m4 = float(np.mean(c**4))
    se = math.sqrt(max(m4 - raw**2, 0.0) / n)
    return VarEstimate(val, se, n)


def yl_variance(
    L: float,
    u: float,
    v: float,
    n_outer: int,
    n_inner: int,
    rng: RngStream,
    dx: float = 0.05,
    cfg: GibbsChainConfig | None = None,
    chunk: int = 50,
) -> VarEstimate:
    """``Var[Y_L] / L`` with a fresh inner sample for every outer profile."""
    if n_inner < 10:
        raise InputError(f"n_inner must be at least 10, got {n_inner}")
    grid = Grid.from_dx(L, dx)
    y = np.empty(n_outer)
    iv = np.empty(n_outer)
    for k, lo in enumerate(range(0, n_outer, chunk)):
        n = min(chunk, n_outer - lo)
        stream = rng.spawn(k)
        outer = _inner_profiles(L, u, v, grid, n, stream.spawn(0), cfg)
        inner = _inner_profiles(L, u, v, grid, n * n_inner, stream.spawn(1), cfg).reshape(n, n_inner, -1)
        logs = log_trapezoid_exp(outer[:, None, :] + inner, grid.dx)
        y[lo : lo + n] = logs.mean(axis=1)
        iv[lo : lo + n] = logs.var(axis=1, ddof=1)
    est = _nested_variance(y, iv, n_inner)
    return VarEstimate(est.value / L, est.stderr / L, n_outer)


def limit_var_maxsum(
    n_outer: int,
    n_inner: int,
    grid: Grid,
    rng: RngStream,
    degenerate: bool = False,
    chunk: int = 50,
) -> VarEstimate:
    """``Var[ E_{B2} max_{[0,1]} (B1 + B2) ]`` for independent standard Brownian motions.

    ``grid`` discretizes [0, 1]. ``degenerate=True`` sets ``B2 = 0``, which
    gives ``Var max B1 = 1 - 2/pi``.
    """
    if n_inner < 10 and not degenerate:
        raise InputError(f"n_inner must be at least 10, got {n_inner}")
    if abs(grid.length - 1.0) > 1e-12:
        raise InputError("grid must cover [0, 1]")
    y = np.empty(n_outer)
    iv = np.zeros(n_outer)
    for k, lo in enumerate(range(0, n_outer, chunk)):
        n = min(chunk, n_outer - lo)
        gen = rng.spawn(k).generator()
        b1 = sample_bm(grid, 0.0, 1.0, gen, n).values
        if degenerate:
            y[lo : lo + n] = b1.max(axis=1)
            continue
        b2 = sample_bm(grid, 0.0, 1.0, gen, n * n_inner).values.reshape(n, n_inner, -1)
        mx = (b1[:, None, :] + b2).max(axis=2)
        y[lo : lo + n] = mx.mean(axis=1)
        iv[lo : lo + n] = mx.var(axis=1, ddof=1)
    return _nested_variance(y, iv, 1 if degenerate else n_inner)


@dataclass(frozen=True)
class CoupledYL:
    """``Var[Y_L]/L`` for several ``L`` and the max-sum limit, all from the same Brownian paths."""

    Ls: tuple[float, ...]
    yl: tuple[VarEstimate, ...]
    limit: VarEstimate


def yl_limit_coupled(
    Ls: Sequence[float],
    n_outer: int,
    n_inner: int,
    rng: RngStream,
    dx: float = 0.05,
    refine: int = 4,
    chunk: int = 25,
) -> CoupledYL:
    """Common-random-number version of :func:`yl_variance` and :func:`limit_var_maxsum`.

    Standard Brownian paths ``B1, B2`` are drawn on a fine grid of [0, 1] with
    ``refine * max(L)/dx`` cells. Brownian scaling ``Lam(x) = sqrt(L) B(x/L)``
    gives exact ``u = v = 0`` profiles on the ``dx`` grid of [0, L] by
    subsampling; the limit uses the maximum on the full fine grid. Every
    marginal estimate has the law of its uncoupled version, while differences
    between them have much smaller noise.
    """
    Ls = [float(L) for L in Ls]
    cells = [int(round(L / dx)) for L in Ls]
    fine = refine * max(cells)
    if any(abs(L / dx - c) > 1e-9 or fine % c for L, c in zip(Ls, cells)):
        raise InputError("every L/dx must be an integer dividing the fine grid")
    if n_inner < 10:
        raise InputError(f"n_inner must be at least 10, got {n_inner}")
    grid = Grid(1.0, fine + 1)
    y = np.empty((len(Ls) + 1, n_outer))
    iv = np.empty((len(Ls) + 1, n_outer))
    for k, lo in enumerate(range(0, n_outer, chunk)):
        n = min(chunk, n_outer - lo)
        gen = rng.spawn(k).generator()
        b1 = sample_bm(grid, 0.0, 1.0, gen, n).values
        b2 = sample_bm(grid, 0.0, 1.0, gen, n * n_inner).values.reshape(n, n_inner, -1)
        s = b1[:, None, :] + b2
        for j, (L, c) in enumerate(zip(Ls, cells)):
            logs = log_trapezoid_exp(math.sqrt(L) * s[..., :: fine // c], dx)
            y[j, lo : lo + n] = logs.mean(axis=1)
            iv[j, lo : lo + n] = logs.var(axis=1, ddof=1)
        mx = s.max(axis=2)
        y[-1, lo : lo + n] = mx.mean(axis=1)
        iv[-1, lo : lo + n] = mx.var(axis=1, ddof=1)
    ests = []
    for j, L in enumerate(Ls):
        e = _nested_variance(y[j], iv[j], n_inner)
        ests.append(VarEstimate(e.value / L, e.stderr / L, n_outer))
    return CoupledYL(tuple(Ls), tuple(ests), _nested_variance(y[-1], iv[-1], n_inner))
