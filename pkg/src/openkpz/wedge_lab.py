"""Planar wedge geometry, killed kernels and wedge Monte Carlo.

Three independent bridges ``B1, B2, B3`` map to a planar path ``V`` through the
pairwise sums ``v_k . V = B_k + B_{k+1}`` with

    v_k = -(sqrt(2)/2) (sqrt(3), (-1)^k),   |v_k|^2 = 2,   v_1 . v_2 = 1.

``V`` is then a standard planar bridge. The event that both sums stay below
``q`` is the event that ``V`` stays in the wedge ``N_q = {omega <= q}``, where
``omega(p) = max_k p . v_k``. ``N_q`` has opening angle ``2 pi / 3``, apex
``q h`` with ``h = (-sqrt(6)/3, 0)``, and opens towards ``+x``.

Monte Carlo killing comes in two flavours. Plain killing checks the grid
points only, so it misses excursions between them and overestimates survival.
The ``correction`` flavour also weights each step by the probability that the
Brownian bridge between two grid points does not cross either edge line,
``1 - exp(-2 d0 d1 / dt)`` per line. This is exact for one line. For the wedge
it treats the two lines as independent, which matters only near the apex.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np
from scipy import integrate, special

from .errors import InputError
from .grid_paths import Grid, Path, RngStream

SQ2 = math.sqrt(2.0)
V1 = -(SQ2 / 2) * np.array([math.sqrt(3.0), -1.0])
V2 = -(SQ2 / 2) * np.array([math.sqrt(3.0), 1.0])
H = np.array([-math.sqrt(6.0) / 3, 0.0])
OPENING = 2 * math.pi / 3
SERIES_TOL = 1e-14
PATH_CHUNK = 20000


@dataclass(frozen=True)
class WedgeConfig:
    q: float
    v1: np.ndarray = V1
    v2: np.ndarray = V2

    def __post_init__(self) -> None:
        if not math.isfinite(self.q):
            raise InputError(f"q must be finite, got {self.q}")

    @property
    def apex(self) -> np.ndarray:
        return self.q * H

    @property
    def gram(self) -> np.ndarray:
        G = np.array([self.v1, self.v2])
        return G @ G.T

    def omega(self, p) -> np.ndarray | float:
        p = np.asarray(p, dtype=float)
        out = np.maximum(p @ self.v1, p @ self.v2)
        return float(out) if out.ndim == 0 else out

    def contains(self, p, strict: bool = True) -> np.ndarray | bool:
        w = self.omega(p)
        return w < self.q if strict else w <= self.q

    def to_polar(self, p) -> tuple[np.ndarray, np.ndarray]:
        """Radius about the apex and angle ``phi`` in ``(0, 2 pi/3)`` measured from the lower edge."""
        d = np.asarray(p, dtype=float) - self.apex
        return np.hypot(d[..., 0], d[..., 1]), np.arctan2(d[..., 1], d[..., 0]) + math.pi / 3


def omega(p) -> np.ndarray | float:
    """``max(p . v1, p . v2)``."""
    return WedgeConfig(0.0).omega(p)


@dataclass(frozen=True, eq=False)
class PlanarPath:
    grid: Grid
    values: np.ndarray  # (..., n, 2)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.shape[-1] != 2 or v.shape[-2] != self.grid.n_points:
            raise InputError(f"planar values of shape {v.shape} do not match the grid")
        if not np.all(np.isfinite(v)):
            raise InputError("planar path values must be finite")
        object.__setattr__(self, "values", v)


def bridges_to_planar(b1: Path, b2: Path, b3: Path) -> PlanarPath:
    """Solve ``v_k . V = B_k + B_{k+1}`` pointwise."""
    if not (b1.grid == b2.grid == b3.grid):
        raise InputError("bridges must share a grid")
    G = np.array([V1, V2])
    s = np.stack([b1.values + b2.values, b2.values + b3.values], axis=-1)
    return PlanarPath(b1.grid, np.linalg.solve(G, s[..., None])[..., 0])


# --------------------------------------------------------------------------- cutoff


def chi(x) -> np.ndarray | float:
    """C^2 (quintic) smoothstep in ``|x|``: 0 on [-1, 1], 1 outside [-2, 2]."""
    s = np.clip(np.abs(np.asarray(x, dtype=float)) - 1.0, 0.0, 1.0)
    out = s**3 * (10 - 15 * s + 6 * s**2)
    return float(out) if out.ndim == 0 else out


def _check_r(r: float) -> None:
    if not (r > 0 and math.isfinite(r)):
        raise InputError(f"r must be positive, got {r}")


def cutoff_q_prime(r: float, y) -> np.ndarray | float:
    _check_r(r)
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise InputError("y must be nonnegative")
    with np.errstate(divide="ignore"):
        out = chi(y) * chi((4 * y + 2 - 3 * r) / (r + 2)) * np.where(y > 0, y, 1.0) ** (-2 / 3) / 3
    return float(out) if out.ndim == 0 else out


def _cutoff_breaks(r: float) -> list[float]:
    # where either chi factor switches between its flat and ramp parts
    pts = [1.0, 2.0] + [(c * (r + 2) - 2 + 3 * r) / 4 for c in (-2, -1, 1, 2)]
    return sorted(p for p in pts if p > 0)


def cutoff_q(r: float, y: float) -> float:
    """``q_r(y) = int_0^y q_r'(x) dx`` by adaptive quadrature."""
    _check_r(r)
    if not (y >= 0 and math.isfinite(y)):
        raise InputError(f"y must be nonnegative, got {y}")
    edges = [0.0] + [b for b in _cutoff_breaks(r) if b < y] + [float(y)]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        if b > a:
            total += integrate.quad(lambda s: cutoff_q_prime(r, s), a, b, limit=200, epsabs=1e-13)[0]
    return total


@dataclass(frozen=True, eq=False)
class CutoffProfile:
    """``q_r`` tabulated on a grid of ``[0, L]``."""

    r: float
    grid: Grid
    values: np.ndarray

    @classmethod
    def build(cls, r: float, grid: Grid, refine: int = 8) -> "CutoffProfile":
        fine = np.linspace(0.0, grid.length, (grid.n_points - 1) * refine + 1)
        qp = cutoff_q_prime(r, fine)
        cum = np.concatenate([[0.0], integrate.cumulative_simpson(qp, x=fine)])
        return cls(float(r), grid, cum[::refine].copy())

    @classmethod
    def zero(cls, grid: Grid) -> "CutoffProfile":
        return cls(0.0, grid, np.zeros(grid.n_points))


# --------------------------------------------------------------------------- killed kernel


def _ratio_bound(nu: np.ndarray, z: float) -> np.ndarray:
    # upper bound on I_{nu+1}(z) / I_nu(z), valid for nu >= 0
    return z / (nu + np.sqrt(nu * nu + z * z))


def _bessel_series(z: float, phi1: float, phi2: float, n_terms: int) -> float:
    """``sum_j ive(3j/2, z) sin(3j phi1/2) sin(3j phi2/2)`` with a rigorous tail cut."""
    total = 0.0
    scale = 0.0
    block = 64
    j0 = 1
    while j0 <= n_terms:
        j = np.arange(j0, min(j0 + block, n_terms + 1))
        nu = 1.5 * j
        b = special.ive(nu, z)
        terms = b * np.sin(nu * phi1) * np.sin(nu * phi2)
        csum = total + np.cumsum(terms)
        cscale = scale + np.cumsum(b)
        rho = _ratio_bound(nu, z)
        tail = b * rho / (1 - rho)
        done = np.flatnonzero(tail <= SERIES_TOL * np.maximum(cscale, 1e-300))
        if done.size:
            k = done[0]
            return float(csum[k])
        total, scale = float(csum[-1]), float(cscale[-1])
        j0 += block
    warnings.warn(f"Bessel series not converged after {n_terms} terms (z={z:.4g})", stacklevel=3)
    return total


# the series cancels heavily once z = r1 r2 / t is large; above this z the image form is used
SERIES_Z_MAX = 2.0
_NU = 1.5  # pi / OPENING
_CRIT_TOL = 1e-11
_CRIT_STEP = 1e-9


def _sinh2_minus_sq(a: float) -> float:
    # sinh(a)^2 - a^2 without cancellation
    if abs(a) < 0.2:
        a2 = a * a
        return a2 * a2 * (1 / 3 + a2 * (2 / 45 + a2 * (1 / 315 + a2 * 2 / 14175)))
    return math.sinh(a) ** 2 - a * a


def _image_half(r1: float, r2: float, t: float, theta: float) -> float:
    """One angle of the image form: ``K = H(phi1 - phi2) - H(phi1 + phi2)``.

    Schlafli's integral for ``I_{3j/2}`` sums in closed form to Gaussian images at
    angles ``theta + 4 pi k/3`` inside ``[-pi, pi]`` plus a smooth correction
    integral. The Lorentzian peak of the correction, present when an image is
    near angle pi, is integrated analytically.
    """
    z = r1 * r2 / t
    g = 0.0
    for k in (-1, 0, 1):
        u = theta + 4 * math.pi * k / 3
        if abs(u) < math.pi:
            g += math.exp(-((r1 - r2) ** 2 + 4 * r1 * r2 * math.sin(u / 2) ** 2) / (2 * t))
    xs = (_NU * (math.pi + theta), _NU * (math.pi - theta))
    W = 2 * math.asinh(math.sqrt(25.0 / z))  # exp(-z (cosh W - 1)) = e^-50
    A = _NU * W / 2
    analytic = 0.0
    pts = {1 / math.sqrt(z)}
    for x in xs:
        sh = math.sin(x / 2)
        if sh != 0.0:
            analytic += math.pi * math.cos(x / 2) * math.copysign(1.0, sh) / (2 * _NU)
            analytic -= math.sin(x) / (2 * _NU * abs(sh)) * (math.pi / 2 - math.atan(A / abs(sh)))
            pts.add(2 * abs(sh) / _NU)

    def integrand(w: float) -> float:
        a = _NU * w / 2
        e = 2 * z * math.sinh(w / 2) ** 2
        f, fm1 = math.exp(-e), math.expm1(-e)
        d = _sinh2_minus_sq(a)
        out = 0.0
        for x in xs:
            s2 = math.sin(x / 2) ** 2
            dt_ = 4 * math.sinh(a) ** 2 + 4 * s2
            dm = 4 * a * a + 4 * s2
            if dm == 0.0:
                continue
            sx = math.sin(x)
            out += -f * sx * 4 * d / (dt_ * dm) + fm1 * sx / dm
        return out

    pts = sorted(p for p in pts if 0 < p < W)
    q = integrate.quad(integrand, 0.0, W, points=pts or None, limit=400, epsabs=1e-15, epsrel=1e-13)[0]
    corr = 0.5 * (q + analytic) / math.pi
    return g / (2 * math.pi * t) - math.exp(-((r1 + r2) ** 2) / (2 * t)) * corr / (OPENING * t)


def _image_H(r1: float, r2: float, t: float, theta: float) -> float:
    # H is smooth and even in theta; at the angles where an image sits on +-pi the
    # split into images and correction is singular, so average two nearby angles
    crit = (math.pi / 3, math.pi)
    if any(abs(abs(theta) - c) < _CRIT_TOL for c in crit):
        return 0.5 * (_image_half(r1, r2, t, theta + _CRIT_STEP) + _image_half(r1, r2, t, theta - _CRIT_STEP))
    return _image_half(r1, r2, t, theta)


def killed_kernel_bessel(
    cfg: WedgeConfig, t: float, start, end, n_terms: int = 20000, method: str = "auto"
) -> float:
    """Transition density of standard planar BM killed on leaving ``N_q``.

    Wedge kernel of opening ``alpha = 2 pi/3`` in apex polar coordinates:
    ``(2/(alpha t)) exp(-(r1^2+r2^2)/(2t)) sum_j I_{3j/2}(r1 r2/t) sin(3j phi1/2) sin(3j phi2/2)``.
    ``method="series"`` sums this with exponentially scaled Bessel functions;
    ``"images"`` uses the equivalent image-plus-correction form, which avoids the
    cancellation of the series at large ``r1 r2/t``. ``"auto"`` takes the series
    for ``r1 r2/t <= SERIES_Z_MAX`` and the images above.
    """
    if not (t > 0 and math.isfinite(t)):
        raise InputError(f"t must be positive, got {t}")
    if method not in ("auto", "series", "images"):
        raise InputError(f"method must be 'auto', 'series' or 'images', got {method!r}")
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if not cfg.contains(start, strict=False) or not cfg.contains(end, strict=False):
        raise InputError("start and end must lie in the wedge")
    r1, p1 = cfg.to_polar(start)
    r2, p2 = cfg.to_polar(end)
    r1, p1, r2, p2 = float(r1), float(p1), float(r2), float(p2)
    if r1 == 0 or r2 == 0:
        return 0.0
    z = r1 * r2 / t
    if method == "series" or (method == "auto" and z <= SERIES_Z_MAX):
        s = _bessel_series(z, p1, p2, n_terms)
        return max(0.0, 2.0 / (OPENING * t) * math.exp(-((r1 - r2) ** 2) / (2 * t)) * s)
    return max(0.0, _image_H(r1, r2, t, p1 - p2) - _image_H(r1, r2, t, p1 + p2))


def free_kernel(t: float, start, end) -> float:
    d = np.asarray(end, dtype=float) - np.asarray(start, dtype=float)
    return math.exp(-float(d @ d) / (2 * t)) / (2 * math.pi * t)


# --------------------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True)
class SurvivalEstimate:
    p: float
    stderr: float
    n_paths: int
    dt: float | None
    method: str

    def as_row(self) -> dict:
        return {"p": self.p, "stderr": self.stderr, "n_paths": self.n_paths, "dt": self.dt, "method": self.method}


def _bridge_chunk(
    start: np.ndarray,
    end: np.ndarray,
    T: float,
    n_steps: int,
    levels: np.ndarray,
    n: int,
    gen: np.random.Generator,
    correction: bool,
    compact_every: int = 50,
) -> np.ndarray:
    """Survival weights of ``n`` planar bridges against ``omega <= levels[k]`` at step ``k``."""
    dt = T / n_steps
    a1x, a1y = V1
    a2x, a2y = V2
    x = np.full(n, start[0])
    y = np.full(n, start[1])
    w = np.ones(n)
    idx = np.arange(n)
    out = np.zeros(n)
    d1 = (levels[0] - (a1x * x + a1y * y)) / SQ2
    d2 = (levels[0] - (a2x * x + a2y * y)) / SQ2
    alive = (d1 >= 0) & (d2 >= 0)
    w[~alive] = 0.0
    for k in range(n_steps - 1):
        rem = T - k * dt
        frac = dt / rem
        sd = math.sqrt(dt * (rem - dt) / rem)
        z = gen.standard_normal((2, x.size))
        x += frac * (end[0] - x) + sd * z[0]
        y += frac * (end[1] - y) + sd * z[1]
        lev = levels[k + 1]
        e1 = (lev - (a1x * x + a1y * y)) / SQ2
        e2 = (lev - (a2x * x + a2y * y)) / SQ2
        ok = (e1 > 0) & (e2 > 0)
        if correction:
            f = -np.expm1(-2 * np.maximum(d1, 0) * np.maximum(e1, 0) / dt)
            f *= -np.expm1(-2 * np.maximum(d2, 0) * np.maximum(e2, 0) / dt)
            w *= f
        w[~ok] = 0.0
        d1, d2 = e1, e2
        if (k + 1) % compact_every == 0:
            keep = w > 0
            if not keep.all():
                x, y, w, idx, d1, d2 = x[keep], y[keep], w[keep], idx[keep], d1[keep], d2[keep]
            if x.size == 0:
                return out
    # last step lands on ``end`` exactly
    lev = levels[-1]
    e1 = np.full(x.size, (lev - end @ V1) / SQ2)
    e2 = np.full(x.size, (lev - end @ V2) / SQ2)
    if correction:
        w *= -np.expm1(-2 * np.maximum(d1, 0) * np.maximum(e1, 0) / dt)
        w *= -np.expm1(-2 * np.maximum(d2, 0) * np.maximum(e2, 0) / dt)
    w[(e1 < 0) | (e2 < 0)] = 0.0
    out[idx] = w
    return out


def _bridge_task(start, end, T, n_steps, levels, correction, stream: RngStream, n: int) -> np.ndarray:
    return _bridge_chunk(start, end, T, n_steps, levels, n, stream.generator(), correction)


def _chunks(n_paths: int, rng: RngStream) -> tuple[list[RngStream], list[int]]:
    starts = range(0, n_paths, PATH_CHUNK)
    return [rng.spawn(c) for c in range(len(starts))], [min(PATH_CHUNK, n_paths - lo) for lo in starts]


def _mc_survival(start, end, T, levels_fn, dt, n_paths, rng: RngStream, correction: bool, map_fn=map):
    n_steps = max(1, int(round(T / dt)))
    grid_t = np.linspace(0.0, T, n_steps + 1)
    levels = levels_fn(grid_t)
    work = partial(_bridge_task, np.asarray(start, float), np.asarray(end, float), T, n_steps, levels, correction)
    weights = np.concatenate(list(map_fn(work, *_chunks(n_paths, rng))))
    p = float(weights.mean())
    se = float(weights.std(ddof=1) / math.sqrt(n_paths))
    return p, se, T / n_steps


def survival_prob_bridge(
    start,
    end,
    T: float,
    q: float,
    method: str = "bessel",
    rng: RngStream | None = None,
    n_paths: int = 100000,
    dt: float = 1e-3,
    correction: bool = False,
    map_fn: Callable = map,
) -> SurvivalEstimate:
    """Probability that a planar bridge ``start -> end`` over ``[0, T]`` stays in ``N_q``.

    ``bessel``: killed kernel over free kernel. ``mc``: grid-point killing,
    which overestimates survival and decreases under ``dt`` refinement;
    ``correction=True`` adds the between-point crossing weights.
    """
    cfg = WedgeConfig(q)
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    if not (T > 0):
        raise InputError(f"T must be positive, got {T}")
    if not cfg.contains(start, strict=False) or not cfg.contains(end, strict=False):
        raise InputError("start and end must lie in the wedge")
    if method == "bessel":
        num = killed_kernel_bessel(cfg, T, start, end)
        d = end - start
        # ratio in log space: the free kernel can underflow for far end points
        log_free = -float(d @ d) / (2 * T) - math.log(2 * math.pi * T)
        p = 0.0 if num == 0 else math.exp(math.log(num) - log_free)
        return SurvivalEstimate(min(p, 1.0), 0.0, 0, None, "bessel")
    if method != "mc":
        raise InputError(f"method must be 'bessel' or 'mc', got {method!r}")
    if rng is None:
        raise InputError("method 'mc' needs an RngStream")
    p, se, dt_used = _mc_survival(start, end, T, lambda s: np.full(s.size, float(q)), dt, n_paths, rng, correction, map_fn)
    return SurvivalEstimate(p, se, n_paths, dt_used, "mc+correction" if correction else "mc")


def planar_end(L: float, b: float) -> np.ndarray:
    """End point of ``V`` when every bridge ends at ``-b sqrt(L)``."""
    return np.array([b * math.sqrt(8 * L / 3), 0.0])


def survival_with_cutoff(
    L: float,
    b: float,
    q_profile: CutoffProfile | None,
    n_paths: int,
    rng: RngStream,
    dt: float = 1e-3,
    correction: bool = False,
    map_fn: Callable = map,
) -> SurvivalEstimate:
    """P(B1+B2 <= 1 - q(x) and B2+B3 <= 1 - q(x) on [0, L]) for bridges ``0 -> -b sqrt(L)``.

    Simulated as the planar event ``omega(V(x)) <= 1 - q(x)``; ``None`` means
    ``q = 0``.
    """
    if L < 4:
        raise InputError(f"L must be at least 4, got {L}")
    if q_profile is not None and abs(q_profile.grid.length - L) > 1e-12 * L:
        raise InputError("cutoff profile grid length differs from L")

    def levels(s: np.ndarray) -> np.ndarray:
        if q_profile is None:
            return np.ones(s.size)
        return 1.0 - np.interp(s, q_profile.grid.x, q_profile.values)

    p, se, dt_used = _mc_survival(np.zeros(2), planar_end(L, b), L, levels, dt, n_paths, rng, correction, map_fn)
    return SurvivalEstimate(p, se, n_paths, dt_used, "mc+correction" if correction else "mc")


# --------------------------------------------------------------------------- hitting tail


@dataclass(frozen=True)
class HitTail:
    q: float
    b: float
    L: float | None
    r: np.ndarray
    p: np.ndarray
    stderr: np.ndarray
    n_paths: int
    weights: np.ndarray  # (n_paths, len(r)) per-path survival weights

    def rows(self) -> list[dict]:
        out = []
        for r, p, s in zip(self.r, self.p, self.stderr):
            row = {"r": float(r), "p": float(p), "stderr": float(s)}
            if self.L is not None:
                row["varsigma"] = float(self.L * r / (self.L + r))
            out.append(row)
        return out


def _hit_chunk(a: float, r_grid: np.ndarray, n: int, gen: np.random.Generator, eps: float) -> np.ndarray:
    # apex coordinates: the wedge is {P . v_k <= 0}; Y(0) = 0 sits at -a h
    n_r = r_grid.size
    W = np.zeros((n, n_r))
    px = np.full(n, -a * H[0])
    py = np.zeros(n)
    t = np.zeros(n)
    w = np.ones(n)
    nxt = np.zeros(n, dtype=int)
    idx = np.arange(n)
    d1 = -(px * V1[0] + py * V1[1]) / SQ2
    d2 = -(px * V2[0] + py * V2[1]) / SQ2
    while idx.size:
        target = r_grid[nxt]
        dt = np.minimum(np.maximum(eps * (px * px + py * py), 1e-8), target - t)
        sd = np.sqrt(dt)
        z = gen.standard_normal((2, idx.size))
        px += sd * z[0]
        py += sd * z[1]
        e1 = -(px * V1[0] + py * V1[1]) / SQ2
        e2 = -(px * V2[0] + py * V2[1]) / SQ2
        f = -np.expm1(-2 * np.maximum(d1, 0) * np.maximum(e1, 0) / dt)
        f *= -np.expm1(-2 * np.maximum(d2, 0) * np.maximum(e2, 0) / dt)
        w *= f
        w[(e1 <= 0) | (e2 <= 0)] = 0.0
        d1, d2 = e1, e2
        t += dt
        hit = t >= target * (1 - 1e-12)
        if hit.any():
            W[idx[hit], nxt[hit]] = w[hit]
            nxt[hit] += 1
        keep = (w > 0) & (nxt < n_r)
        if not keep.all():
            px, py, t, w, nxt, idx, d1, d2 = (arr[keep] for arr in (px, py, t, w, nxt, idx, d1, d2))
    return W


def _hit_task(a, r_grid, eps, stream: RngStream, n: int) -> np.ndarray:
    return _hit_chunk(a, r_grid, n, stream.generator(), eps)


def wedge_hit_tail(
    q: float,
    b: float,
    L: float | None,
    n_paths: int,
    rng: RngStream,
    r_grid: np.ndarray | None = None,
    eps: float = 0.02,
    map_fn: Callable = map,
) -> HitTail:
    """Tail ``P(kappa >= r)`` of the exit time of planar BM from ``N_{q+3b}``.

    The motion starts at the origin. Step sizes are ``eps`` times the squared
    distance to the apex, and the between-step crossing weights make each
    step exact for a single edge line.
    """
    if n_paths < 2:
        raise InputError("need at least 2 paths")
    a = q + 3 * b
    if not a > 0:
        raise InputError("q + 3b must be positive")
    r_grid = np.logspace(0, 4, 41) if r_grid is None else np.asarray(r_grid, dtype=float)
    if np.any(np.diff(r_grid) <= 0) or r_grid[0] <= 0:
        raise InputError("r_grid must be positive and increasing")
    W = np.concatenate(list(map_fn(partial(_hit_task, a, r_grid, eps), *_chunks(n_paths, rng))))
    p = W.mean(axis=0)
    se = W.std(axis=0, ddof=1) / math.sqrt(n_paths)
    if p[-1] > 0.1:
        warnings.warn(
            f"only {100 * (1 - p[-1]):.1f}% of paths hit before the horizon r={r_grid[-1]:g}", stacklevel=2
        )
    return HitTail(float(q), float(b), L, r_grid, p, se, n_paths, W)


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    ci: tuple[float, float]
    n_points: int

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "ci": list(self.ci), "n_points": self.n_points}


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xc = x - x.mean()
    s = float(xc @ (y - y.mean()) / (xc @ xc))
    return s, float(y.mean() - s * x.mean())


def fit_tail_slope(
    tail: HitTail, r_min: float = 1e2, r_max: float = 1e4, n_boot: int = 1000, rng: RngStream | None = None, level: float = 0.95
) -> SlopeFit:
    """OLS slope of ``log P(kappa >= r)`` on ``log r``; percentile bootstrap over paths."""
    sel = (tail.r >= r_min * (1 - 1e-12)) & (tail.r <= r_max * (1 + 1e-12))
    if sel.sum() < 3:
        raise InputError("fewer than 3 r values in the fit window")
    x = np.log(tail.r[sel])
    W = tail.weights[:, sel]
    p = W.mean(axis=0)
    if np.any(p <= 0):
        raise InputError("zero tail probability inside the fit window")
    slope, icpt = _ols(x, np.log(p))
    gen = (rng or RngStream(0)).generator()
    n = W.shape[0]
    boots = []
    for _ in range(n_boot):
        pb = W[gen.integers(0, n, n)].mean(axis=0)
        if np.all(pb > 0):
            boots.append(_ols(x, np.log(pb))[0])
    alpha = (1 - level) / 2
    lo, hi = np.quantile(boots, [alpha, 1 - alpha])
    return SlopeFit(slope, icpt, (float(lo), float(hi)), int(sel.sum()))


def fit_survival_slope(Ls, estimates: list[SurvivalEstimate], level: float = 0.95) -> SlopeFit:
    """Weighted log-log fit of survival against ``L`` with a normal-quantile CI."""
    from .sigma_variance import fit_loglog

    slope, icpt, _, ci, _ = fit_loglog(Ls, [e.p for e in estimates], [e.stderr for e in estimates], level)
    return SlopeFit(slope, icpt, ci, len(estimates))
