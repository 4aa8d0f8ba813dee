"""Samplers for the two-layer Gibbs measure behind the open KPZ stationary law.

The reference measure is two independent standard Brownian motions: ``Lam``
from 0 and ``Lam'`` from a Lebesgue-distributed start. It is reweighted by

    W(Lam, Lam') = exp(-u G(0) - v G(L) - int_0^L exp(-G(s)) ds),   G = Lam - Lam'.

Sampling has two stages.

1. Importance stage. Under the reference measure ``U = Lam + Lam'`` and
   ``V = Lam - Lam'`` are independent Brownian motions with diffusion 2, and
   ``W`` only depends on ``V``. The start ``Lam'(0)`` is drawn from a
   logistic law. A pool of ``V`` paths is weighted by ``W`` divided by the
   logistic density and resampled. A fresh ``U`` is then drawn for each chain.
2. Block Gibbs stage. One layer is resampled on a block at a time. The
   proposal is a standard Brownian bridge between the block endpoints, and it
   is accepted with probability ``exp(-int_block exp(-G))``, which is at most 1.
   A block that touches 0 or L has a free endpoint. That endpoint is drawn from
   the Gaussian law tilted by the boundary factor. The pair is only defined up
   to a common shift, so ``Lam(0)`` is subtracted from both layers after every
   sweep.

All updates act on a batch of independent chains at once (arrays of shape
``(n_chains, n_points)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CalibrationError, InputError
from .grid_paths import Grid, Path, RngStream, as_generator, sample_bm, trapezoid

ESS_MIN = 10.0


@dataclass(frozen=True)
class GibbsChainConfig:
    """MCMC schedule.

    ``burn_in`` sweeps are discarded, then ``n_sweeps`` sweeps are run and every
    ``thinning``-th state is kept. ``block_length=None`` means ``min(4, L/4)``.
    """

    block_length: float | None = None
    n_sweeps: int = 200
    burn_in: int = 100
    thinning: int = 5
    max_rejections_per_block: int = 1000
    n_pool: int = 20000
    chain_batch: int = 256

    def __post_init__(self) -> None:
        for name in ("n_sweeps", "burn_in", "thinning", "max_rejections_per_block", "n_pool", "chain_batch"):
            val = getattr(self, name)
            if int(val) != val or val < 1:
                raise InputError(f"{name} must be a positive integer, got {val}")
        if self.block_length is not None and not self.block_length > 0:
            raise InputError(f"block_length must be positive, got {self.block_length}")

    def resolved_block_length(self, L: float) -> float:
        b = min(4.0, L / 4.0) if self.block_length is None else float(self.block_length)
        if not b < L:
            raise InputError(f"block_length {b} must be smaller than L={L}")
        return b

    @property
    def samples_per_chain(self) -> int:
        return self.n_sweeps // self.thinning


@dataclass
class BlockStats:
    """Counters accumulated by block updates."""

    blocks: int = 0
    proposals: int = 0
    accepted: int = 0
    skipped: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else float("nan")

    def as_dict(self) -> dict:
        return {
            "blocks": self.blocks,
            "proposals": self.proposals,
            "accepted": self.accepted,
            "skipped": self.skipped,
            "acceptance_rate": self.acceptance_rate,
        }


@dataclass(frozen=True, eq=False)
class TwoLayerState:
    """One state or a batch of states of the pair ``(Lam, Lam')``.

    ``lambda_prime`` is ``None`` only for the Brownian fallback ``u = v = 0``.
    """

    lambda_: Path
    lambda_prime: Path | None
    u: float
    v: float
    brownian_fallback: bool = False
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.u < 0 or self.v < 0:
            raise InputError("u and v must be nonnegative")
        if self.u + self.v == 0 and not self.brownian_fallback:
            raise InputError("u = v = 0 requires the Brownian fallback flag")
        if self.lambda_prime is not None:
            if self.lambda_prime.grid != self.lambda_.grid:
                raise InputError("both layers must share a grid")
            if self.lambda_prime.values.shape != self.lambda_.values.shape:
                raise InputError("both layers must have the same batch shape")
        elif not self.brownian_fallback:
            raise InputError("lambda_prime is required unless the Brownian fallback is set")

    @classmethod
    def from_arrays(cls, grid: Grid, lam, lamp, u: float, v: float, **kw) -> "TwoLayerState":
        return cls(Path(grid, lam), None if lamp is None else Path(grid, lamp), float(u), float(v), **kw)

    @property
    def grid(self) -> Grid:
        return self.lambda_.grid

    @property
    def L(self) -> float:
        return self.grid.length

    @property
    def lam(self) -> np.ndarray:
        return self.lambda_.values

    @property
    def lamp(self) -> np.ndarray:
        if self.lambda_prime is None:
            raise InputError("the Brownian fallback has no second layer")
        return self.lambda_prime.values

    def gap(self) -> np.ndarray:
        return self.lam - self.lamp

    def U_L(self, x) -> np.ndarray:
        """``(Lam + Lam')(xL) / sqrt(L)`` for ``x`` in [0, 1]."""
        xs = np.asarray(x, dtype=float) * self.L
        return (self.lambda_(xs) + self.lambda_prime(xs)) / math.sqrt(self.L)

    def V_L(self, x) -> np.ndarray:
        """``(Lam - Lam')(xL) / sqrt(L)`` for ``x`` in [0, 1]."""
        xs = np.asarray(x, dtype=float) * self.L
        return (self.lambda_(xs) - self.lambda_prime(xs)) / math.sqrt(self.L)

    def shifted(self, c: float) -> "TwoLayerState":
        lamp = None if self.lambda_prime is None else self.lamp + c
        return TwoLayerState.from_arrays(
            self.grid, self.lam + c, lamp, self.u, self.v, brownian_fallback=self.brownian_fallback
        )


def _log_weight_arrays(lam: np.ndarray, lamp: np.ndarray, u: float, v: float, dx: float) -> np.ndarray:
    gap = lam - lamp
    with np.errstate(over="ignore", invalid="ignore"):
        integral = trapezoid(np.exp(-gap), dx)
        out = -u * gap[..., 0] - v * gap[..., -1] - integral
    return np.where(np.isfinite(out), out, -np.inf)


def rn_log_weight(state: TwoLayerState) -> np.ndarray | float:
    """``-u G(0) - v G(L) - int exp(-G)`` with ``G = Lam - Lam'`` (trapezoid rule).

    Returns ``-inf`` when ``exp(-G)`` overflows; ``state.diagnostics`` then
    gains an ``"overflow"`` count.
    """
    out = _log_weight_arrays(state.lam, state.lamp, state.u, state.v, state.grid.dx)
    n_bad = int(np.sum(np.isneginf(out)))
    if n_bad:
        state.diagnostics["overflow"] = state.diagnostics.get("overflow", 0) + n_bad
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------- block updates


def _update_block(
    target: np.ndarray,
    other: np.ndarray,
    sign: float,
    i1: int,
    i2: int,
    c_left: float,
    c_right: float,
    dx: float,
    gen: np.random.Generator,
    max_rej: int,
    stats: BlockStats,
    crn: bool = False,
) -> None:
    """Resample ``target[:, i1:i2+1]`` in place.

    The gap is ``sign * (target - other)``. A free endpoint at index 0 (or at
    the last index) is drawn from the Gaussian tilted by ``exp(c * value)``.
    With ``crn`` every try draws noise for every chain so that two batches
    driven by the same generator see common random numbers.
    """
    m, n = target.shape
    free_left = i1 == 0
    free_right = i2 == n - 1
    if free_left and free_right:
        raise InputError("a block may not cover the whole interval")
    k = i2 - i1
    s = k * dx
    frac = np.arange(k + 1) / k
    other_blk = other[:, i1 : i2 + 1]
    pending = np.arange(m)
    stats.blocks += m
    for _ in range(max_rej):
        if pending.size == 0:
            break
        rows = np.arange(m) if crn else pending
        nr = rows.size
        z_end = gen.standard_normal(nr)
        inc = gen.standard_normal((nr, k)) * math.sqrt(dx)
        unif = gen.random(nr)
        if crn:
            sel = np.isin(rows, pending)
            z_end, inc, unif = z_end[sel], inc[sel], unif[sel]
        a = target[pending, i1]
        b = target[pending, i2]
        if free_left:
            a = b + c_left * s + math.sqrt(s) * z_end
        elif free_right:
            b = a + c_right * s + math.sqrt(s) * z_end
        w = np.zeros((pending.size, k + 1))
        np.cumsum(inc, axis=1, out=w[:, 1:])
        prop = a[:, None] + w - frac * (w[:, -1:] - (b - a)[:, None])
        prop[:, 0] = a
        prop[:, -1] = b
        gap = sign * (prop - other_blk[pending])
        with np.errstate(over="ignore"):
            logw = -trapezoid(np.exp(-gap), dx)
        acc = np.log(unif) < logw
        stats.proposals += pending.size
        stats.accepted += int(acc.sum())
        done = pending[acc]
        target[done, i1 : i2 + 1] = prop[acc]
        pending = pending[~acc]
    stats.skipped += int(pending.size)


def _block_bounds(n: int, nb: int, offset: int) -> list[tuple[int, int]]:
    cuts = sorted({0, n - 1, *range(offset, n - 1, nb)})
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


def _sweep(lam, lamp, u, v, dx, nb, gen, max_rej, stats) -> None:
    n = lam.shape[1]
    offset = int(gen.integers(0, nb))
    blocks = _block_bounds(n, nb, offset)
    for i1, i2 in blocks:
        _update_block(lam, lamp, 1.0, i1, i2, -u, -v, dx, gen, max_rej, stats)
    for i1, i2 in blocks:
        _update_block(lamp, lam, -1.0, i1, i2, u, v, dx, gen, max_rej, stats)
    shift = lam[:, :1].copy()
    lam -= shift
    lamp -= shift


def _indices(grid: Grid, t1: float, t2: float) -> tuple[int, int]:
    if not (0 <= t1 < t2 <= grid.length * (1 + 1e-12)):
        raise InputError(f"need 0 <= t1 < t2 <= L, got t1={t1}, t2={t2}")
    i1, i2 = grid.index_of(t1), grid.index_of(t2)
    if i2 <= i1:
        raise InputError("block is shorter than one grid cell")
    return i1, i2


def _block_update(state: TwoLayerState, which: int, t1, t2, rng, max_rejections, crn) -> TwoLayerState:
    if state.lambda_prime is None:
        raise InputError("block updates need both layers")
    i1, i2 = _indices(state.grid, t1, t2)
    lam = np.atleast_2d(state.lam).copy()
    lamp = np.atleast_2d(state.lamp).copy()
    stats = BlockStats()
    gen = as_generator(rng)
    if which == 0:
        _update_block(lam, lamp, 1.0, i1, i2, -state.u, -state.v, state.grid.dx, gen, max_rejections, stats, crn)
    else:
        _update_block(lamp, lam, -1.0, i1, i2, state.u, state.v, state.grid.dx, gen, max_rejections, stats, crn)
    if state.lam.ndim == 1:
        lam, lamp = lam[0], lamp[0]
    return TwoLayerState.from_arrays(
        state.grid, lam, lamp, state.u, state.v, diagnostics={"block": stats.as_dict()}
    )


def block_gibbs_update_lambda(
    state: TwoLayerState,
    t1: float,
    t2: float,
    rng: RngStream | np.random.Generator,
    max_rejections: int = 1000,
    crn: bool = False,
) -> TwoLayerState:
    """Resample ``Lam`` on ``[t1, t2]`` from its conditional law (exact rejection).

    A free endpoint at 0 is not re-pinned here; :func:`sample_two_layer`
    restores ``Lam(0) = 0`` after each sweep.
    """
    return _block_update(state, 0, t1, t2, rng, max_rejections, crn)


def block_gibbs_update_lambda_prime(
    state: TwoLayerState,
    t1: float,
    t2: float,
    rng: RngStream | np.random.Generator,
    max_rejections: int = 1000,
    crn: bool = False,
) -> TwoLayerState:
    """Mirror of :func:`block_gibbs_update_lambda` for ``Lam'``."""
    return _block_update(state, 1, t1, t2, rng, max_rejections, crn)


# --------------------------------------------------------------------------- importance stage


def _logistic_logpdf(x: np.ndarray, scale: float) -> np.ndarray:
    z = np.abs(x) / scale
    return -z - 2.0 * np.log1p(np.exp(-z)) - math.log(scale)


def proposal_scale(u: float, v: float) -> float:
    return max(2.0 / (u + v), 1.0)


def importance_init(
    L: float, u: float, v: float, grid: Grid, n_chains: int, gen: np.random.Generator, n_pool: int = 20000
) -> tuple[np.ndarray, np.ndarray, float]:
    """Importance-resampled starting states; returns ``(lam, lamp, ess)``."""
    if u + v <= 0:
        raise InputError("the importance stage needs u + v > 0")
    scale = proposal_scale(u, v)
    n = grid.n_points
    chunk = max(1, min(n_pool, 2**21 // n))
    n_chunks = -(-n_pool // chunk)
    chunk_seeds = gen.integers(0, 2**63, size=n_chunks)

    def pool_chunk(j: int) -> tuple[np.ndarray, np.ndarray]:
        g = np.random.Generator(np.random.Philox(int(chunk_seeds[j])))
        size = min(chunk, n_pool - j * chunk)
        c = g.logistic(0.0, scale, size)
        vpath = sample_bm(grid, 0.0, 2.0, g, size).values - c[:, None]
        return c, vpath

    logw = np.empty(n_pool)
    for j in range(n_chunks):
        c, vpath = pool_chunk(j)
        lw = _log_weight_arrays(vpath, np.zeros_like(vpath), u, v, grid.dx) - _logistic_logpdf(c, scale)
        logw[j * chunk : j * chunk + c.size] = lw
    wmax = np.max(logw)
    if not np.isfinite(wmax):
        raise CalibrationError(f"all importance weights vanished (logistic proposal scale {scale:g})")
    w = np.exp(logw - wmax)
    ess = float(w.sum() ** 2 / np.sum(w * w))
    if ess < ESS_MIN:
        raise CalibrationError(
            f"importance stage ESS {ess:.2f} < {ESS_MIN:g} with logistic proposal scale {scale:g}"
        )
    # systematic resampling
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    pos = (gen.random() + np.arange(n_chains)) / n_chains
    picks = np.searchsorted(cdf, pos)
    c_sel = np.empty(n_chains)
    v_sel = np.empty((n_chains, n))
    for j in np.unique(picks // chunk):
        c, vpath = pool_chunk(int(j))
        mask = picks // chunk == j
        local = picks[mask] - j * chunk
        c_sel[mask] = c[local]
        v_sel[mask] = vpath[local]
    order = gen.permutation(n_chains)
    c_sel, v_sel = c_sel[order], v_sel[order]
    upath = sample_bm(grid, 0.0, 2.0, gen, n_chains).values + c_sel[:, None]
    lam = 0.5 * (upath + v_sel)
    lamp = 0.5 * (upath - v_sel)
    lam[:, 0] = 0.0
    return lam, lamp, ess


# --------------------------------------------------------------------------- drivers


def _run_chain_batch(L, u, v, grid, cfg, gen, n_chains, stats) -> tuple[np.ndarray, np.ndarray, float]:
    lam, lamp, ess = importance_init(L, u, v, grid, n_chains, gen, cfg.n_pool)
    nb = max(1, int(round(cfg.resolved_block_length(L) / grid.dx)))
    if nb >= grid.n_points - 1:
        nb = grid.n_points - 2
    per = cfg.samples_per_chain
    out_l = np.empty((n_chains, per, grid.n_points))
    out_p = np.empty_like(out_l)
    for _ in range(cfg.burn_in):
        _sweep(lam, lamp, u, v, grid.dx, nb, gen, cfg.max_rejections_per_block, stats)
    k = 0
    for sweep in range(1, cfg.n_sweeps + 1):
        _sweep(lam, lamp, u, v, grid.dx, nb, gen, cfg.max_rejections_per_block, stats)
        if sweep % cfg.thinning == 0 and k < per:
            out_l[:, k] = lam
            out_p[:, k] = lamp
            k += 1
    return out_l.reshape(-1, grid.n_points), out_p.reshape(-1, grid.n_points), ess


def _check_uv(L: float, u: float, v: float) -> None:
    if not (math.isfinite(u) and math.isfinite(v) and u >= 0 and v >= 0):
        raise InputError(f"u and v must be nonnegative and finite, got u={u}, v={v}")
    if not (math.isfinite(L) and L > 0):
        raise InputError(f"L must be positive, got {L}")


def sample_two_layer(
    L: float,
    u: float,
    v: float,
    grid: Grid,
    cfg: GibbsChainConfig,
    rng: RngStream,
    n_samples: int = 1,
) -> TwoLayerState:
    """``n_samples`` draws of ``(Lam, Lam')`` (chain-major order).

    Chains are processed in batches of ``cfg.chain_batch``; batch ``j`` uses the
    child stream ``rng.spawn(j)``, so the output depends only on the seed.
    For ``u = v = 0`` the result is the Brownian fallback without a second layer.
    """
    _check_uv(L, u, v)
    if abs(grid.length - L) > 1e-12 * L:
        raise InputError("grid length must equal L")
    if u + v == 0:
        lam = sample_bm(grid, 0.0, 1.0, as_generator(rng), n_samples).values
        return TwoLayerState.from_arrays(grid, lam, None, 0.0, 0.0, brownian_fallback=True)
    per = cfg.samples_per_chain
    if per < 1:
        raise InputError("n_sweeps // thinning must be at least 1")
    n_chains = -(-n_samples // per)
    stats = BlockStats()
    lams, lamps, esss = [], [], []
    for j, lo in enumerate(range(0, n_chains, cfg.chain_batch)):
        nc = min(cfg.chain_batch, n_chains - lo)
        gen = rng.spawn(j).generator() if isinstance(rng, RngStream) else rng
        a, b, ess = _run_chain_batch(L, u, v, grid, cfg, gen, nc, stats)
        lams.append(a)
        lamps.append(b)
        esss.append(ess)
    lam = np.concatenate(lams)[:n_samples]
    lamp = np.concatenate(lamps)[:n_samples]
    diag = {"block": stats.as_dict(), "importance_ess": esss, "n_chains": n_chains}
    return TwoLayerState.from_arrays(grid, lam, lamp, u, v, diagnostics=diag)


def sample_stationary(
    L: float,
    u: float,
    v: float,
    grid: Grid,
    cfg: GibbsChainConfig,
    rng: RngStream,
    n_samples: int = 1,
) -> Path:
    """Draws of ``Lam`` under the stationary measure (a batch when ``n_samples > 1``)."""
    st = sample_two_layer(L, u, v, grid, cfg, rng, n_samples)
    return st.lambda_ if n_samples > 1 else st.lambda_[0]


@dataclass(frozen=True)
class CouplingReport:
    ordered: np.ndarray
    all_ordered: bool
    lo: TwoLayerState
    hi: TwoLayerState


def monotone_coupling_check(
    state_lo: TwoLayerState, state_hi: TwoLayerState, t1: float, t2: float, rng: RngStream
) -> CouplingReport:
    """Update ``Lam`` on ``[t1, t2]`` in both states with common random numbers.

    Reports, per chain, whether ``Lam_hi >= Lam_lo`` holds pointwise afterwards.
    """
    if state_lo.grid != state_hi.grid or state_lo.lam.shape != state_hi.lam.shape:
        raise InputError("states must share grid and batch shape")
    if not isinstance(rng, RngStream):
        raise InputError("the coupling needs an RngStream so both updates replay the same noise")
    lo = block_gibbs_update_lambda(state_lo, t1, t2, rng, crn=True)
    hi = block_gibbs_update_lambda(state_hi, t1, t2, rng, crn=True)
    ordered = np.all(hi.lam >= lo.lam - 1e-12, axis=-1)
    return CouplingReport(ordered, bool(np.all(ordered)), lo, hi)
