"""Grids, piecewise-linear paths, seeded random streams and Brownian samplers.

Conventions used throughout the package:

* A :class:`Path` is known on a uniform grid and is linearly interpolated
  between grid points. Every path integral is a trapezoid sum.
* Randomness comes from :class:`RngStream`. A stream is identified by
  ``(seed, stream_index, substream)``. It builds a NumPy ``Generator`` on the
  Philox-4x64-10 bit generator seeded through
  ``SeedSequence(entropy=seed, spawn_key=(stream_index, *substream))``.
  Re-creating the generator from the same stream always replays the same
  numbers, so a stream can be handed to a worker process as plain data.
* The diffusion coefficient of a Brownian sampler is always an explicit
  argument. Some callers need coefficient 1 and others need 2, so there is no
  default.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .errors import InputError

RNG_ALGORITHM = "numpy.random.Philox (4x64-10) seeded by numpy.random.SeedSequence"

__all__ = [
    "Grid",
    "Path",
    "RngStream",
    "as_generator",
    "trapezoid",
    "log_trapezoid_exp",
    "sample_bm",
    "sample_bridge",
    "bridge_stay_positive_prob",
    "excursion_density",
    "sample_excursion_value",
    "first_exit_time",
    "last_exit_time",
    "save_jsonl",
    "load_jsonl",
    "write_csv",
]


@dataclass(frozen=True)
class Grid:
    """Uniform grid ``x_i = i * dx`` on ``[0, length]`` with ``n_points`` nodes."""

    length: float
    n_points: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.length) and self.length > 0):
            raise InputError(f"grid length must be positive and finite, got {self.length}")
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise InputError(f"grid needs at least 2 points, got {self.n_points}")
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "n_points", int(self.n_points))

    @classmethod
    def from_dx(cls, length: float, dx: float) -> "Grid":
        """Grid whose spacing is ``dx`` (``length/dx`` rounded to an integer)."""
        if not (dx > 0 and math.isfinite(dx)):
            raise InputError(f"dx must be positive, got {dx}")
        n_cells = max(1, int(round(length / dx)))
        return cls(length, n_cells + 1)

    @property
    def dx(self) -> float:
        return self.length / (self.n_points - 1)

    @property
    def x(self) -> np.ndarray:
        x = np.arange(self.n_points) * self.dx
        x[-1] = self.length
        return x

    def index_of(self, x: float) -> int:
        """Index of the grid point nearest to ``x``."""
        if not (0.0 <= x <= self.length * (1 + 1e-12)):
            raise InputError(f"x={x} outside [0, {self.length}]")
        return int(min(self.n_points - 1, round(x / self.dx)))

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.length, (self.n_points - 1) * factor + 1)

    def to_dict(self) -> dict:
        return {"L": self.length, "n": self.n_points}


@dataclass(frozen=True, eq=False)
class Path:
    """Grid values of one path (shape ``(n,)``) or a batch (shape ``(m, n)``)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim not in (1, 2) or v.shape[-1] != self.grid.n_points:
            raise InputError(
                f"values of shape {v.shape} do not match a grid of {self.grid.n_points} points"
            )
        if not np.all(np.isfinite(v)):
            raise InputError("path values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def is_batch(self) -> bool:
        return self.values.ndim == 2

    def __len__(self) -> int:
        return self.values.shape[0] if self.is_batch else 1

    def __getitem__(self, i) -> "Path":
        if not self.is_batch:
            raise TypeError("indexing is only defined for path batches")
        return Path(self.grid, self.values[i])

    def __call__(self, x) -> np.ndarray:
        """Linear interpolation at ``x`` (scalar or array)."""
        xs = np.asarray(x, dtype=float)
        gx = self.grid.x
        if not self.is_batch:
            return np.interp(xs, gx, self.values)
        pos = np.clip(xs / self.grid.dx, 0, self.grid.n_points - 1)
        i = np.minimum(np.floor(pos).astype(int), self.grid.n_points - 2)
        w = pos - i
        return self.values[:, i] * (1 - w) + self.values[:, i + 1] * w

    def integral(self) -> np.ndarray | float:
        return trapezoid(self.values, self.grid.dx)

    def to_records(self) -> list[dict]:
        rows = self.values if self.is_batch else self.values[None, :]
        g = self.grid.to_dict()
        return [{"grid": g, "values": row.tolist()} for row in rows]


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_index, substream)``."""

    seed: int
    stream_index: int = 0
    substream: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if int(self.seed) != self.seed or not (0 <= self.seed < 2**64):
            raise InputError(f"seed must be an integer in [0, 2^64), got {self.seed}")
        if int(self.stream_index) != self.stream_index or self.stream_index < 0:
            raise InputError(f"stream_index must be a nonnegative integer, got {self.stream_index}")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "stream_index", int(self.stream_index))
        object.__setattr__(self, "substream", tuple(int(s) for s in self.substream))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_index, *self.substream))
        return np.random.Generator(np.random.Philox(ss))

    def spawn(self, index: int) -> "RngStream":
        """Independent child stream."""
        return RngStream(self.seed, self.stream_index, self.substream + (int(index),))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "stream_index": self.stream_index, "substream": list(self.substream)}


RngLike = RngStream | np.random.Generator


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise InputError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


def trapezoid(values: np.ndarray, dx: float, axis: int = -1) -> np.ndarray | float:
    """Trapezoid rule on a uniform grid along ``axis``."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    s = v.sum(axis=-1) - 0.5 * (v[..., 0] + v[..., -1])
    return s * dx


def log_trapezoid_exp(f: np.ndarray, dx: float, axis: int = -1) -> np.ndarray | float:
    """``log`` of the trapezoid integral of ``exp(f)``, computed without overflow."""
    f = np.moveaxis(np.asarray(f, dtype=float), axis, -1)
    m = f.max(axis=-1, keepdims=True)
    integral = trapezoid(np.exp(f - m), dx)
    return np.log(integral) + m[..., 0]


def _check_diffusion(diffusion: float) -> float:
    if not (math.isfinite(diffusion) and diffusion > 0):
        raise InputError(f"diffusion must be positive and finite, got {diffusion}")
    return float(diffusion)


def _brownian_increments(grid: Grid, diffusion: float, gen: np.random.Generator, size) -> np.ndarray:
    shape = (grid.n_points - 1,) if size is None else (int(size), grid.n_points - 1)
    return gen.standard_normal(shape) * math.sqrt(diffusion * grid.dx)


def sample_bm(
    grid: Grid, start: float, diffusion: float, rng: RngLike, size: int | None = None
) -> Path:
    """Brownian motion on ``grid`` from ``start`` with ``Var(B(x)-B(0)) = diffusion*x``.

    With ``size`` given the result is a batch of ``size`` independent paths.
    """
    diffusion = _check_diffusion(diffusion)
    if not math.isfinite(start):
        raise InputError(f"start must be finite, got {start}")
    inc = _brownian_increments(grid, diffusion, as_generator(rng), size)
    values = np.empty(inc.shape[:-1] + (grid.n_points,))
    values[..., 0] = start
    np.cumsum(inc, axis=-1, out=values[..., 1:])
    values[..., 1:] += start
    return Path(grid, values)


def sample_bridge(
    grid: Grid, a: float, b: float, diffusion: float, rng: RngLike, size: int | None = None
) -> Path:
    """Brownian bridge from ``a`` at 0 to ``b`` at ``L``.

    Built by conditioning a sampled motion on its endpoint:
    ``X(x) = W(x) - (x/L) (W(L) - b)`` where ``W`` starts at ``a``. This is an
    exact construction of the Gaussian bridge on the grid.
    """
    diffusion = _check_diffusion(diffusion)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InputError("bridge endpoints must be finite")
    w = sample_bm(grid, a, diffusion, rng, size).values
    frac = grid.x / grid.length
    values = w - frac * (w[..., -1:] - b)
    values[..., 0] = a
    values[..., -1] = b
    return Path(grid, values)


def bridge_stay_positive_prob(x: float, y: float, T: float, diffusion: float) -> float:
    """Probability that a bridge from ``x`` to ``y`` over time ``T`` stays positive.

    Reflection principle: ``1 - exp(-2xy / (diffusion*T))``.
    """
    for name, val in (("x", x), ("y", y), ("T", T), ("diffusion", diffusion)):
        if not (math.isfinite(val) and val > 0):
            raise InputError(f"{name} must be positive, got {val}")
    return float(-math.expm1(-2.0 * x * y / (diffusion * T)))


def excursion_density(s: float, y) -> np.ndarray | float:
    """Density at ``y`` of a standard Brownian excursion on [0, 1] at time ``s``."""
    if not (0.0 < s < 1.0):
        raise InputError(f"s must lie in (0, 1), got {s}")
    y = np.asarray(y, dtype=float)
    v = s * (1.0 - s)
    dens = 2.0 * y**2 * np.exp(-(y**2) / (2.0 * v)) / np.sqrt(2.0 * np.pi * v**3)
    dens = np.where(y > 0, dens, 0.0)
    return float(dens) if dens.ndim == 0 else dens


def sample_excursion_value(s: float, n: int, rng: RngLike, n_grid: int = 4096) -> np.ndarray:
    """Values at time ``s`` of ``n`` discretized standard excursions on [0, 1].

    Vervaat construction: rotate a standard bridge so that it starts at its
    minimum. Works from sampled paths only, so it serves as an oracle for
    :func:`excursion_density`. The grid minimum slightly overestimates the true
    minimum, which biases values down by about ``0.58 / sqrt(n_grid)``.
    """
    if not (0.0 < s < 1.0):
        raise InputError(f"s must lie in (0, 1), got {s}")
    gen = as_generator(rng)
    grid = Grid(1.0, n_grid + 1)
    out = np.empty(n)
    chunk = max(1, 2**22 // n_grid)
    for lo in range(0, n, chunk):
        m = min(chunk, n - lo)
        b = sample_bridge(grid, 0.0, 0.0, 1.0, gen, size=m).values[:, :-1]
        tau = np.argmin(b, axis=1)
        j = (tau + int(round(s * n_grid))) % n_grid
        rows = np.arange(m)
        out[lo:lo + m] = b[rows, j] - b[rows, tau]
    return out


def _level_values(grid: Grid, level_fn) -> np.ndarray:
    if callable(level_fn):
        lv = np.asarray(level_fn(grid.x), dtype=float)
        if lv.shape == ():
            lv = np.full(grid.n_points, float(lv))
        if lv.shape != (grid.n_points,):
            lv = np.array([float(level_fn(x)) for x in grid.x])
        return lv
    return np.full(grid.n_points, float(level_fn))


def _crossed(path: Path, level_fn, direction: str) -> np.ndarray:
    lv = _level_values(path.grid, level_fn)
    if direction == "above":
        return path.values > lv
    if direction == "below":
        return path.values < lv
    raise InputError(f"direction must be 'above' or 'below', got {direction!r}")


def first_exit_time(path: Path, level_fn: Callable | float, direction: str = "above"):
    """Smallest grid ``x`` at which the path is beyond the level.

    Returns ``None`` when the level is never crossed. For a batch the result is
    an array with ``nan`` for paths that never cross.
    """
    hit = _crossed(path, level_fn, direction)
    x = path.grid.x
    if not path.is_batch:
        idx = np.flatnonzero(hit)
        return float(x[idx[0]]) if idx.size else None
    any_hit = hit.any(axis=-1)
    first = np.argmax(hit, axis=-1)
    return np.where(any_hit, x[first], np.nan)


def last_exit_time(path: Path, level_fn: Callable | float, direction: str = "above"):
    """Largest grid ``x`` at which the path is beyond the level (scan from the right)."""
    hit = _crossed(path, level_fn, direction)
    x = path.grid.x
    if not path.is_batch:
        idx = np.flatnonzero(hit)
        return float(x[idx[-1]]) if idx.size else None
    any_hit = hit.any(axis=-1)
    last = hit.shape[-1] - 1 - np.argmax(hit[:, ::-1], axis=-1)
    return np.where(any_hit, x[last], np.nan)


def save_jsonl(paths: Path | Sequence[Path], fh: TextIO, header: dict | None = None) -> int:
    """Write paths as JSON lines, optionally preceded by a ``{"header": ...}`` record.

    Returns the number of path records written.
    """
    if isinstance(paths, Path):
        paths = [paths]
    if header is not None:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
    count = 0
    for p in paths:
        for rec in p.to_records():
            fh.write(json.dumps(rec) + "\n")
            count += 1
    return count


def load_jsonl(lines: Iterable[str]) -> tuple[dict | None, list[Path]]:
    """Inverse of :func:`save_jsonl`."""
    header = None
    out: list[Path] = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"line {lineno}: invalid JSON ({exc})") from None
        if "header" in rec:
            header = rec["header"]
            continue
        try:
            g = Grid(rec["grid"]["L"], rec["grid"]["n"])
            out.append(Path(g, np.asarray(rec["values"], dtype=float)))
        except (KeyError, TypeError) as exc:
            raise InputError(f"line {lineno}: malformed path record ({exc})") from None
    return header, out


def write_csv(path: Path, fh: TextIO) -> None:
    """CSV with columns ``x,value`` (``x,value_0,value_1,...`` for a batch)."""
    rows = path.values if path.is_batch else path.values[None, :]
    cols = ["value"] if rows.shape[0] == 1 else [f"value_{i}" for i in range(rows.shape[0])]
    fh.write(",".join(["x", *cols]) + "\n")
    for i, x in enumerate(path.grid.x):
        fh.write(",".join([repr(float(x)), *(repr(float(v)) for v in rows[:, i])]) + "\n")
