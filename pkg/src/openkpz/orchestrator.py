"""Experiment configuration, dispatch, worker pools and result files.

Every run writes its table (CSV or JSON) plus a ``<out>.meta.json`` sidecar
with the config echo, seed and provenance (git describe, timestamp, wall
time). Stdout runs print that record to stderr instead. Keeping provenance out
of the table keeps tables byte-identical across runs with the same seed and any
worker count.
"""

from __future__ import annotations

import configparser
import contextlib
import csv
import datetime as _dt
import io
import json
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Callable, Iterator

import numpy as np

from . import __version__
from .errors import InputError, NumericalError
from .grid_paths import RNG_ALGORITHM, Grid, Path, RngStream, save_jsonl

KINDS = ("sample", "sigma", "sigma-scaling", "she", "stationarity", "wedge", "kernel", "report", "acceptance")
SEED_ENV = "OPENKPZ_SEED"

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4


def _floats(s: str) -> list[float]:
    try:
        return [float(t) for t in str(s).replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise InputError(f"expected a comma-separated list of numbers, got {s!r}") from None


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InputError(f"expected a boolean, got {s!r}")


# parameter name -> converter; the CLI flag is --name with "_" shown as "-"
PARAM_TYPES: dict[str, Callable] = {
    "L": float,
    "Ls": _floats,
    "u": float,
    "v": float,
    "dx": float,
    "dt": float,
    "t": float,
    "T": float,
    "x": float,
    "y": float,
    "q": float,
    "b": float,
    "n": int,
    "n_samples": int,
    "n_paths": int,
    "replicas": int,
    "n_inner": int,
    "n_modes": int,
    "start": _floats,
    "end": _floats,
    "method": str,
    "correction": _bool,
    "sub": str,
    "dir": str,
    "snapshots": str,
    "basis_json": str,
    "tier": str,
    "check": _bool,
    "only": lambda s: [t.strip() for t in str(s).split(",") if t.strip()],
    "eps": float,
    "r_min": float,
    "r_max": float,
    "n_sweeps": int,
    "burn_in": int,
    "thinning": int,
    "substream": lambda s: tuple(int(t) for t in str(s).split(",") if t.strip()),
}

REQUIRED: dict[str, tuple[str, ...]] = {
    "sample": ("L", "u", "v", "n_samples"),
    "sigma": ("L", "u", "v", "n"),
    "sigma-scaling": ("Ls", "u", "v", "n"),
    "she": ("L", "u", "v", "t", "replicas"),
    "stationarity": ("L", "u", "v", "t", "replicas"),
    "kernel": ("L", "u", "v", "t", "x", "y"),
    "report": ("dir",),
    "acceptance": (),
}

WEDGE_REQUIRED = {"survival": ("q",), "hit-tail": ("q", "b", "n_paths"), "kernel": ("q", "t", "start", "end")}

DEFAULTS: dict[str, dict[str, Any]] = {
    "sample": {"dx": 0.05},
    "sigma": {"dx": 0.05},
    "sigma-scaling": {"dx": 0.05},
    "she": {"dx": 0.05, "dt": 2.5e-4},
    "stationarity": {"dx": 0.05, "dt": 2.5e-4},
    "wedge": {"method": "bessel", "n_paths": 100000, "dt": 1e-3, "correction": False, "b": 1.0, "eps": 0.02,
              "r_min": 100.0, "r_max": 1e4, "start": [0.0, 0.0]},
    "acceptance": {"tier": "quick", "check": False},
}


@dataclass
class ExperimentConfig:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    n_workers: int = 1
    out: str | None = None

    def echo(self) -> dict:
        return {"kind": self.kind, "params": _jsonable(self.params), "seed": self.seed, "n_workers": self.n_workers}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def default_seed() -> int:
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env, 0)
    except ValueError:
        raise InputError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def read_config_file(path: str, kind: str) -> dict[str, str]:
    """Raw ``key = value`` pairs from ``[common]`` and the section named after ``kind``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep "L" and "Ls" case-sensitive
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise InputError(f"malformed config {path}: {exc}") from None
    out: dict[str, str] = {}
    for sec in ("common", kind):
        if cp.has_section(sec):
            out.update(cp.items(sec))
    return out


def convert(name: str, raw) -> Any:
    key = name.replace("-", "_")
    if key not in PARAM_TYPES:
        return raw
    try:
        return PARAM_TYPES[key](raw)
    except InputError:
        raise
    except (TypeError, ValueError):
        raise InputError(f"invalid value for {name}: {raw!r}") from None


def build_config(kind: str, flags: dict[str, Any], config_path: str | None = None) -> ExperimentConfig:
    """Merge defaults < config file < flags (``None`` flags are unset) and validate."""
    if kind not in KINDS:
        raise InputError(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}")
    params: dict[str, Any] = dict(DEFAULTS.get(kind, {}))
    meta: dict[str, Any] = {"seed": None, "n_workers": 1, "out": None}
    if config_path:
        for k, raw in read_config_file(config_path, kind).items():
            k = k.replace("-", "_")
            if k in meta:
                meta[k] = raw
            elif k in PARAM_TYPES:
                params[k] = convert(k, raw)
            else:
                raise InputError(f"unknown parameter {k!r} in {config_path}")
    for k, val in flags.items():
        if val is None:
            continue
        if k in meta:
            meta[k] = val
        else:
            params[k] = convert(k, val) if isinstance(val, str) else val
    seed = default_seed() if meta["seed"] in (None, "") else meta["seed"]
    try:
        seed = int(seed, 0) if isinstance(seed, str) else int(seed)
        n_workers = int(meta["n_workers"])
    except (TypeError, ValueError):
        raise InputError("seed and n_workers must be integers") from None
    if not 0 <= seed < 2**64:
        raise InputError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if n_workers < 1:
        raise InputError(f"n_workers must be at least 1, got {n_workers}")
    required = REQUIRED.get(kind, ())
    if kind == "wedge":
        sub = params.get("sub")
        if sub not in WEDGE_REQUIRED:
            raise InputError("wedge needs a subcommand: survival, hit-tail or kernel")
        required = WEDGE_REQUIRED[sub]
    missing = [r for r in required if params.get(r) is None]
    if missing:
        raise InputError("missing required parameter(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return ExperimentConfig(kind, params, seed, n_workers, meta["out"])


# --------------------------------------------------------------------------- provenance and output


def git_describe() -> str:
    here = FsPath(__file__).resolve().parent
    try:
        r = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if r.returncode == 0 and r.stdout.strip():
            return r.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"openkpz-{__version__}"


def provenance(wall: float) -> dict:
    return {
        "git_describe": git_describe(),
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "wall_time_s": round(wall, 3),
        "rng": RNG_ALGORITHM,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
    }


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def csv_text(rows: list[dict], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def emit(text: str, out: str | None, cfg: ExperimentConfig, wall: float, extra_meta: dict | None = None) -> None:
    """Write ``text`` to ``out`` and the provenance sidecar next to it.

    Without ``out`` the text goes to stdout and the sidecar content to stderr
    as one JSON line, so stdout stays machine-readable.
    """
    meta = {"config": cfg.echo(), "provenance": provenance(wall)}
    if extra_meta:
        meta.update(_jsonable(extra_meta))
    if out is None or out == "-":
        sys.stdout.write(text)
        sys.stderr.write("openkpz: meta " + json.dumps(meta, sort_keys=True) + "\n")
        return
    FsPath(out).parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    with open(out + ".meta.json", "w", encoding="utf-8") as fh:
        fh.write(json_text(meta))


@contextlib.contextmanager
def worker_map(n_workers: int) -> Iterator[Callable]:
    """``map`` for one worker, otherwise an ordered process-pool map.

    Work is always split by stream index and results are consumed in task
    order, so output does not depend on ``n_workers``.
    """
    if n_workers <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        yield pool.map


# --------------------------------------------------------------------------- experiments


def _gibbs_cfg(p: dict):
    from .gibbs_stationary import GibbsChainConfig

    kw = {k: p[k] for k in ("n_sweeps", "burn_in", "thinning") if p.get(k) is not None}
    return GibbsChainConfig(**kw)


def run_sample(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .gibbs_stationary import sample_two_layer

    p = cfg.params
    gcfg = _gibbs_cfg(p)
    grid = Grid.from_dx(p["L"], p["dx"])
    st = sample_two_layer(p["L"], p["u"], p["v"], grid, gcfg, RngStream(cfg.seed), p["n_samples"])
    header = {
        "kind": "stationary_samples",
        "L": p["L"],
        "u": p["u"],
        "v": p["v"],
        "dx": grid.dx,
        "cfg": gcfg.__dict__,
        "seed": cfg.seed,
        "git_describe": git_describe(),
        "layers": ["lambda"] if st.lambda_prime is None else ["lambda", "lambda_prime"],
    }
    buf = io.StringIO()
    paths = [st.lambda_] if st.lambda_prime is None else [st.lambda_, st.lambda_prime]
    save_jsonl(paths, buf, header=_jsonable(header))
    return buf.getvalue(), {"diagnostics": st.diagnostics}


def run_sigma(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .sigma_variance import estimate_sigma2

    p = cfg.params
    rng = RngStream(cfg.seed, 0, p.get("substream") or ())
    est = estimate_sigma2(p["L"], p["u"], p["v"], p["n"], _gibbs_cfg(p), rng, p["dx"], map_fn=mapper)
    return csv_text([est.as_row()], ["L", "u", "v", "n", "mean", "stderr"]), {}


def run_sigma_scaling(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .sigma_variance import fit_scaling

    p = cfg.params
    fit = fit_scaling(p["Ls"], p["u"], p["v"], p["n"], RngStream(cfg.seed), _gibbs_cfg(p), p["dx"], map_fn=mapper)
    return json_text(fit.as_dict()), {}


def read_sigma_csvs(directory: str) -> list[dict]:
    d = FsPath(directory)
    if not d.is_dir():
        raise InputError(f"not a directory: {directory}")
    rows = []
    for f in sorted(d.glob("*.csv")):
        with open(f, encoding="utf-8") as fh:
            for r in csv.DictReader(fh):
                if not {"L", "mean", "stderr"} <= set(r):
                    raise InputError(f"{f.name}: not a sigma table (need L, mean, stderr columns)")
                rows.append({k: float(r[k]) for k in ("L", "mean", "stderr")})
    if not rows:
        raise InputError(f"no sigma CSV files in {directory}")
    return rows


def run_report(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .sigma_variance import ScalingFit, fit_loglog

    rows = sorted(read_sigma_csvs(cfg.params["dir"]), key=lambda r: r["L"])
    Ls = np.array([r["L"] for r in rows])
    m = np.array([r["mean"] for r in rows])
    s = np.array([r["stderr"] for r in rows])
    slope, icpt, sse, ci, chi2 = fit_loglog(Ls, m, s)
    return json_text(ScalingFit(Ls, m, s, slope, icpt, sse, ci, chi2).as_dict()), {}


def run_she(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .robin_heat import RobinSpec
    from .she_solver import jackknife_variance, solve_she, stationary_profiles

    p = cfg.params
    rng = RngStream(cfg.seed)
    grid = Grid.from_dx(p["L"], p["dx"])
    lam = stationary_profiles(p["L"], p["u"], p["v"], grid, p["replicas"], rng.spawn(0), _gibbs_cfg(p))
    spec = RobinSpec.from_uv(p["L"], p["u"], p["v"])
    traj = solve_she(spec, Path(grid, np.exp(lam)), p["t"], p["dt"], rng.spawn(1))
    z = traj.at(p["t"])
    if np.any(z <= 0):
        raise NumericalError("clipped values at the final time; reduce dt")
    h0 = np.log(z[:, 0])
    var, se = jackknife_variance(h0)
    stats = {
        "L": p["L"], "u": p["u"], "v": p["v"], "t": p["t"], "dx": grid.dx, "dt": p["dt"],
        "replicas": p["replicas"], "mean_H0": float(h0.mean()), "mean_H0_stderr": float(h0.std(ddof=1) / math.sqrt(h0.size)),
        "var_H0": var, "var_H0_stderr": se, "clip_count": traj.clip_count, "clip_fraction": traj.clip_fraction,
        "seed": cfg.seed,
    }
    if p.get("snapshots"):
        with open(p["snapshots"], "w", encoding="utf-8") as fh:
            save_jsonl(Path(grid, np.log(np.maximum(z, 1e-300))), fh, header={"kind": "she_height", "t": p["t"], "seed": cfg.seed})
    return json_text(stats), {}


def run_stationarity(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .she_solver import stationarity_test

    p = cfg.params
    r = stationarity_test(p["L"], p["u"], p["v"], p["t"], p["replicas"], _gibbs_cfg(p), RngStream(cfg.seed), p["dx"], p["dt"])
    rows = [
        {"x": x, "ks_stat": s, "p_value": pv, "control_stat": cs, "control_p_value": cp}
        for x, s, pv, cs, cp in zip(r.xs, r.statistics, r.pvalues, r.control_statistics, r.control_pvalues)
    ]
    return csv_text(rows), {"clip_fraction": r.clip_fraction}


def run_kernel(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .robin_heat import RobinSpec, find_eigenvalues, kernel, modes_needed

    p = cfg.params
    spec = RobinSpec.from_uv(p["L"], p["u"], p["v"])
    # a basis too short for t is extended by kernel(); report the one actually used
    need = modes_needed(spec, p["t"])
    basis = find_eigenvalues(spec, max(p.get("n_modes") or 0, need))
    if basis.n_oscillatory < need:
        basis = find_eigenvalues(spec, need + basis.n_modes - basis.n_oscillatory)
    val = kernel(basis, p["t"], p["x"], p["y"])
    if p.get("basis_json"):
        with open(p["basis_json"], "w", encoding="utf-8") as fh:
            fh.write(json_text(basis.to_dict()))
    row = {"L": p["L"], "u": p["u"], "v": p["v"], "A": spec.A, "B": spec.B, "t": p["t"], "x": p["x"], "y": p["y"],
           "kernel": val, "stderr": "exact", "n_modes": basis.n_modes}
    return csv_text([row]), {}


def run_wedge(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from . import wedge_lab as wl

    p = cfg.params
    rng = RngStream(cfg.seed)
    sub = p["sub"]
    if sub == "kernel":
        wc = wl.WedgeConfig(p["q"])
        k = wl.killed_kernel_bessel(wc, p["t"], p["start"], p["end"])
        row = {"q": p["q"], "t": p["t"], "start_x": p["start"][0], "start_y": p["start"][1], "end_x": p["end"][0],
               "end_y": p["end"][1], "kernel": k, "free_kernel": wl.free_kernel(p["t"], p["start"], p["end"]), "stderr": "exact"}
        return csv_text([row]), {}
    if sub == "hit-tail":
        tail = wl.wedge_hit_tail(p["q"], p["b"], p.get("L"), p["n_paths"], rng, eps=p["eps"], map_fn=mapper)
        try:
            fit = wl.fit_tail_slope(tail, p["r_min"], p["r_max"], rng=rng.spawn(10**6)).as_dict()
        except InputError as exc:
            # the table is still valid; the fit needs more paths or a narrower window
            fit = {"error": str(exc)}
        return csv_text(tail.rows()), {"fit": fit}
    # survival: either one (T, end) pair or an L sweep with end (b sqrt(2L/3), 0)
    if p.get("Ls"):
        cases = [(L, L, [p["b"] * math.sqrt(2 * L / 3), 0.0]) for L in p["Ls"]]
    elif p.get("T") is not None and p.get("end") is not None:
        cases = [(None, p["T"], p["end"])]
    else:
        raise InputError("wedge survival needs --Ls, or --T with --end")
    rows, ests = [], []
    for i, (L, T, end) in enumerate(cases):
        e = wl.survival_prob_bridge(p["start"], end, T, p["q"], p["method"], rng.spawn(i), p["n_paths"], p["dt"],
                                    p["correction"], map_fn=mapper)
        ests.append(e)
        rows.append({"L": L, "T": T, "end_x": end[0], "end_y": end[1], "p": e.p,
                     "stderr": e.stderr if e.method != "bessel" else "exact", "method": e.method, "dt": e.dt})
    extra = {}
    if len(ests) >= 3 and all(e.p > 0 for e in ests):
        if ests[0].method == "bessel":
            x, y = np.log([c[0] for c in cases]), np.log([e.p for e in ests])
            extra["fit"] = {"slope": float(np.polyfit(x, y, 1)[0])}
        else:
            extra["fit"] = wl.fit_survival_slope([c[0] for c in cases], ests).as_dict()
    return csv_text(rows), extra


def run_acceptance(cfg: ExperimentConfig, mapper) -> tuple[str, dict]:
    from .acceptance import acceptance_suite

    p = cfg.params
    res = acceptance_suite(p["tier"], cfg.seed, mapper, p.get("only"))
    for r in res:
        print(r.line(), file=sys.stderr)
    text = csv_text([r.as_row() for r in res], ["id", "passed", "measured", "detail"])
    return text, {"all_passed": all(r.passed for r in res), "_results": res}


RUNNERS: dict[str, Callable] = {
    "sample": run_sample,
    "sigma": run_sigma,
    "sigma-scaling": run_sigma_scaling,
    "report": run_report,
    "she": run_she,
    "stationarity": run_stationarity,
    "kernel": run_kernel,
    "wedge": run_wedge,
    "acceptance": run_acceptance,
}


def run(cfg: ExperimentConfig) -> int:
    """Execute one experiment; returns the process exit code."""
    t0 = time.perf_counter()
    with worker_map(cfg.n_workers) as mapper:
        text, extra = RUNNERS[cfg.kind](cfg, mapper)
    extra = dict(extra)
    results = extra.pop("_results", None)
    emit(text, cfg.out, cfg, time.perf_counter() - t0, extra)
    if cfg.kind == "acceptance" and cfg.params.get("check") and results is not None:
        if not all(r.passed for r in results):
            return EXIT_ACCEPTANCE
    return EXIT_OK
