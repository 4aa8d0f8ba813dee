"""Acceptance checks with fixed parameters and tolerances.

``quick`` runs the fast structural checks (Q*) plus A2. ``full`` runs A1-A13,
each exactly once. Every check returns a :class:`CriterionResult`; failures
are report entries, never exceptions.
"""

from __future__ import annotations

import math
import time
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gibbs_stationary as gs
from . import robin_heat as rh
from . import she_solver as she
from . import sigma_variance as sv
from . import wedge_lab as wl
from .errors import InputError
from .grid_paths import Grid, Path, RngStream, sample_bm, sample_bridge


@dataclass(frozen=True)
class CriterionResult:
    id: str
    passed: bool
    measured: str
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{self.id:<4} {'PASS' if self.passed else 'FAIL'}  {self.measured}  [{self.detail}] ({self.seconds:.1f}s)"

    def as_row(self) -> dict:
        return {"id": self.id, "passed": self.passed, "measured": self.measured, "detail": self.detail}


def _f(x: float) -> str:
    return f"{x:.6g}"


# --------------------------------------------------------------------------- quick checks


def gram_check(v1=wl.V1, v2=wl.V2) -> tuple[bool, str]:
    G = np.array([v1, v2])
    gram = G @ G.T
    return bool(np.allclose(gram, [[2.0, 1.0], [1.0, 2.0]], atol=1e-14)), str(gram.round(12).tolist())


def q_gram(seed: int, map_fn=map) -> tuple[bool, str, str]:
    ok, m = gram_check()
    return ok, m, "Gram matrix of v1, v2 equals [[2,1],[1,2]]"


def q_apex(seed: int, map_fn=map):
    vals = [wl.WedgeConfig(q).omega(q * wl.H) for q in (1.0, 2.5)]
    ok = abs(vals[0] - 1.0) < 1e-14 and abs(vals[1] - 2.5) < 1e-14 and abs(wl.omega([-1.0, 0.0]) - math.sqrt(6) / 2) < 1e-14
    return ok, str([_f(v) for v in vals]), "omega(q h) = q and omega((-1,0)) = sqrt(6)/2"


def q_rng(seed: int, map_fn=map):
    s = RngStream(seed, 3, (1, 2))
    a = s.generator().standard_normal(8)
    b = s.generator().standard_normal(8)
    c = s.spawn(0).generator().standard_normal(8)
    return bool(np.array_equal(a, b) and not np.array_equal(a, c)), "replay equal, child differs", "stream replay"


def q_bridge(seed: int, map_fn=map):
    g = Grid(3.0, 301)
    p = sample_bridge(g, 0.5, -1.25, 2.0, RngStream(seed).generator(), size=50)
    ok = np.all(p.values[:, 0] == 0.5) and np.all(p.values[:, -1] == -1.25)
    return bool(ok), "endpoints exact", "bridge endpoints"


def q_neumann(seed: int, map_fn=map):
    L = 3.0
    basis = rh.find_eigenvalues(rh.RobinSpec(L, 0.0, 0.0), 64)
    gen = RngStream(seed).generator()
    x, y = gen.uniform(0, L, 20), gen.uniform(0, L, 20)
    err = float(np.max(np.abs(rh.kernel(basis, 0.3, x, y) - rh.neumann_image_kernel(L, 0.3, x, y))))
    sym = float(np.max(np.abs(rh.kernel(basis, 0.3, x, y) - rh.kernel(basis, 0.3, y, x))))
    return err < 1e-10 and sym < 1e-12, f"err={err:.2e} sym={sym:.2e}", "Neumann kernel and symmetry"


def q_wedge_kernel(seed: int, map_fn=map):
    cfg = wl.WedgeConfig(1.0)
    a, b = np.array([0.1, -0.2]), np.array([0.7, 0.4])
    k1 = wl.killed_kernel_bessel(cfg, 0.8, a, b)
    k2 = wl.killed_kernel_bessel(cfg, 0.8, b, a)
    edge = cfg.apex + 1.5 * np.array([math.cos(math.pi / 3), math.sin(math.pi / 3)])
    kb = wl.killed_kernel_bessel(cfg, 0.8, a, edge)
    ok = abs(k1 - k2) <= 1e-12 * abs(k1) and kb < 1e-12 and k1 > 0
    return ok, f"asym={abs(k1 - k2):.2e} boundary={kb:.2e}", "wedge kernel symmetry and absorbing boundary"


def q_cutoff(seed: int, map_fn=map):
    flat = max(abs(wl.cutoff_q(100.0, y)) for y in np.linspace(0, 1, 11))
    dq = float(np.max(np.abs(wl.cutoff_q_prime(100.0, np.linspace(49.0, 100.0, 10)))))
    return flat == 0.0 and dq == 0.0, f"q_r on [0,1]={flat:.1e} q_r' on [r/2-1,r]={dq:.1e}", "cutoff flat regions"


def q_swap(seed: int, map_fn=map):
    L = 2.0
    g = Grid.from_dx(L, 0.05)
    f = Path(g, np.exp(np.sin(g.x)))
    h = Path(g, 1.0 + g.x**2)
    rep = she.swap_invariance_test(L, 0.3, 0.8, 0.25, f, h, 2, None, dt=1e-3, noise_scale=0.0)
    d = abs(rep.mean_gf - rep.mean_fg)
    return d < 1e-12, f"|diff|={d:.2e}", "zero-noise swap symmetry"


def q_a2(seed: int, map_fn=map):
    return _a2(seed)


QUICK: dict[str, Callable] = {
    "Q1": q_gram,
    "Q2": q_apex,
    "Q3": q_rng,
    "Q4": q_bridge,
    "Q5": q_neumann,
    "Q6": q_wedge_kernel,
    "Q7": q_cutoff,
    "Q8": q_swap,
    "A2": q_a2,
}


# --------------------------------------------------------------------------- criteria


def a1(seed: int, map_fn=map):
    fit = sv.fit_scaling([4, 8, 16, 32], 0.0, 0.0, 100_000, RngStream(seed, 1), dx=0.05, map_fn=map_fn)
    lo, hi = fit.slope_ci
    ok = lo <= -0.35 and hi >= -0.65 and not (lo <= 0 <= hi)
    pts = ", ".join(f"L={int(L)}:{_f(m)}+-{_f(s)}" for L, m, s in zip(fit.Ls, fit.means, fit.stderrs))
    return ok, f"slope={_f(fit.slope)} CI=[{_f(lo)},{_f(hi)}]", f"target CI meets [-0.65,-0.35], excludes 0; {pts}"


def _a2(seed: int):
    L = 8.0
    g = Grid.from_dx(L, 0.05)
    gen = RngStream(seed, 2).generator()
    l1, l2, l3 = (sample_bm(g, 0.0, 1.0, gen, 1000) for _ in range(3))
    total = sum(sv.f_of_y(l1, l2, l3, y) for y in range(int(L)))
    ratio = sv.sigma_ratio(l1, l2, l3)
    err = float(np.max(np.abs(total - ratio) / ratio))
    return err <= 1e-12, f"max rel err={err:.2e}", "sum_y f(y) = ratio on 1000 samples, L=8"


def a2(seed: int, map_fn=map):
    return _a2(seed)


def a3(seed: int, map_fn=map):
    Ls = [16, 32, 64, 128]
    ests = [
        wl.survival_prob_bridge(
            [0.0, 0.0], [math.sqrt(2 * L / 3), 0.0], float(L), 1.0, "mc", RngStream(seed, 3, (i,)), 100_000, 1e-3, map_fn=map_fn
        )
        for i, L in enumerate(Ls)
    ]
    fit = wl.fit_survival_slope(Ls, ests)
    lo, hi = fit.ci
    ok = lo >= -0.95 and hi <= -0.55
    pts = ", ".join(f"L={L}:{_f(e.p)}+-{_f(e.stderr)}" for L, e in zip(Ls, ests))
    return ok, f"slope={_f(fit.slope)} CI=[{_f(lo)},{_f(hi)}]", f"target CI inside [-0.95,-0.55]; {pts}"


A4_ENDS = ((0.0, 0.0), (0.6, 0.2))


def a4(seed: int, map_fn=map):
    rows, ok = [], True
    i = 0
    for q in (1.0, 2.0):
        for t in (0.5, 1.0):
            for end in A4_ENDS:
                b = wl.survival_prob_bridge([0.0, 0.0], end, t, q).p
                s = RngStream(seed, 4, (i,))
                m1 = wl.survival_prob_bridge([0.0, 0.0], end, t, q, "mc", s.spawn(0), 100_000, 1e-3, True, map_fn)
                m2 = wl.survival_prob_bridge([0.0, 0.0], end, t, q, "mc", s.spawn(1), 100_000, 5e-4, True, map_fn)
                tol = 3 * m1.stderr + abs(m1.p - m2.p)
                good = abs(b - m1.p) <= tol
                ok &= good
                rows.append(f"q={q:g},t={t:g},end={end}:bessel={_f(b)},mc={_f(m1.p)},tol={_f(tol)}{'' if good else '!'}")
                i += 1
    return ok, f"{sum(not r.endswith('!') for r in rows)}/{len(rows)} configs agree", "; ".join(rows)


def a5(seed: int, map_fn=map):
    gen = RngStream(seed, 5).generator()
    L = 3.0
    nb = rh.find_eigenvalues(rh.RobinSpec(L, 0.0, 0.0), 64)
    errs = []
    for _ in range(100):
        t = float(np.exp(gen.uniform(np.log(1e-3), np.log(2.0))))
        x, y = gen.uniform(0, L, 2)
        errs.append(abs(rh.kernel(nb, t, x, y) - float(rh.neumann_image_kernel(L, t, x, y))))
    e_img = max(errs)
    spec = rh.RobinSpec.from_uv(L, 0.3, 1.7)
    rb = rh.find_eigenvalues(spec, 200)
    osc = [i for i, k in enumerate(rb.kinds) if k == "oscillatory"]
    a2n = rb.norm_a[osc[50:]] ** 2
    e_a = float(np.max(np.abs(a2n * L / 2 - 1)))
    z, w = np.polynomial.legendre.leggauss(600)
    z = (z + 1) * L / 2
    w = w * L / 2
    x, y = gen.uniform(0, L, 5), gen.uniform(0, L, 5)
    t, s = 0.2, 0.35
    lhs = rh.kernel(rb, t + s, x, y)
    rhs = np.array([np.sum(w * rh.kernel(rb, t, xi, z) * rh.kernel(rb, s, z, yi)) for xi, yi in zip(x, y)])
    e_sg = float(np.max(np.abs(lhs - rhs)))
    ok = e_img <= 1e-10 and e_a <= 0.01 and e_sg <= 1e-8
    return ok, f"image={e_img:.2e} a_n^2={e_a:.2e} semigroup={e_sg:.2e}", "tolerances 1e-10, 1%, 1e-8"


def _a6_error(dx: float) -> float:
    L = 4.0
    spec = rh.RobinSpec.from_uv(L, 1.0, 1.0)
    g = Grid.from_dx(L, dx)
    f = lambda x: np.exp(np.sin(1.3 * x) + 0.2 * x)
    traj = she.solve_she(spec, Path(g, f(g.x)), 1.0, dx * dx / 4, None, noise_scale=0.0)
    ref = rh.heat_solution(spec, 0.5, f, g).values
    return float(np.max(np.abs(traj.at(1.0) - ref)) / np.max(np.abs(ref)))


def a6(seed: int, map_fn=map):
    e1 = _a6_error(0.025)
    e2 = _a6_error(0.0125)
    ok = e1 <= 1e-4 and e2 <= e1 / 2
    return ok, f"err(dx=0.025)={e1:.3e} err(dx=0.0125)={e2:.3e}", "dt=dx^2/4; refinement quarters dt"


def a7(seed: int, map_fn=map):
    r = she.stationarity_test(4.0, 0.0, 0.0, 1.0, 2000, None, RngStream(seed, 7), dx=0.05, dt=2.5e-4)
    ok = min(r.pvalues) > 1e-3 and max(r.control_pvalues) < 1e-6
    return ok, f"p={[_f(p) for p in r.pvalues]} control={[_f(p) for p in r.control_pvalues]}", "x=1,2,3; L=4, t=1"


_SIGMA4: dict[int, sv.SigmaEstimate] = {}


def _sigma4(seed: int, map_fn=map) -> sv.SigmaEstimate:
    # shared by A8 and A9; the value depends on the seed only
    if seed not in _SIGMA4:
        _SIGMA4[seed] = sv.estimate_sigma2(4.0, 0.0, 0.0, 100_000, None, RngStream(seed, 100), 0.05, map_fn=map_fn)
    return _SIGMA4[seed]


def a8(seed: int, map_fn=map):
    sig = _sigma4(seed, map_fn)
    hs = she.variance_of_height(4.0, 0.0, 0.0, [1.0, 2.0, 4.0], 2000, None, RngStream(seed, 8), sigma2_ref=sig.mean)
    devs = [abs(math.sqrt(h.var_height) - math.sqrt(h.t * sig.mean)) for h in hs]
    ok = all(d <= 3 * math.sqrt(4.0) for d in devs)
    m = ", ".join(f"t={h.t:g}:Var={_f(h.var_height)}+-{_f(h.stderr)}" for h in hs)
    return ok, f"max dev={_f(max(devs))} (bound 6)", f"sigma2_4={_f(sig.mean)}; {m}"


def a9(seed: int, map_fn=map):
    sig = _sigma4(seed, map_fn)
    est = [she.estimate_IL_variance(4.0, 0.0, 0.0, t, 2000, 50, None, RngStream(seed, 9, (i,))) for i, t in enumerate((1.0, 2.0))]
    r = [(e.value / t, e.stderr / t) for e, t in zip(est, (1.0, 2.0))]
    same_t = abs(r[0][0] - r[1][0]) <= 3 * math.hypot(r[0][1], r[1][1])
    near_sig = all(abs(v - sig.mean) <= 3 * math.hypot(s, sig.std_error) for v, s in r)
    return (
        same_t and near_sig,
        f"t=1:{_f(r[0][0])}+-{_f(r[0][1])} t=2:{_f(r[1][0])}+-{_f(r[1][1])}",
        f"sigma2_4={_f(sig.mean)}+-{_f(sig.std_error)}",
    )


def a10(seed: int, map_fn=map):
    c = sv.yl_limit_coupled([8, 16], 4000, 200, RngStream(seed, 10))
    lim = c.limit
    within = [abs(e.value - lim.value) <= 3 * math.hypot(e.stderr, lim.stderr) for e in c.yl]
    d8, d16 = (abs(e.value - lim.value) for e in c.yl)
    ok = all(within) and d16 < d8
    return (
        ok,
        f"L=8:{_f(c.yl[0].value)} L=16:{_f(c.yl[1].value)} limit:{_f(lim.value)}",
        f"|d8|={_f(d8)} |d16|={_f(d16)} se~{_f(lim.stderr)}",
    )


def a11(seed: int, map_fn=map):
    tail = wl.wedge_hit_tail(1.0, 1.0, None, 100_000, RngStream(seed, 11), map_fn=map_fn)
    fit = wl.fit_tail_slope(tail, 1e2, 1e4, rng=RngStream(seed, 11, (99,)))
    lo, hi = fit.ci
    ok = lo >= -0.65 and hi <= -0.35
    return ok, f"slope={_f(fit.slope)} CI=[{_f(lo)},{_f(hi)}]", "target CI inside [-0.65,-0.35], r in [1e2,1e4]"


def a12(seed: int, map_fn=map):
    from scipy import stats

    L = 8.0
    g = Grid.from_dx(L, 0.05)
    st = gs.sample_two_layer(L, 1.0, 1.0, g, gs.GibbsChainConfig(), RngStream(seed, 12), 200_000)
    lam = st.lam
    m = int(round(1 / g.dx))
    Ms = np.array([1.0, 2.0, 3.0, 4.0])
    ok, parts = True, []
    for y in (0, 3, 7):
        i = y * m
        sup = np.abs(lam[:, i : i + m + 1] - lam[:, i : i + 1]).max(axis=1)
        p = np.array([np.mean(sup > M) for M in Ms])
        if np.any(p == 0):
            ok = False
            parts.append(f"y={y}: zero count")
            continue
        reg = stats.linregress(Ms**2, np.log(p))
        good = reg.slope < 0 and reg.rvalue**2 > 0.9
        ok &= good
        parts.append(f"y={y}: slope={_f(reg.slope)} R2={_f(reg.rvalue**2)}")
    return ok, "; ".join(parts), "u=v=1, L=8, 2e5 samples"


def a13(seed: int, map_fn=map):
    vals = []
    for i, L in enumerate((4.0, 16.0, 64.0)):
        st = gs.sample_two_layer(L, 1.0, 1.0, Grid.from_dx(L, 0.05), gs.GibbsChainConfig(), RngStream(seed, 13, (i,)), 2000)
        v2 = st.V_L(0.0) ** 2
        vals.append((float(v2.mean()), float(v2.std(ddof=1) / math.sqrt(v2.size))))
    sep = lambda a, b: a[0] - b[0] > 2 * math.hypot(a[1], b[1])
    ok = sep(vals[0], vals[1]) and sep(vals[1], vals[2])
    return ok, ", ".join(f"L={L:g}:{_f(m)}+-{_f(s)}" for L, (m, s) in zip((4, 16, 64), vals)), "u=v=1, 2000 samples each"


FULL: dict[str, Callable] = {
    "A1": a1,
    "A2": a2,
    "A3": a3,
    "A4": a4,
    "A5": a5,
    "A6": a6,
    "A7": a7,
    "A8": a8,
    "A9": a9,
    "A10": a10,
    "A11": a11,
    "A12": a12,
    "A13": a13,
}


def run_criterion(cid: str, fn: Callable, seed: int, map_fn=map) -> CriterionResult:
    t0 = time.perf_counter()
    try:
        ok, measured, detail = fn(seed, map_fn)
    except Exception as exc:  # a crash is a failed criterion, not a crashed suite
        ok, measured, detail = False, f"error: {type(exc).__name__}: {exc}", traceback.format_exc(limit=3).replace("\n", " | ")
    return CriterionResult(cid, bool(ok), measured, detail, time.perf_counter() - t0)


def acceptance_suite(tier: str = "quick", seed: int = 0, map_fn=map, only: list[str] | None = None) -> list[CriterionResult]:
    if tier not in ("quick", "full"):
        raise InputError(f"tier must be 'quick' or 'full', got {tier!r}")
    table = QUICK if tier == "quick" else FULL
    ids = only or list(table)
    unknown = [c for c in ids if c not in table]
    if unknown:
        raise InputError(f"unknown {tier} criterion id(s): {', '.join(unknown)}")
    return [run_criterion(cid, table[cid], seed, map_fn) for cid in ids]
