"""Acceptance suite: numbered checks with fixed seeds and a reduced ``quick`` grid.

Each check returns a pass flag and a JSON-serialisable detail dict.  Outputs
carry no timings so that runs can be compared byte for byte.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, stats

from . import exploration as ex
from . import iic, percolation as perc, villain as vl
from .geometry import RegionSpec, build_box, build_grid
from .gff import (bridge_open_probability, bridge_oracle_grid, make_sampler, open_edges, sample_cable_points,
                  with_boundary)
from .mc import WORKERS_ENV
from .potential import CablePoint, green, green_mc_oracle, metric_green

BASE_SEED = 20240611


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: dict
    budget_s: float
    seconds: float = 0.0

    @property
    def within_budget(self) -> bool:
        return self.seconds <= self.budget_s

    def line(self) -> str:
        return (f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name} "
                f"({self.seconds:.1f}s, budget {self.budget_s:.0f}s)")

    def to_dict(self) -> dict:
        return {"number": self.number, "name": self.name, "passed": self.passed, "detail": self.detail}


CRITERIA: dict[int, tuple[str, float, Callable]] = {}


def criterion(number: int, name: str, budget_s: float):
    def register(fn):
        CRITERIA[number] = (name, budget_s, fn)
        return fn
    return register


def _q(quick: bool, full, small):
    return small if quick else full


def _chisq(observed, expected, min_expected: float = 5.0) -> float:
    """Pearson p-value after pooling all cells with expected count below ``min_expected``."""
    o = np.asarray(observed, dtype=float).ravel()
    e = np.asarray(expected, dtype=float).ravel()
    e = e * o.sum() / e.sum()
    small = e < min_expected
    if small.any():
        o = np.r_[o[~small], o[small].sum()]
        e = np.r_[e[~small], e[small].sum()]
    return float(stats.chisquare(o, e).pvalue)


@criterion(1, "Green vs random-walk oracle", 60)
def _green_oracle(quick, seed):
    dom = build_box(3, 2)
    G = green(dom)
    rng = np.random.default_rng(seed)
    pairs = rng.integers(0, dom.n_interior, size=(20, 2))
    walks = _q(quick, 200_000, 20_000)
    z = []
    for k, (u, v) in enumerate(pairs):
        est = green_mc_oracle(dom, int(u), int(v), walks, seed + k)
        z.append(abs(est.value - G(int(u), int(v))) / est.stderr)
    return max(z) <= 3.0, {"pairs": 20, "walks": walks, "max_z": max(z)}


@criterion(2, "GFF covariance", 30)
def _gff_cov(quick, seed):
    dom = build_box(2, 1)
    G = green(dom).matrix
    n = _q(quick, 100_000, 20_000)
    x = make_sampler(dom).sample(np.random.default_rng(seed), n)
    prod = x[:, :, None] * x[:, None, :]
    se = prod.std(axis=0, ddof=1) / math.sqrt(n)
    z = np.abs(prod.mean(axis=0) - G) / se
    return bool(z.max() <= 5.0), {"samples": n, "max_z": float(z.max())}


@criterion(3, "Cable Green formula", 60)
def _metric_green(quick, seed):
    dom = build_box(2, 2)
    G = green(dom)
    rng = np.random.default_rng(seed)
    pts = []
    for k in range(10):
        e1 = dom.edges[rng.integers(dom.n_edges)]
        e2 = e1 if k < 3 else dom.edges[rng.integers(dom.n_edges)]
        pts += [CablePoint(int(e1[0]), int(e1[1]), float(rng.random())),
                CablePoint(int(e2[0]), int(e2[1]), float(rng.random()))]
    n = _q(quick, 100_000, 20_000)
    vals = with_boundary(dom, make_sampler(dom).sample(rng, n))
    w = sample_cable_points(dom, vals, pts, rng)
    z = []
    for k in range(10):
        prod = w[:, 2 * k] * w[:, 2 * k + 1]
        z.append(abs(prod.mean() - metric_green(dom, G, pts[2 * k], pts[2 * k + 1])) / (prod.std(ddof=1) / math.sqrt(n)))
    return max(z) <= 5.0, {"pairs": 10, "same_edge_pairs": 3, "samples": n, "max_z": max(z)}


@criterion(4, "Bridge law gate", 120)
def _bridge_gate(quick, seed):
    grid = (0.25, 1.0, 3.0)
    pts = [(a, b, 0.0, d) for d in (2, 3) for a in grid for b in grid]
    steps, reps = _q(quick, (2048, 200_000), (512, 20_000))
    res = bridge_oracle_grid(pts, steps, reps, seed)
    ok = [r.accepts(bridge_open_probability(*p)) for p, r in zip(pts, res)]
    return all(ok), {"points": len(pts), "steps": steps, "reps": reps, "rejected": int(len(ok) - sum(ok))}


def _random_nested(rng, n, k_small, k_big):
    perm = rng.permutation(n)
    return perm[:k_small], perm[:k_big]


@criterion(5, "Harmonic-measure decomposition", 30)
def _decomposition(quick, seed):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for dom in (build_box(2, 2), build_grid((4, 4, 4))):
        G = green(dom)
        n = dom.n_interior
        for _ in range(10):
            a = int(rng.integers(0, n // 3))
            b = int(rng.integers(a + 1, n // 2))
            Is, It = _random_nested(rng, n, a, b)
            worst = max(worst, ex.decomposition_residual(dom, G, Is, It))
    return worst <= 1e-10, {"pairs": 20, "max_residual": worst}


@criterion(6, "Quadratic variation", 30)
def _quadratic_variation(quick, seed):
    dom = build_box(2, 3)
    G = green(dom)
    A = [dom.vertex((0, 0)), dom.vertex((1, 0)), dom.vertex((0, 1))]
    rng = np.random.default_rng(seed)
    order = [v for v in rng.permutation(dom.n_interior) if v not in A][:30]
    sets = [order[:3 * k] for k in range(11)]
    qv = ex.quadratic_variation(dom, G, ex.ExplorationSequence(dom, sets, A))
    M = G.matrix

    def direct(I):
        if not len(I):
            return M[np.ix_(A, A)].mean()
        S = M[np.ix_(A, A)] - M[np.ix_(A, I)] @ np.linalg.solve(M[np.ix_(I, I)], M[np.ix_(I, A)])
        return S.mean()

    v0 = direct(sets[0])
    err = max(abs(q - (v0 - direct(s))) for q, s in zip(qv.values, sets))
    return bool(qv.nondecreasing and err <= 1e-10), {"steps": 10, "max_error": float(err),
                                                   "nondecreasing": qv.nondecreasing, "final": qv.values[-1]}


@criterion(7, "First passage formula", 120)
def _first_passage(quick, seed):
    pts = [(m, b) for m in (-0.5, 0.0, 0.5) for b in (0.5, 1.0, 2.0)]
    paths, steps = _q(quick, (100_000, 10_000), (10_000, 2_000))
    res = ex.first_passage_oracle_grid(pts, 1.0, paths, steps, seed)
    ok = [r.accepts(ex.first_passage_cdf(ex.StoppingTimeParams(m, b, 1.0))) for (m, b), r in zip(pts, res)]
    exact = max(abs(ex.first_passage_cdf(ex.StoppingTimeParams(0.0, b, 1.0)) - 2 * stats.norm.sf(b))
                for b in (0.5, 1.0, 2.0))
    return bool(all(ok) and exact <= 1e-12), {"points": 9, "rejected": int(9 - sum(ok)), "m0_error": float(exact)}


@criterion(8, "Crossing scaling window", 600)
def _crossing_scaling(quick, seed):
    Ns = _q(quick, [4, 6, 8, 12, 16], [4, 6, 8])
    reps = _q(quick, 20_000, 2_000)
    rows = perc.crossing_scaling(3, Ns, 0.0, reps, seed)
    ps = [r["estimate"].value for r in rows]
    slope, _ = perc.loglog_slope(Ns, ps)
    scaled = [p * math.sqrt(N) for p, N in zip(ps, Ns)]
    spread = max(scaled) / min(scaled)
    ok = -0.65 <= slope <= -0.35 and spread <= 3.0
    return bool(ok), {"N": Ns, "reps": reps, "p_hat": ps, "slope": slope, "sqrtN_spread": spread,
                      "enclosure": 1.5}


@criterion(9, "Monotone coupling", 10)
def _monotone(quick, seed):
    dom = build_box(3, 4)
    rng = np.random.default_rng(seed)
    vals = with_boundary(dom, make_sampler(dom).sample(rng, 100))
    u = rng.random((100, dom.n_edges))
    sets = [open_edges(dom, vals, h, u) for h in (0.4, 0.2, 0.0)]
    viol = int((sets[0] & ~sets[1]).sum() + (sets[1] & ~sets[2]).sum())
    return viol == 0, {"samples": 100, "violations": viol}


@criterion(10, "FKG checks", 120)
def _fkg(quick, seed):
    dom = build_box(3, 3)
    c = (0, 0, 0)
    qa = perc.CrossingQuery(RegionSpec.box(c, 0), RegionSpec.sphere(c, 3))
    qb = perc.CrossingQuery(RegionSpec.box((1, 0, 0), 0), RegionSpec.sphere(c, 3))
    n = _q(quick, 50_000, 5_000)
    g = perc.crossing_association(dom, qa, qb, n, seed)
    chains, sweeps = _q(quick, (50, 1000), (10, 500))
    v = vl.angle_association(build_grid((3, 3)), 1.0, (1, 1), (1, 2), 0.5, chains, sweeps, seed + 1)
    return bool(g.holds() and v.holds()), {"gff": g.row(), "villain": v.row()}


@criterion(11, "IIC convergence diagnostic", 600)
def _iic(quick, seed):
    dom = build_box(3, 12)
    ev = iic.CylinderEvent.degree_at_least((0, 0, 0), 2)
    reps = _q(quick, 20_000, 2_000)
    a = iic.iic_convergence_scan(dom, (3, 5, 8), ev, reps, seed)
    b = iic.iic_height_scan(dom, ev, (0.4, 0.2, 0.1, 0.05, 0.0), reps, seed + 1, R_max=8)
    cmp = iic.compare_terminals(a, b)
    return cmp["pass"], {"reps": reps, **cmp}


@criterion(12, "Quasi-multiplicativity harness", 600)
def _qm(quick, seed):
    rows = iic.qm_scan(_q(quick, 50_000, 5_000), seed)
    worst = min(rows, key=lambda r: r.value)
    ok = all(r.lo > 0 for r in rows)
    return bool(ok), {"rows": len(rows), "min_C_hat": worst.value, "min_ci_lo": min(r.lo for r in rows),
                      "violations": sum(r.violations for r in rows)}


@criterion(13, "Villain kernel suite", 30)
def _kernels(quick, seed):
    rng = np.random.default_rng(seed)
    norm_err = sym_fail = 0.0
    dual_err = 0.0
    for _ in range(20):
        t = float(rng.uniform(0.1, 5.0))
        a, b = rng.uniform(0, 2 * math.pi, 2)
        sym_fail += vl.circle_kernel(t, a, b) != vl.circle_kernel(t, b, a)
        dual_err = max(dual_err, abs(vl.circle_kernel(t, a, b, "images") - vl.circle_kernel(t, a, b, "dual")))
        val = integrate.quad(lambda y: vl.circle_kernel(t, a, y), a - math.pi, a + math.pi,
                             epsabs=1e-12, epsrel=1e-12, limit=200)[0]
        norm_err = max(norm_err, abs(val - 1.0))
    ck = 0.0
    for s in (0.3, 1.0):
        for t in (0.3, 1.0):
            a, b = rng.uniform(0, 2 * math.pi, 2)
            val = integrate.quad(lambda u: vl.circle_kernel(s, a, u) * vl.circle_kernel(t, u, b), 0, 2 * math.pi,
                                 epsabs=1e-12, epsrel=1e-12, limit=200)[0]
            ck = max(ck, abs(val - vl.circle_kernel(s + t, a, b)))
    ok = norm_err <= 1e-10 and sym_fail == 0 and ck < 1e-8 and dual_err <= 1e-12
    return bool(ok), {"normalisation": norm_err, "symmetry_failures": int(sym_fail), "chapman_kolmogorov": ck,
                      "image_vs_dual": dual_err}


@criterion(14, "Avoidance probability gate", 180)
def _avoid_gate(quick, seed):
    ts = (0.1, 0.25, 0.5, 1.0, 2.0, 4.0)
    th = (-1.3, -0.5, 0.0, 0.7, 1.5, 2.5)
    pts = [(t, a, b) for t in ts for a in th for b in th]
    steps, reps = _q(quick, (1024, 100_000), (256, 10_000))
    res = vl.avoid_oracle_grid(pts, vl.S_PLUS_MINUS_I, steps, reps, seed)
    ok, zeros = [], 0
    for p, r in zip(pts, res):
        target = vl.edge_avoid_probability(*p, vl.S_PLUS_MINUS_I)
        if math.cos(p[1]) * math.cos(p[2]) <= 0:
            zeros += 1
            ok.append(target == 0.0 and r.estimate.value == 0.0)
        else:
            ok.append(r.accepts(target))
    return all(ok), {"points": len(pts), "zero_cases": zeros, "rejected": int(len(ok) - sum(ok)),
                     "steps": steps, "reps": reps}


def _two_site_density(t: float, cells: int, sub: int = 64) -> np.ndarray:
    g = (np.arange(cells * sub) + 0.5) * (2 * math.pi / (cells * sub))
    one = vl.circle_kernel(t, g, 0.0) ** 3
    f = one[:, None] * one[None, :] * vl.circle_kernel(t, g[:, None], g[None, :])
    return f.reshape(cells, sub, cells, sub).sum(axis=(1, 3))


@criterion(15, "Gibbs sampler correctness", 120)
def _gibbs(quick, seed):
    rng = np.random.default_rng(seed)
    n1 = _q(quick, 100_000, 10_000)
    single = build_grid((1, 1))
    rec = vl.HeatBath(single, 1.0).run(np.zeros(1), n1, rng, record_every=1)
    edges = np.linspace(0, 2 * math.pi, 65)
    f = lambda x: vl.circle_kernel(1.0, x, 0.0) ** 4  # noqa: E731
    expected = [integrate.quad(f, a, b)[0] for a, b in zip(edges[:-1], edges[1:])]
    p1 = _chisq(np.histogram(rec[:, 0], edges)[0], expected)
    n2, thin = _q(quick, 20_000, 4_000), 5
    pair = vl.HeatBath(build_grid((1, 2)), 1.0).run(np.zeros(2), n2 * thin, rng, record_every=thin)
    cells = 8
    obs = np.histogram2d(pair[:, 0], pair[:, 1], bins=cells, range=[[0, 2 * math.pi]] * 2)[0]
    p2 = _chisq(obs, _two_site_density(1.0, cells))
    return bool(p1 > 0.01 and p2 > 0.01), {"single_site_p": p1, "two_site_p": p2, "updates": n1,
                                           "pair_samples": n2}


@criterion(16, "Villain correlation window", 300)
def _villain_ratio(quick, seed):
    chains, sweeps = _q(quick, (16, 500), (4, 100))
    r = vl.correlation_ratio(build_grid((8, 8)), 1.0, chains, sweeps, seed)
    e = r.ratio
    ok = 0 < e.value <= 1 and e.lo > 0 and e.hi <= 1 + 3 * e.stderr
    return bool(ok), r.to_dict()


@criterion(17, "Villain IIC diagnostic", 600)
def _villain_iic(quick, seed):
    chains, sweeps = _q(quick, (16, 500), (4, 100))
    sizes = _q(quick, [4, 6, 8], [8])
    scan = vl.villain_iic_scan(sizes, [1.2, 1.4, 1.5, 1.55], chains, sweeps, seed)
    return bool(scan.diagnostics[8]["pass"]), scan.to_dict()


@criterion(18, "Determinism across worker counts", 900)
def _determinism(quick, seed, workers=(1, 2, 8)):
    """Runs the quick suite (criteria 1-17) under each worker count and compares the JSON output."""
    outputs = []
    old = os.environ.get(WORKERS_ENV)
    try:
        for w in workers:
            os.environ[WORKERS_ENV] = str(w)
            outputs.append(to_json(run_acceptance(quick=True, only=range(1, 18))))
    finally:
        if old is None:
            os.environ.pop(WORKERS_ENV, None)
        else:
            os.environ[WORKERS_ENV] = old
    same = all(o == outputs[0] for o in outputs)
    return same, {"workers": list(workers), "identical": same}


def run_acceptance(quick: bool = False, only=None, seed: int = BASE_SEED, progress=None) -> list[CriterionResult]:
    """Run the selected criteria in order; ``progress`` receives each result as it completes."""
    numbers = sorted(CRITERIA) if only is None else sorted(int(k) for k in only)
    if quick:
        numbers = [k for k in numbers if k != 18]
    out = []
    for k in numbers:
        if k not in CRITERIA:
            raise ValueError(f"unknown criterion {k}")
        name, budget, fn = CRITERIA[k]
        start = time.perf_counter()
        passed, detail = fn(quick, seed + 1000 * k)
        res = CriterionResult(k, name, bool(passed), _plain(detail), budget, time.perf_counter() - start)
        out.append(res)
        if progress is not None:
            progress(res)
    return out


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    return x


def to_json(results: list[CriterionResult]) -> str:
    return json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True)
