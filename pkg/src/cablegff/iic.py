"""Conditional (IIC-type) estimators and the quasi-multiplicativity harness.

Infinite clusters are replaced by clusters that reach a finite radius; every
table records that radius so the proxy is visible in the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import LatticeDomain, RegionSpec, build_slab, distances, max_radius, origin, region_vertices
from .gff import make_sampler
from .mc import Estimate, RunPlan, run_replicas
from .percolation import LevelSetStream, _any_common, _roots_batch


@dataclass
class Batch:
    """Level sets of one chunk of fields at one height, in stream-local numbering."""

    values: np.ndarray
    edge_open: np.ndarray
    roots: np.ndarray
    h: float


def cluster_reach(roots: np.ndarray, o: int, rho: np.ndarray) -> np.ndarray:
    """Largest ``rho`` over the cluster of local vertex ``o`` (-1 when ``o`` is closed)."""
    r0 = roots[:, o]
    reach = np.where(roots == r0[:, None], rho[None, :], -1).max(axis=1)
    reach[r0 < 0] = -1
    return reach


@dataclass(frozen=True)
class CylinderEvent:
    """Event depending on finitely many vertices and edges (coordinates, not indices)."""

    kind: str
    vertices: tuple = ()
    flags: tuple = ()
    k: int = 0
    radius: int = 0

    KINDS = ("always", "vertex-open", "edge-open", "pattern", "degree-at-least", "connects")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        object.__setattr__(self, "vertices", tuple(tuple(int(c) for c in v) for v in self.vertices))

    @classmethod
    def always(cls):
        return cls("always")

    @classmethod
    def vertex_open(cls, v):
        return cls("vertex-open", (v,))

    @classmethod
    def edge_open(cls, u, v):
        return cls("edge-open", (u, v))

    @classmethod
    def pattern(cls, items):
        """``items``: iterable of ``(vertex, is_open)``."""
        items = list(items)
        return cls("pattern", tuple(v for v, _ in items), tuple(bool(f) for _, f in items))

    @classmethod
    def degree_at_least(cls, v, k: int):
        return cls("degree-at-least", (v,), k=k)

    @classmethod
    def connects(cls, v, radius: int):
        """The (non-cylinder) event that the cluster of ``v`` reaches distance ``radius``."""
        return cls("connects", (v,), radius=radius)

    @property
    def support(self) -> tuple:
        return self.vertices

    def describe(self) -> dict:
        return {"kind": self.kind, "vertices": [list(v) for v in self.vertices],
                "flags": list(self.flags), "k": self.k, "radius": self.radius}

    def bind(self, stream: LevelSetStream):
        """Vectorised evaluator ``Batch -> bool array`` on ``stream``'s subgraph."""
        dom = stream.domain
        loc = [int(stream.local[dom.vertex(v)]) for v in self.vertices]
        if any(i < 0 for i in loc):
            raise ValueError("event support lies outside the sampled region")
        if self.kind == "always":
            return lambda b: np.ones(b.values.shape[0], dtype=bool)
        if self.kind == "vertex-open":
            i = loc[0]
            return lambda b: b.values[:, i] >= b.h
        if self.kind == "edge-open":
            e = stream.local_edge(dom.vertex(self.vertices[0]), dom.vertex(self.vertices[1]))
            return lambda b: b.edge_open[:, e].copy()
        if self.kind == "pattern":
            want = {}
            for i, f in zip(loc, self.flags):
                if want.setdefault(i, f) != f:
                    return lambda b: np.zeros(b.values.shape[0], dtype=bool)
            idx = np.array(list(want), dtype=np.int64)
            flags = np.array(list(want.values()), dtype=bool)
            return lambda b: ((b.values[:, idx] >= b.h) == flags).all(axis=1)
        if self.kind == "degree-at-least":
            v = loc[0]
            inc = np.flatnonzero((stream.eu == v) | (stream.ev == v))
            return lambda b: b.edge_open[:, inc].sum(axis=1) >= self.k
        rho = distances(dom.coords[stream.keep], self.vertices[0], dom.metric)
        o = loc[0]
        return lambda b: cluster_reach(b.roots, o, rho) >= self.radius


@dataclass(frozen=True)
class Conditioning:
    """``center <-> dB(center, radius)`` at the sampled height.

    ``proxy`` is "crossing" for a finite target radius and "reach-R_max" when
    the radius stands in for an infinite cluster.
    """

    radius: int
    center: tuple = ()
    proxy: str = "crossing"

    def describe(self) -> dict:
        return {"radius": self.radius, "center": list(self.center), "proxy": self.proxy}


@dataclass
class ConditionalEstimate:
    event: CylinderEvent
    conditioning: Conditioning
    h: float
    estimate: Estimate
    acceptance: Estimate

    @property
    def flagged(self) -> bool:
        return self.estimate.n == 0

    def row(self) -> dict:
        return {"h": self.h, "radius": self.conditioning.radius, "proxy": self.conditioning.proxy,
                "p_hat": self.estimate.value, "stderr": self.estimate.stderr, "ci_lo": self.estimate.lo,
                "ci_hi": self.estimate.hi, "accepted": self.estimate.n,
                "acceptance_rate": self.acceptance.value, "flagged": self.flagged}


def _support_radius(domain, center, event: CylinderEvent) -> int:
    if not event.vertices:
        return 0
    rho = distances(np.array(event.vertices), center, domain.metric)
    r = int(rho.max()) + 1
    return max(r, event.radius) if event.kind == "connects" else r


def _conditional_counts(domain: LatticeDomain, center, radii, heights, event: CylinderEvent, reps: int,
                        seed: int, sampler=None):
    """Counts ``[h, radius, (accepted, accepted and event)]`` on shared samples."""
    R = max(max(radii), _support_radius(domain, center, event))
    stream = LevelSetStream(domain, sampler, RegionSpec.box(center, R))
    rho = distances(domain.coords[stream.keep], center, domain.metric)
    o = int(stream.local[domain.vertex(center)])
    ev = event.bind(stream)
    plan = RunPlan.for_total(reps, seed)
    radii = np.asarray(radii)

    def replica(rng, m, _i):
        counts = np.zeros((len(heights), radii.size, 2), dtype=np.int64)
        for values, uniforms in stream.chunks(rng, m):
            for j, h in enumerate(heights):
                edge_open, roots = stream.level_set(values, uniforms, h)
                reach = cluster_reach(roots, o, rho)
                hit = ev(Batch(values, edge_open, roots, h))
                acc = reach[:, None] >= radii[None, :]
                counts[j, :, 0] += acc.sum(axis=0)
                counts[j, :, 1] += (acc & hit[:, None]).sum(axis=0)
        return counts

    return sum(run_replicas(plan, replica)), plan.total


def _pack(event, cond, h, acc, hit, total, seed) -> ConditionalEstimate:
    return ConditionalEstimate(event, cond, float(h),
                               Estimate.from_counts(hit, acc, seed=seed, label="conditional"),
                               Estimate.from_counts(acc, total, seed=seed, label="acceptance"))


def estimate_conditional(domain: LatticeDomain, event: CylinderEvent, conditioning: Conditioning, reps: int,
                         seed: int, h: float = 0.0, sampler=None) -> ConditionalEstimate:
    """Rejection estimate of ``P_h[event | center <-> dB(center, radius)]``."""
    center = tuple(conditioning.center) or origin(domain)
    counts, total = _conditional_counts(domain, center, [conditioning.radius], [h], event, reps, seed, sampler)
    return _pack(event, conditioning, h, counts[0, 0, 0], counts[0, 0, 1], total, seed)


@dataclass
class ScanTable:
    rows: list[ConditionalEstimate]
    key: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def terminal(self) -> ConditionalEstimate:
        return self.rows[-1]

    def to_dict(self) -> dict:
        first = self.rows[0]
        return {"event": first.event.describe(), "conditioning": first.conditioning.describe(),
                "key": self.key, "rows": [r.row() for r in self.rows], "diagnostics": self.diagnostics,
                "seed": first.estimate.seed}


def _combined_sigma(a: Estimate, b: Estimate) -> float:
    return math.sqrt(a.stderr ** 2 + b.stderr ** 2)


def iic_convergence_scan(domain: LatticeDomain, radii, event: CylinderEvent, reps: int, seed: int,
                         h: float = 0.0, center=None) -> ScanTable:
    """``P_h[event | center <-> dB_n]`` for increasing ``n`` on shared samples."""
    radii = [int(n) for n in radii]
    if not radii or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be a nonempty increasing sequence")
    center = tuple(center) if center is not None else origin(domain)
    if radii[-1] > max_radius(domain, center):
        raise ValueError("largest radius must fit inside the domain")
    counts, total = _conditional_counts(domain, center, radii, [h], event, reps, seed)
    rows = [_pack(event, Conditioning(n, center), h, counts[0, j, 0], counts[0, j, 1], total, seed)
            for j, n in enumerate(radii)]
    diffs = [abs(b.estimate.value - a.estimate.value) for a, b in zip(rows, rows[1:])]
    sig = [_combined_sigma(a.estimate, b.estimate) for a, b in zip(rows, rows[1:])]
    diag = {"differences": diffs, "combined_sigma": sig,
            "settled": bool(diffs and diffs[-1] <= 3 * sig[-1])}
    return ScanTable(rows, "radius", diag)


def iic_height_scan(domain: LatticeDomain, event: CylinderEvent, schedule, reps: int, seed: int,
                    R_max: int | None = None, center=None) -> ScanTable:
    """``P_h[event | cluster of center reaches R_max]`` along a decreasing height schedule."""
    heights = [float(h) for h in schedule]
    if not heights or any(b >= a for a, b in zip(heights, heights[1:])):
        raise ValueError("schedule must be strictly decreasing")
    center = tuple(center) if center is not None else origin(domain)
    R_max = max_radius(domain, center) if R_max is None else int(R_max)
    counts, total = _conditional_counts(domain, center, [R_max], heights, event, reps, seed)
    cond = Conditioning(R_max, center, "reach-R_max")
    rows = [_pack(event, cond, h, counts[j, 0, 0], counts[j, 0, 1], total, seed) for j, h in enumerate(heights)]
    return ScanTable(rows, "h", {"R_max": R_max})


def compare_terminals(a: ScanTable, b: ScanTable, nsigma: float = 3.0) -> dict:
    """Terminal-value agreement of two scans estimated on independent samples."""
    ea, eb = a.terminal.estimate, b.terminal.estimate
    diff = abs(ea.value - eb.value)
    sig = _combined_sigma(ea, eb)
    ok = ea.defined and eb.defined and diff <= nsigma * sig
    return {"a": ea.value, "b": eb.value, "difference": diff, "combined_sigma": sig, "pass": bool(ok)}


def opposite_faces(domain: LatticeDomain, center, r_in: int, r_out: int) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Pairs of opposite faces ``{x_j - c_j >= r_in}`` and ``{x_j - c_j <= -r_in}`` of the annulus."""
    A = region_vertices(domain, RegionSpec.annulus(center, r_in, r_out))
    rel = domain.coords[A] - np.asarray(center)
    out = []
    for j in range(domain.dim):
        plus, minus = A[rel[:, j] >= r_in], A[rel[:, j] <= -r_in]
        if plus.size and minus.size:
            out.append((f"axis{j}", plus, minus))
    return out


@dataclass
class EpsilonReport:
    heights: list[float]
    family: list[str]
    table: list[list[Estimate]]
    acceptance: list[Estimate]

    @property
    def flagged(self) -> bool:
        return any(a.successes == 0 for a in self.acceptance)

    @property
    def sup(self) -> Estimate:
        cells = [e for row in self.table for e in row if e.defined]
        if not cells:
            return Estimate.empty("epsilon")
        return max(cells, key=lambda e: e.value)

    def to_dict(self) -> dict:
        s = self.sup
        return {"heights": self.heights, "family": self.family, "epsilon": s.as_row(), "flagged": self.flagged,
                "table": [[e.as_row() for e in row] for row in self.table],
                "acceptance": [a.as_row() for a in self.acceptance]}


def epsilon_i_estimate(domain: LatticeDomain, r_in: int, r_out: int, h0: float, reps: int, seed: int,
                       n_heights: int = 5, family=None, center=None) -> EpsilonReport:
    """Sup over a height grid in ``[0, h0]`` and a face family of
    ``P_h[{F1 <->_A F2}^c | dB(r_in) <-> dB(r_out)]`` with ``A`` the annulus between the spheres.

    A nonpositive ``h0`` gives the single height ``h0``.
    """
    center = tuple(center) if center is not None else origin(domain)
    if not 0 < r_in < r_out <= max_radius(domain, center):
        raise ValueError("need 0 < r_in < r_out inside the domain")
    heights = [float(h) for h in np.linspace(0.0, h0, n_heights)] if h0 > 0 else [float(h0)]
    stream = LevelSetStream(domain, restriction=RegionSpec.box(center, r_out))
    L = stream.local
    inner = L[region_vertices(domain, RegionSpec.sphere(center, r_in))]
    outer = L[region_vertices(domain, RegionSpec.sphere(center, r_out))]
    ann = np.zeros(stream.keep.size, dtype=bool)
    ann[L[region_vertices(domain, RegionSpec.annulus(center, r_in, r_out))]] = True
    if family is None:
        family = opposite_faces(domain, center, r_in, r_out)
    else:
        family = [(name, np.array([domain.vertex(v) for v in F1]), np.array([domain.vertex(v) for v in F2]))
                  for name, F1, F2 in family]
    pairs = [(name, L[F1], L[F2]) for name, F1, F2 in family]
    if any((F1 < 0).any() or (F2 < 0).any() or not ann[F1].all() or not ann[F2].all() for _, F1, F2 in pairs):
        raise ValueError("family sets must lie in the annulus")
    plan = RunPlan.for_total(reps, seed)

    def replica(rng, m, _i):
        counts = np.zeros((len(heights), 1 + len(pairs)), dtype=np.int64)
        aroots = None
        for values, uniforms in stream.chunks(rng, m):
            for j, h in enumerate(heights):
                edge_open, roots = stream.level_set(values, uniforms, h)
                cond = _any_common(roots, inner, outer)
                vm = (roots >= 0) & ann[None, :]
                if aroots is None or aroots.shape != roots.shape:
                    aroots = np.empty_like(roots)
                _roots_batch(stream.eu, stream.ev, edge_open, vm, aroots)
                counts[j, 0] += cond.sum()
                for p, (_, F1, F2) in enumerate(pairs):
                    counts[j, 1 + p] += (cond & ~_any_common(aroots, F1, F2)).sum()
        return counts

    c = sum(run_replicas(plan, replica))
    acc = [Estimate.from_counts(c[j, 0], plan.total, seed=seed, label="acceptance") for j in range(len(heights))]
    table = [[Estimate.from_counts(c[j, 1 + p], c[j, 0], seed=seed, label="epsilon") for p in range(len(pairs))]
             for j in range(len(heights))]
    return EpsilonReport(heights, [name for name, _, _ in pairs], table, acc)


@dataclass
class QMRatio:
    """``P[X <-> Y] / (P[X <-> dB_r] P[Y <-> dB_r])`` within the restriction, with a delta-method interval."""

    value: float
    stderr: float
    lo: float
    hi: float
    numerator: Estimate
    left: Estimate
    right: Estimate
    violations: int
    flagged: bool
    h: float = 0.0
    label: str = ""

    def row(self) -> dict:
        return {"preset": self.label, "h": self.h, "C_hat": self.value, "stderr": self.stderr, "ci_lo": self.lo,
                "ci_hi": self.hi, "p_xy": self.numerator.value, "p_xr": self.left.value,
                "p_yr": self.right.value, "violations": self.violations, "flagged": self.flagged}


def _ratio_from_sums(S: np.ndarray, n: int, h: float, label: str, seed) -> QMRatio:
    """Delta method for ``a / (b c)`` from sums of the indicators and their products."""
    m = S[:3] / n
    P = S[3:12].reshape(3, 3) / n
    cov = (P - np.outer(m, m)) * n / max(n - 1, 1)
    ests = [Estimate.from_counts(int(S[k]), n, seed=seed, label="qm") for k in range(3)]
    viol = int(S[12])
    a, b, c = m
    if b == 0 or c == 0:
        nan = float("nan")
        return QMRatio(nan, nan, nan, nan, *ests, viol, True, h, label)
    r = a / (b * c)
    g = np.array([1 / (b * c), -a / (b * b * c), -a / (b * c * c)])
    se = math.sqrt(max(g @ cov @ g, 0.0) / n)
    flagged = bool(ests[1].lo <= 0 or ests[2].lo <= 0)
    return QMRatio(float(r), se, float(r - 1.96 * se), float(r + 1.96 * se), *ests, viol, flagged, h, label)


def qm_ratio(domain: LatticeDomain, X, Y, Z: RegionSpec | None, center, r: int, h, reps: int, seed: int,
             label: str = "") -> QMRatio | list[QMRatio]:
    """Quasi-multiplicativity ratio; a sequence ``h`` gives one ratio per height on shared samples.

    ``X`` must lie inside ``B(center, r - 1)`` and ``Y`` outside ``B(center, r)``,
    so the numerator event implies both denominator events on every sample;
    ``violations`` counts samples where that inclusion fails.
    """
    heights = [float(x) for x in np.atleast_1d(h)]
    center = tuple(center)
    X = np.asarray([domain.vertex(v) for v in X] if not isinstance(X, np.ndarray) else X, dtype=np.int64)
    Y = np.asarray([domain.vertex(v) for v in Y] if not isinstance(Y, np.ndarray) else Y, dtype=np.int64)
    rho = distances(domain.coords, center, domain.metric)
    if not (rho[X] < r).all() or not (rho[Y] > r).all():
        raise ValueError("X must lie inside B(center, r - 1) and Y outside B(center, r)")
    S_r = region_vertices(domain, RegionSpec.sphere(center, r))
    stream = LevelSetStream(domain, make_sampler(domain), Z)
    L = stream.local
    lX, lY, lS = L[X], L[Y], L[S_r]
    if (lX < 0).any() or (lY < 0).any():
        raise ValueError("X and Y must lie in the restriction")
    lS = lS[lS >= 0]
    plan = RunPlan.for_total(reps, seed)

    def replica(rng, m, _i):
        S = np.zeros((len(heights), 13), dtype=np.int64)
        for values, uniforms in stream.chunks(rng, m):
            for j, hh in enumerate(heights):
                _, roots = stream.level_set(values, uniforms, hh)
                ind = np.stack([_any_common(roots, lX, lY), _any_common(roots, lX, lS),
                                _any_common(roots, lY, lS)]).astype(np.int64)
                S[j, :3] += ind.sum(axis=1)
                S[j, 3:12] += (ind @ ind.T).ravel()
                S[j, 12] += (ind[0] > np.minimum(ind[1], ind[2])).sum()
        return S

    S = sum(run_replicas(plan, replica))
    out = [_ratio_from_sums(S[j], plan.total, heights[j], label, seed) for j in range(len(heights))]
    return out if np.ndim(h) else out[0]


QM_HEIGHTS = (0.0, 0.05, 0.1, 0.2)


def qm_presets(k: int = 2, L: int = 8) -> dict[str, dict]:
    """Three geometries on the slab ``Z x {0..k}`` (d = 3 normalisation) centred mid-slab."""
    dom = build_slab(k, L, 3)
    c = (0, k // 2)
    ball = lambda n: [tuple(x) for x in dom.coords[region_vertices(dom, RegionSpec.box(c, n))]]  # noqa: E731
    sphere = lambda n: [tuple(x) for x in dom.coords[region_vertices(dom, RegionSpec.sphere(c, n))]]  # noqa: E731
    return {
        "point-to-sphere": dict(domain=dom, X=[c], Y=sphere(4), Z=None, center=c, r=2),
        "ball-to-sphere": dict(domain=dom, X=ball(1), Y=sphere(5), Z=RegionSpec.box(c, 6), center=c, r=3),
        "point-to-far": dict(domain=dom, X=[c], Y=sphere(6), Z=RegionSpec.box(c, 6), center=c, r=3),
    }


def qm_scan(reps: int, seed: int, heights=QM_HEIGHTS, presets: dict | None = None) -> list[QMRatio]:
    presets = qm_presets() if presets is None else presets
    out = []
    for j, (name, p) in enumerate(sorted(presets.items())):
        out.extend(qm_ratio(p["domain"], p["X"], p["Y"], p["Z"], p["center"], p["r"], list(heights), reps,
                            seed + j, label=name))
    return out
