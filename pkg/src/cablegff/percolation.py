"""Clusters, crossing events and crossing-probability estimators on cable level sets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import LatticeDomain, RegionSpec, build_box, distances, region_vertices
from .gff import FieldSample, HeightSchedule, make_sampler
from .mc import Association, Estimate, RunPlan, association_from_blocks, run_replicas

CHUNK = 128


@njit(cache=True)
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit(cache=True)
def _roots(nv, eu, ev, edge_open, vmask, out):
    """Union-find over open edges; ``out[v]`` is the root of ``v`` or -1 if ``v`` is closed."""
    for v in range(nv):
        out[v] = v
    for k in range(eu.size):
        if edge_open[k]:
            a, b = eu[k], ev[k]
            if vmask[a] and vmask[b]:
                ra = _find(out, a)
                rb = _find(out, b)
                if ra != rb:
                    if ra < rb:
                        out[rb] = ra
                    else:
                        out[ra] = rb
    for v in range(nv):
        if vmask[v]:
            out[v] = _find(out, v)
    for v in range(nv):
        if not vmask[v]:
            out[v] = -1


@njit(cache=True)
def _level_set_batch(values, uniforms, h, d, eu, ev, edge_open, roots):
    """Cable level sets and cluster roots for a batch of fields on a (sub)graph."""
    nv = values.shape[1]
    vmask = np.zeros(nv, dtype=np.bool_)
    for s in range(values.shape[0]):
        for v in range(nv):
            vmask[v] = values[s, v] >= h
        for k in range(eu.size):
            x = values[s, eu[k]] - h
            y = values[s, ev[k]] - h
            if x > 0.0 and y > 0.0:
                edge_open[s, k] = uniforms[s, k] < -math.expm1(-x * y / d)
            else:
                edge_open[s, k] = False
        _roots(nv, eu, ev, edge_open[s], vmask, roots[s])


@njit(cache=True)
def _roots_batch(eu, ev, edge_open, vmask, out):
    for s in range(edge_open.shape[0]):
        _roots(vmask.shape[1], eu, ev, edge_open[s], vmask[s], out[s])


@njit(cache=True)
def _any_common(roots, X, Y):
    """Per sample: does some open vertex of X share a root with some open vertex of Y?"""
    out = np.zeros(roots.shape[0], dtype=np.bool_)
    mark = np.zeros(roots.shape[1], dtype=np.int64)
    for s in range(roots.shape[0]):
        stamp = s + 1
        for x in X:
            r = roots[s, x]
            if r >= 0:
                mark[r] = stamp
        for y in Y:
            r = roots[s, y]
            if r >= 0 and mark[r] == stamp:
                out[s] = True
                break
    return out


@njit(cache=True)
def _bfs(indptr, nbr, eid, edge_open, sources, vmask, dist):
    """Multi-source BFS through open edges; ``dist`` = -1 where unreachable."""
    dist[:] = -1
    queue = np.empty(dist.size, dtype=np.int64)
    head = 0
    tail = 0
    for s in sources:
        if vmask[s] and dist[s] < 0:
            dist[s] = 0
            queue[tail] = s
            tail += 1
    while head < tail:
        v = queue[head]
        head += 1
        for p in range(indptr[v], indptr[v + 1]):
            w = nbr[p]
            if dist[w] < 0 and vmask[w] and edge_open[eid[p]]:
                dist[w] = dist[v] + 1
                queue[tail] = w
                tail += 1


@dataclass
class ClusterLabeling:
    """Cluster root per vertex (-1 for closed vertices or vertices outside the restriction)."""

    roots: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(np.unique(self.roots[self.roots >= 0]).size)

    @property
    def sizes(self) -> dict[int, int]:
        r, c = np.unique(self.roots[self.roots >= 0], return_counts=True)
        return dict(zip(r.tolist(), c.tolist()))

    def same_cluster(self, u: int, v: int) -> bool:
        return self.roots[u] >= 0 and self.roots[u] == self.roots[v]


def _zmask(domain: LatticeDomain, restriction: RegionSpec | None) -> np.ndarray:
    mask = np.zeros(domain.n_vertices, dtype=np.bool_)
    if restriction is None:
        mask[:] = True
    else:
        mask[region_vertices(domain, restriction)] = True
    return mask


def label_clusters(sample: FieldSample, restriction: RegionSpec | None = None) -> ClusterLabeling:
    domain = sample.domain
    vmask = sample.vertex_open & _zmask(domain, restriction)
    out = np.empty(domain.n_vertices, dtype=np.int64)
    _roots(domain.n_vertices, domain.edges[:, 0].copy(), domain.edges[:, 1].copy(),
           np.asarray(sample.edge_open, dtype=np.bool_), vmask, out)
    return ClusterLabeling(out)


@dataclass(frozen=True)
class CrossingQuery:
    source: RegionSpec
    target: RegionSpec
    restriction: RegionSpec | None = None
    h: float = 0.0

    def at(self, h: float) -> "CrossingQuery":
        return CrossingQuery(self.source, self.target, self.restriction, h)

    def resolve(self, domain: LatticeDomain):
        X = region_vertices(domain, self.source)
        Y = region_vertices(domain, self.target)
        Z = _zmask(domain, self.restriction)
        if self.restriction is not None and not (Z[X].all() and Z[Y].all()):
            raise ValueError("source and target must lie inside the restriction")
        return X, Y, Z


def crossing_occurs(sample: FieldSample, query: CrossingQuery) -> bool:
    X, Y, Z = query.resolve(sample.domain)
    lab = label_clusters(sample, query.restriction)
    return bool(_any_common(lab.roots[None, :], X, Y)[0])


def chemical_distance(sample: FieldSample, source, target) -> float:
    """Graph distance through open edges between vertex sets (or single vertices)."""
    domain = sample.domain
    src = np.atleast_1d(np.asarray(source, dtype=np.int64))
    dst = np.atleast_1d(np.asarray(target, dtype=np.int64))
    indptr, nbr, eid = domain.csr
    dist = np.empty(domain.n_vertices, dtype=np.int64)
    _bfs(indptr, nbr, eid, np.asarray(sample.edge_open, dtype=np.bool_), src,
         np.asarray(sample.vertex_open, dtype=np.bool_), dist)
    reach = dist[dst]
    reach = reach[reach >= 0]
    return float(reach.min()) if reach.size else math.inf


class LevelSetStream:
    """Chunked field samples and level sets for one replica stream.

    The field is sampled on the whole domain; level sets are built only on the
    subgraph induced by ``restriction`` (all vertices when None), relabelled
    ``0..len(keep)-1``.  Each chunk consumes ``standard_normal`` for the
    fields, then ``random`` for the subgraph's edge uniforms, so a replica's
    output is fixed by its generator alone.  Reusing the uniforms across
    heights gives the monotone coupling.
    """

    def __init__(self, domain: LatticeDomain, sampler=None, restriction: RegionSpec | None = None):
        self.domain = domain
        self.sampler = sampler if sampler is not None else make_sampler(domain)
        zmask = _zmask(domain, restriction)
        self.keep = np.flatnonzero(zmask)
        self.local = np.full(domain.n_vertices, -1, dtype=np.int64)
        self.local[self.keep] = np.arange(self.keep.size)
        e = domain.edges
        self.edge_ids = np.flatnonzero(zmask[e[:, 0]] & zmask[e[:, 1]])
        self.eu = self.local[e[self.edge_ids, 0]]
        self.ev = self.local[e[self.edge_ids, 1]]
        self._src = self.keep < domain.n_interior

    def chunks(self, rng, m: int, chunk: int = CHUNK):
        done = 0
        while done < m:
            b = min(chunk, m - done)
            values = self.sampler.sample(rng, b)
            uniforms = rng.random((b, self.edge_ids.size))
            loc = np.zeros((b, self.keep.size))
            loc[:, self._src] = values[:, self.keep[self._src]]
            yield loc, uniforms
            done += b

    def level_set(self, values, uniforms, h):
        """``(edge_open, roots)`` in local edge/vertex numbering."""
        b = values.shape[0]
        edge_open = np.empty((b, self.edge_ids.size), dtype=np.bool_)
        roots = np.empty((b, self.keep.size), dtype=np.int64)
        _level_set_batch(values, uniforms, float(h), float(self.domain.d), self.eu, self.ev, edge_open, roots)
        return edge_open, roots

    def local_edge(self, u: int, v: int) -> int:
        """Local id of the domain edge ``{u, v}`` (ValueError if absent from the subgraph)."""
        k = self.domain.edge_index.get((min(u, v), max(u, v)))
        if k is None:
            raise ValueError(f"({u}, {v}) is not an edge of the domain")
        pos = int(np.searchsorted(self.edge_ids, k))
        if pos >= self.edge_ids.size or self.edge_ids[pos] != k:
            raise ValueError(f"edge ({u}, {v}) lies outside the restriction")
        return pos

    def csr(self):
        """Local CSR adjacency ``(indptr, neighbour, local edge id)``."""
        n, m = self.keep.size, self.eu.size
        src = np.r_[self.eu, self.ev]
        dst = np.r_[self.ev, self.eu]
        eid = np.r_[np.arange(m), np.arange(m)]
        order = np.argsort(src, kind="stable")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
        return indptr, dst[order], eid[order]


def crossing_counts(domain: LatticeDomain, query: CrossingQuery, heights, plan: RunPlan, sampler=None):
    X, Y, _ = query.resolve(domain)
    stream = LevelSetStream(domain, sampler, query.restriction)
    X, Y = stream.local[X], stream.local[Y]

    def replica(rng, m, _i):
        counts = np.zeros(len(heights), dtype=np.int64)
        for values, uniforms in stream.chunks(rng, m):
            for j, h in enumerate(heights):
                _, roots = stream.level_set(values, uniforms, h)
                counts[j] += _any_common(roots, X, Y).sum()
        return counts

    return sum(run_replicas(plan, replica))


def estimate_crossing(domain: LatticeDomain, query: CrossingQuery, reps: int, seed: int,
                      sampler=None) -> Estimate:
    """Fraction of independent samples on which the crossing occurs (Wilson interval)."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    plan = RunPlan.for_total(reps, seed)
    k = crossing_counts(domain, query, [query.h], plan, sampler)[0]
    return Estimate.from_counts(k, plan.total, seed=seed, label="crossing")


def estimate_crossing_at_heights(domain: LatticeDomain, query: CrossingQuery, schedule, reps: int,
                                 seed: int, coupled: bool = True, sampler=None) -> list[Estimate]:
    """One estimate per height; with ``coupled`` all heights share fields and uniforms."""
    heights = list(schedule.heights if isinstance(schedule, HeightSchedule) else schedule)
    if not heights:
        raise ValueError("schedule must be nonempty")
    plan = RunPlan.for_total(reps, seed)
    if coupled:
        ks = crossing_counts(domain, query, heights, plan, sampler)
    else:
        ks = [crossing_counts(domain, query, [h], RunPlan.for_total(reps, seed + 7919 * (j + 1)), sampler)[0]
              for j, h in enumerate(heights)]
    return [Estimate.from_counts(k, plan.total, seed=seed, label="crossing") for k in ks]


def crossing_association(domain: LatticeDomain, qa: CrossingQuery, qb: CrossingQuery, reps: int, seed: int,
                         sampler=None) -> Association:
    """Positive-association check for two crossing events on the same level set.

    Both queries must share the height and the restriction region.
    """
    if qa.h != qb.h or qa.restriction != qb.restriction:
        raise ValueError("queries must share height and restriction")
    Xa, Ya, _ = qa.resolve(domain)
    Xb, Yb, _ = qb.resolve(domain)
    stream = LevelSetStream(domain, sampler, qa.restriction)
    Xa, Ya, Xb, Yb = (stream.local[v] for v in (Xa, Ya, Xb, Yb))
    plan = RunPlan.for_total(reps, seed)

    def replica(rng, m, _i):
        a, b = [], []
        for values, uniforms in stream.chunks(rng, m):
            _, roots = stream.level_set(values, uniforms, qa.h)
            a.append(_any_common(roots, Xa, Ya))
            b.append(_any_common(roots, Xb, Yb))
        return np.concatenate(a), np.concatenate(b)

    parts = run_replicas(plan, replica)
    a = np.concatenate([p[0] for p in parts])
    b = np.concatenate([p[1] for p in parts])
    return association_from_blocks(a, b, a & b)


def origin_to_sphere(domain: LatticeDomain, N: int, h: float = 0.0) -> CrossingQuery:
    """The query ``0 <-> dV_N`` restricted to the ball of radius N (no loss: paths stop at the sphere)."""
    center = (0,) * domain.dim
    return CrossingQuery(RegionSpec.box(center, 0), RegionSpec.sphere(center, N), RegionSpec.box(center, N), h)


def loglog_slope(Ns, ps) -> tuple[float, float]:
    """Least-squares slope and intercept of log p against log N."""
    x = np.log(np.asarray(Ns, dtype=float))
    y = np.log(np.asarray(ps, dtype=float))
    slope, icpt = np.polyfit(x, y, 1)
    return float(slope), float(icpt)


def crossing_scaling(d: int, Ns, h: float, reps: int, seed: int, enclosure: float = 1.5) -> list[dict]:
    """``p_{N,h} = P[0 <-> dV_N]`` with the field sampled on the box of half-width ``ceil(enclosure N)``.

    ``enclosure = 1`` puts the Dirichlet layer right outside the target sphere;
    larger values approximate the infinite-volume field.
    """
    if enclosure < 1:
        raise ValueError("enclosure must be >= 1")
    rows = []
    for j, N in enumerate(Ns):
        dom = build_box(d, math.ceil(enclosure * N))
        est = estimate_crossing(dom, origin_to_sphere(dom, N, h), reps, seed + j)
        rows.append({"N": N, "estimate": est})
    return rows


@dataclass
class ChemicalScan:
    acceptance: Estimate
    thresholds: list[float]
    conditional: list[Estimate]
    flagged: bool


def conditional_chemical_scan(domain: LatticeDomain, alpha: float, beta: float, gamma: float, h: float,
                              reps: int, seed: int, C_grid=(0.0, 0.25, 0.5, 1.0, 2.0)) -> ChemicalScan:
    """``P[D(V_aN, dV_bN) > C N (log N)^(1/4) | V_aN <-> dV_gN]`` for every C in the grid."""
    if not 0 < alpha < beta < gamma < 1:
        raise ValueError("need 0 < alpha < beta < gamma < 1")
    N = int(domain.descriptor.get("n", 0))
    if N < 2:
        raise ValueError("conditional chemical scan needs a box domain with n >= 2")
    center = (0,) * domain.dim
    inner = region_vertices(domain, RegionSpec.box(center, int(alpha * N)))
    mid = region_vertices(domain, RegionSpec.sphere(center, int(beta * N)))
    outer = region_vertices(domain, RegionSpec.sphere(center, int(gamma * N)))
    scale = N * math.log(N) ** 0.25
    thresholds = [C * scale for C in C_grid]
    stream = LevelSetStream(domain, restriction=RegionSpec.box(center, int(gamma * N)))
    inner, mid, outer = stream.local[inner], stream.local[mid], stream.local[outer]
    indptr, nbr, eid = stream.csr()
    plan = RunPlan.for_total(reps, seed)

    def replica(rng, m, _i):
        acc = 0
        exceed = np.zeros(len(thresholds), dtype=np.int64)
        dist = np.empty(stream.keep.size, dtype=np.int64)
        for values, uniforms in stream.chunks(rng, m):
            edge_open, roots = stream.level_set(values, uniforms, h)
            ok = _any_common(roots, inner, outer)
            for s in np.flatnonzero(ok):
                acc += 1
                _bfs(indptr, nbr, eid, edge_open[s], inner, roots[s] >= 0, dist)
                reach = dist[mid]
                reach = reach[reach >= 0]
                D = reach.min() if reach.size else math.inf
                exceed += np.array([D > t for t in thresholds])
        return np.r_[acc, exceed]

    tot = sum(run_replicas(plan, replica))
    acc = int(tot[0])
    accept = Estimate.from_counts(acc, plan.total, seed=seed, label="chem-accept")
    cond = [Estimate.from_counts(int(k), acc, seed=seed, label="chem-cond") for k in tot[1:]]
    return ChemicalScan(accept, thresholds, cond, acc == 0)


def metric_distance(domain: LatticeDomain, u: int, v: int) -> int:
    return int(distances(domain.coords[[v]], domain.coords[u], "ell-one")[0])
