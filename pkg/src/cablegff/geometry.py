"""Finite lattice domains carved from Z^d or from a slab, with a Dirichlet layer."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

LINF = "ell-infinity"
L1 = "ell-one"
_METRIC_ALIASES = {"ell-infinity": LINF, "linf": LINF, "inf": LINF, "ell-one": L1, "l1": L1, "graph": L1}


def canonical_metric(metric: str) -> str:
    try:
        return _METRIC_ALIASES[metric.lower()]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}") from None


def _unit_vectors(dim: int) -> np.ndarray:
    eye = np.eye(dim, dtype=np.int64)
    return np.concatenate([eye, -eye])


def distances(coords: np.ndarray, center, metric: str) -> np.ndarray:
    diff = np.abs(np.asarray(coords) - np.asarray(center))
    return diff.max(axis=1) if canonical_metric(metric) == LINF else diff.sum(axis=1)


@dataclass(frozen=True, eq=False)
class LatticeDomain:
    """Interior vertices (first ``n_interior`` rows of ``coords``) plus a boundary layer.

    ``d`` fixes the walk normalisation (transition weight 1/(2d) per edge);
    ``coords`` may have fewer columns than ``d`` for slabs.  Edges are stored
    as index pairs ``(i, j)`` with ``i < j``, so an interior endpoint always
    comes first on interior-boundary edges.
    """

    d: int
    coords: np.ndarray
    n_interior: int
    edges: np.ndarray
    metric: str
    descriptor: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.coords.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def interior(self) -> np.ndarray:
        return np.arange(self.n_interior)

    @property
    def boundary(self) -> np.ndarray:
        return np.arange(self.n_interior, self.n_vertices)

    @cached_property
    def index(self) -> dict[tuple, int]:
        return {tuple(int(c) for c in row): i for i, row in enumerate(self.coords)}

    def vertex(self, coord) -> int:
        try:
            return self.index[tuple(int(c) for c in coord)]
        except KeyError:
            raise ValueError(f"vertex {tuple(coord)} not in domain") from None

    @cached_property
    def edge_set(self) -> frozenset:
        return frozenset(map(tuple, self.edges.tolist()))

    @cached_property
    def edge_index(self) -> dict[tuple, int]:
        return {e: k for k, e in enumerate(map(tuple, self.edges.tolist()))}

    @cached_property
    def degree(self) -> np.ndarray:
        """Number of lattice neighbours (interior or boundary) of every vertex."""
        return np.bincount(self.edges.ravel(), minlength=self.n_vertices)

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(n_vertices, 2*dim) neighbour table, -1 where the lattice neighbour is absent."""
        out = np.full((self.n_vertices, 2 * self.dim), -1, dtype=np.int64)
        for k, e in enumerate(_unit_vectors(self.dim)):
            for i, c in enumerate(self.coords):
                out[i, k] = self.index.get(tuple(int(x) for x in c + e), -1)
        return out

    @cached_property
    def csr(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR adjacency ``(indptr, neighbour, edge id)`` over all vertices."""
        e = self.edges
        m = len(e)
        src = np.r_[e[:, 0], e[:, 1]]
        dst = np.r_[e[:, 1], e[:, 0]]
        eid = np.r_[np.arange(m), np.arange(m)]
        order = np.argsort(src, kind="stable")
        indptr = np.zeros(self.n_vertices + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=self.n_vertices), out=indptr[1:])
        return indptr, dst[order].astype(np.int64), eid[order].astype(np.int64)

    @cached_property
    def is_full_box(self) -> bool:
        """True for an ell-infinity box in Z^d (spectral sampling applies)."""
        return self.descriptor.get("kind") == "box" and self.metric == LINF

    def to_json(self) -> str:
        return json.dumps(self.descriptor, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "LatticeDomain":
        return from_descriptor(json.loads(text) if isinstance(text, str) else text)

    def __repr__(self):
        return f"LatticeDomain({self.descriptor}, interior={self.n_interior}, edges={self.n_edges})"


def _assemble(d, interior, neighbor_filter, metric, descriptor) -> LatticeDomain:
    """Attach the boundary layer and edge list to an interior coordinate list.

    ``neighbor_filter(coord)`` decides whether a lattice neighbour outside the
    interior exists at all (False models a free face).
    """
    interior = [tuple(int(x) for x in c) for c in interior]
    inside = set(interior)
    if len(inside) != len(interior):
        raise ValueError("duplicate interior vertices")
    dim = len(interior[0])
    units = [tuple(int(x) for x in e) for e in _unit_vectors(dim)]
    boundary = set()
    for c in interior:
        for e in units:
            nb = tuple(a + b for a, b in zip(c, e))
            if nb not in inside and neighbor_filter(nb):
                boundary.add(nb)
    coords = np.array(interior + sorted(boundary), dtype=np.int64)
    index = {tuple(int(x) for x in row): i for i, row in enumerate(coords)}
    edges = set()
    for i, c in enumerate(interior):
        for e in units:
            j = index.get(tuple(a + b for a, b in zip(c, e)))
            if j is not None:
                edges.add((min(i, j), max(i, j)))
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return LatticeDomain(d, coords, len(interior), edges, metric, descriptor)


def build_box(d: int, n: int, metric: str = LINF) -> LatticeDomain:
    """Ball of radius ``n`` about the origin in Z^d with its Dirichlet layer."""
    if d < 2:
        raise ValueError("d must be >= 2")
    if n < 1:
        raise ValueError("n must be >= 1")
    metric = canonical_metric(metric)
    pts = itertools.product(range(-n, n + 1), repeat=d)
    if metric == L1:
        pts = (p for p in pts if sum(abs(x) for x in p) <= n)
    return _assemble(d, list(pts), lambda c: True, metric, {"kind": "box", "d": d, "n": n, "metric": metric})


def build_grid(shape, d: int | None = None) -> LatticeDomain:
    """Rectangular interior ``[0, s_1) x ... x [0, s_k)`` with Dirichlet layer."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2 or min(shape) < 1:
        raise ValueError("grid needs >= 2 axes of positive length")
    d = len(shape) if d is None else d
    pts = list(itertools.product(*(range(s) for s in shape)))
    return _assemble(d, pts, lambda c: True, LINF, {"kind": "grid", "shape": list(shape), "d": d})


def build_slab(k: int, L: int, d: int = 3) -> LatticeDomain:
    """Truncated slab Z x {0..k}^(d-2), longitudinal coordinate in [-L, L].

    The transverse faces are free; only the two longitudinal ends carry
    Dirichlet vertices.  Distances use the graph (ell-one) metric.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if k < 0:
        raise ValueError("k must be >= 0")
    if d < 2:
        raise ValueError("d must be >= 2")
    trans = d - 2
    pts = [(x, *t) for x in range(-L, L + 1) for t in itertools.product(range(k + 1), repeat=trans)]
    if trans == 0:
        pts = [(x, 0) for x in range(-L, L + 1)]
        keep = lambda c: c[1] == 0  # noqa: E731
    else:
        keep = lambda c: all(0 <= t <= k for t in c[1:])  # noqa: E731
    return _assemble(d, pts, keep, L1, {"kind": "slab", "k": k, "L": L, "d": d})


def build_from_vertices(d: int, coords, metric: str = L1) -> LatticeDomain:
    """Arbitrary finite interior in Z^d; every missing lattice neighbour is Dirichlet."""
    coords = [tuple(int(x) for x in c) for c in coords]
    if not coords:
        raise ValueError("need at least one interior vertex")
    return _assemble(d, coords, lambda c: True, canonical_metric(metric),
                     {"kind": "explicit", "d": d, "vertices": [list(c) for c in coords],
                      "metric": canonical_metric(metric)})


def from_descriptor(desc: dict) -> LatticeDomain:
    kind = desc.get("kind", "box" if "n" in desc else "slab")
    if kind == "box":
        return build_box(int(desc["d"]), int(desc["n"]), desc.get("metric", LINF))
    if kind == "slab":
        return build_slab(int(desc["k"]), int(desc["L"]), int(desc.get("d", 3)))
    if kind == "grid":
        return build_grid(desc["shape"], desc.get("d"))
    if kind == "explicit":
        return build_from_vertices(int(desc["d"]), desc["vertices"], desc.get("metric", L1))
    raise ValueError(f"unknown domain kind {kind!r}")


@dataclass(frozen=True)
class RegionSpec:
    tag: str  # box | boundary | annulus | explicit
    center: tuple = ()
    m: int = 0
    n: int = 0
    vertices: tuple = ()

    def __post_init__(self):
        if self.tag not in ("box", "boundary", "annulus", "explicit"):
            raise ValueError(f"unknown region tag {self.tag!r}")
        if self.m < 0 or self.n < 0:
            raise ValueError("radii must be nonnegative")
        if self.tag == "annulus" and self.m > self.n:
            raise ValueError("annulus needs m <= n")

    @classmethod
    def box(cls, center, n):
        return cls("box", tuple(center), 0, n)

    @classmethod
    def sphere(cls, center, n):
        return cls("boundary", tuple(center), 0, n)

    @classmethod
    def annulus(cls, center, m, n):
        return cls("annulus", tuple(center), m, n)

    @classmethod
    def explicit(cls, vertices):
        return cls("explicit", vertices=tuple(tuple(v) for v in vertices))


def region_vertices(domain: LatticeDomain, spec: RegionSpec) -> np.ndarray:
    """Sorted indices of domain vertices (interior and boundary layer) in the region.

    Annuli are set differences ``B(v, n) minus B(v, m - 1)``.
    """
    if spec.tag == "explicit":
        return np.array(sorted(domain.vertex(v) for v in spec.vertices), dtype=np.int64)
    center = tuple(spec.center) if spec.center else (0,) * domain.dim
    domain.vertex(center)
    rho = distances(domain.coords, center, domain.metric)
    if spec.tag == "box":
        mask = rho <= spec.n
    elif spec.tag == "boundary":
        mask = rho == spec.n
    else:
        mask = (rho >= spec.m) & (rho <= spec.n)
    return np.flatnonzero(mask)


def origin(domain: LatticeDomain) -> tuple:
    if domain.descriptor.get("kind") == "grid":
        return tuple(s // 2 for s in domain.descriptor["shape"])
    return (0,) * domain.dim


def max_radius(domain: LatticeDomain, center=None) -> int:
    """Largest radius whose sphere about ``center`` stays in the interior."""
    center = origin(domain) if center is None else tuple(center)
    bd = domain.coords[domain.n_interior:]
    if bd.shape[0] == 0:
        return 0
    return int(distances(bd, center, domain.metric).min()) - 1
