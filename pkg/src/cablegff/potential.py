"""Exact discrete potential theory on a :class:`LatticeDomain`.

Normalisation: the walk moves along each edge with weight 1/(2d), so on a
box (every interior vertex of degree 2d) ``G = (I - Q)^{-1}`` counts expected
visits of the walk killed on the Dirichlet layer.  In general
``G = 2d (D - A)^{-1}`` with ``D`` the lattice degree, which keeps the cable
bridge variance ``2d r (1 - r)`` consistent on domains with free faces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import LatticeDomain
from .mc import Estimate, RunPlan, run_replicas

EXACT_LIMIT = 5000


def precision_matrix(domain: LatticeDomain, absorbed=None) -> sp.csr_matrix:
    """Sparse ``(D - A)/(2d)`` over interior vertices (absorbed rows become identity)."""
    n = domain.n_interior
    e = domain.edges
    inner = e[:, 1] < n
    rows = np.concatenate([e[inner, 0], e[inner, 1]])
    cols = np.concatenate([e[inner, 1], e[inner, 0]])
    deg = domain.degree[:n].astype(float)
    A = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
    M = (sp.diags(deg) - A) / (2.0 * domain.d)
    if absorbed is not None and len(absorbed):
        keep = np.ones(n, dtype=bool)
        keep[np.asarray(absorbed)] = False
        K = sp.diags(keep.astype(float))
        M = K @ M @ K + sp.diags((~keep).astype(float))
    return M.tocsr()


@dataclass(eq=False)
class GreenMatrix:
    """Dense Green's function over interior vertices; zero rows/columns on ``explored``."""

    domain: LatticeDomain
    matrix: np.ndarray
    explored: np.ndarray | None = None

    @cached_property
    def chol(self) -> np.ndarray:
        """Lower-triangular factor of the active block (zero on explored vertices)."""
        active = self.active
        L = np.zeros_like(self.matrix)
        if active.any():
            idx = np.flatnonzero(active)
            L[np.ix_(idx, idx)] = np.linalg.cholesky(self.matrix[np.ix_(idx, idx)])
        return L

    @property
    def active(self) -> np.ndarray:
        mask = np.ones(self.domain.n_interior, dtype=bool)
        if self.explored is not None:
            mask[self.explored] = False
        return mask

    def __call__(self, u: int, v: int) -> float:
        n = self.domain.n_interior
        if u >= n or v >= n:
            return 0.0
        return float(self.matrix[u, v])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            n = self.matrix.shape[0]
            for i in range(n):
                for j in range(n):
                    w.writerow([i, j, repr(float(self.matrix[i, j]))])


def green(domain: LatticeDomain) -> GreenMatrix:
    n = domain.n_interior
    if n < 1:
        raise ValueError("domain has no interior vertex")
    if n > EXACT_LIMIT:
        raise ValueError(f"{n} interior vertices exceeds the exact-mode limit {EXACT_LIMIT}")
    M = precision_matrix(domain).toarray()
    try:
        c = sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("Dirichlet system is singular; domain has no killing") from exc
    G = sla.cho_solve(c, np.eye(n))
    G = 0.5 * (G + G.T)
    return GreenMatrix(domain, G)


def green_after_exploration(domain: LatticeDomain, explored) -> GreenMatrix:
    """Green's function with the vertex set ``explored`` additionally absorbing."""
    explored = np.unique(np.asarray(explored, dtype=np.int64))
    if explored.size and (explored.min() < 0 or explored.max() >= domain.n_interior):
        raise ValueError("explored set must consist of interior vertices")
    n = domain.n_interior
    G = np.zeros((n, n))
    keep = np.setdiff1d(np.arange(n), explored)
    if keep.size:
        M = precision_matrix(domain).toarray()[np.ix_(keep, keep)]
        sub = sla.cho_solve(sla.cho_factor(M, lower=True), np.eye(keep.size))
        G[np.ix_(keep, keep)] = 0.5 * (sub + sub.T)
    return GreenMatrix(domain, G, explored)


def _transition(domain: LatticeDomain) -> sp.csr_matrix:
    """Row-stochastic walk matrix on all vertices (rows of boundary vertices are zero)."""
    e = domain.edges
    V = domain.n_vertices
    A = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                      shape=(V, V)).tocsr()
    deg = domain.degree.astype(float)
    inv = np.zeros(V)
    inv[: domain.n_interior] = 1.0 / deg[: domain.n_interior]
    return (sp.diags(inv) @ A).tocsr()


@dataclass
class HarmonicMeasure:
    start: int
    targets: np.ndarray
    probs: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return {int(k): float(p) for k, p in zip(self.targets, self.probs)}

    @property
    def total(self) -> float:
        return float(self.probs.sum())


def harmonic_matrix(domain: LatticeDomain, K) -> np.ndarray:
    """``H[x, j] = P_x(walk first hits K at K[j])`` for every vertex ``x``.

    The walk is killed on Dirichlet vertices that are not in ``K``.
    """
    K = np.unique(np.asarray(K, dtype=np.int64))
    V, n = domain.n_vertices, domain.n_interior
    inK = np.zeros(V, dtype=bool)
    inK[K] = True
    T = np.flatnonzero(~inK[:n])
    H = np.zeros((V, K.size))
    H[K, np.arange(K.size)] = 1.0
    if T.size:
        P = _transition(domain)
        PTT = P[T][:, T]
        PTK = P[T][:, K]
        lhs = (sp.eye(T.size) - PTT).tocsc()
        H[T] = np.asarray(spla.splu(lhs).solve(PTK.toarray())).reshape(T.size, K.size)
    return H


def harmonic_measure(domain: LatticeDomain, v: int, K) -> HarmonicMeasure:
    K = np.unique(np.asarray(K, dtype=np.int64))
    if K.size == 0:
        raise ValueError("K must be nonempty")
    if v in set(K.tolist()):
        probs = (K == v).astype(float)
        return HarmonicMeasure(v, K, probs)
    n = domain.n_interior
    if v >= n:
        return HarmonicMeasure(v, K, np.zeros(K.size))
    inK = np.zeros(domain.n_vertices, dtype=bool)
    inK[K] = True
    T = np.flatnonzero(~inK[:n])
    pos = np.searchsorted(T, v)
    P = _transition(domain)
    lhs = (sp.eye(T.size) - P[T][:, T]).T.tocsc()
    rhs = np.zeros(T.size)
    rhs[pos] = 1.0
    y = spla.splu(lhs).solve(rhs)
    probs = np.asarray(P[T][:, K].T @ y).ravel()
    return HarmonicMeasure(v, K, probs)


@dataclass(frozen=True)
class CablePoint:
    u: int
    v: int
    r: float

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise ValueError("cable offset must lie in [0, 1]")

    def canonical(self) -> "CablePoint":
        if self.u <= self.v:
            return self
        return CablePoint(self.v, self.u, 1.0 - self.r)


def metric_green(domain: LatticeDomain, G: GreenMatrix, w1: CablePoint, w2: CablePoint) -> float:
    """Covariance of the cable field at two points on edges of the domain."""
    a, b = w1.canonical(), w2.canonical()
    for w in (a, b):
        if (w.u, w.v) not in domain.edge_set:
            raise ValueError(f"({w.u}, {w.v}) is not an edge of the domain")
    r1, r2 = a.r, b.r
    val = ((1 - r1) * (1 - r2) * G(a.u, b.u) + r1 * r2 * G(a.v, b.v)
           + (1 - r1) * r2 * G(a.u, b.v) + r1 * (1 - r2) * G(a.v, b.u))
    if (a.u, a.v) == (b.u, b.v):
        val += 2 * domain.d * (min(r1, r2) - r1 * r2)
    return float(val)


def _compact_neighbors(domain: LatticeDomain) -> tuple[np.ndarray, np.ndarray]:
    nb = domain.neighbors
    order = np.argsort(nb < 0, axis=1, kind="stable")
    return np.take_along_axis(nb, order, axis=1), (nb >= 0).sum(axis=1)


def green_mc_oracle(domain: LatticeDomain, u: int, v: int, walks: int, seed: int,
                    replicas: int | None = None) -> Estimate:
    """Mean (weighted) visit count of ``v`` by the killed walk from ``u``."""
    if walks < 1:
        raise ValueError("walks must be >= 1")
    n = domain.n_interior
    for x in (u, v):
        if not 0 <= x < domain.n_vertices:
            raise ValueError(f"vertex {x} outside domain")
    nbrs, deg = _compact_neighbors(domain)
    weight = 2.0 * domain.d / deg[v] if v < n else 0.0
    plan = RunPlan.for_total(walks, seed, replicas)

    def replica(rng, m, _i):
        visits = np.zeros(m)
        if u >= n:
            return visits
        pos = np.full(m, u, dtype=np.int64)
        alive = np.arange(m)
        while alive.size:
            p = pos[alive]
            visits[alive] += p == v
            k = (rng.random(alive.size) * deg[p]).astype(np.int64)
            p = nbrs[p, k]
            pos[alive] = p
            alive = alive[p < n]
        return visits * weight

    parts = run_replicas(plan, replica)
    x = np.concatenate(parts)[:walks]
    return Estimate.from_samples(x, seed=seed, label=f"green-mc:{u}:{v}")
