"""Villain model on planar boxes through its cable representation.

Angles are radians in ``[0, 2 pi)``; the Dirichlet layer carries the fixed
boundary angle (0 by default).  The edge weight is the circle heat kernel
``p_t``; an edge trajectory avoiding a finite set ``S`` of angles is a bridge
that stays in one arc of the complement of ``S``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit

from .geometry import LatticeDomain, build_grid, origin
from .gff import OracleResult, standard_bridges
from .mc import Association, Estimate, RatioEstimate, RunPlan, association_from_blocks, ratio_from_blocks, run_replicas
from .percolation import ClusterLabeling, _roots, _roots_batch

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
IMAGE_T_MAX = 2.5  # circle kernel: image series below, dual series above
ARC_RATIO_MAX = 0.5  # arc kernel: image series while t / L^2 is below this


def circle_distance(theta1, theta2):
    """Distance on the circle, in ``[0, pi]``; exactly symmetric in its arguments."""
    d = np.mod(np.abs(np.asarray(theta1, dtype=float) - np.asarray(theta2, dtype=float)), TWO_PI)
    return np.minimum(d, TWO_PI - d)


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise ValueError("t must be positive and finite")
    return t


def _circle_images_scaled(t, d):
    """``sum_n exp(-((d + 2 pi n)^2 - d^2) / 2t)`` for ``d`` in ``[0, pi]``."""
    nmax = int(math.ceil(math.sqrt(72.0 * float(np.max(t))) / TWO_PI)) + 1
    n = np.arange(-nmax, nmax + 1)
    z = d[..., None] + TWO_PI * n
    return np.exp(-(z * z - (d * d)[..., None]) / (2.0 * t[..., None])).sum(axis=-1)


def _circle_dual(t, d):
    kmax = int(math.ceil(math.sqrt(78.0 / float(np.min(t))))) + 1
    k = np.arange(1, kmax + 1)
    s = (np.exp(-(k * k) * t[..., None] / 2.0) * np.cos(k * d[..., None])).sum(axis=-1)
    return (1.0 + 2.0 * s) / TWO_PI


def circle_kernel(t, theta1, theta2, method: str = "auto"):
    """Heat kernel of Brownian motion on the circle, ``(2 pi t)^{-1/2} sum_n exp(-(d + 2 pi n)^2 / 2t)``.

    ``method`` is "images", "dual" (Fourier series) or "auto" (images for
    ``t < 2.5``).  Both series are truncated below 1e-15 relative error.
    """
    t = _check_t(t)
    d = circle_distance(theta1, theta2)
    t, d = np.broadcast_arrays(t, d)
    out = np.empty(t.shape)
    use_img = np.full(t.shape, method == "images") if method != "auto" else t < IMAGE_T_MAX
    if method not in ("auto", "images", "dual"):
        raise ValueError(f"unknown method {method!r}")
    if use_img.any():
        ti, di = t[use_img], d[use_img]
        out[use_img] = _circle_images_scaled(ti, di) * np.exp(-di * di / (2 * ti)) / np.sqrt(TWO_PI * ti)
    if (~use_img).any():
        out[~use_img] = _circle_dual(t[~use_img], d[~use_img])
    return float(out) if out.ndim == 0 else out


def _circle_scaled(t, d):
    """``sqrt(2 pi t) exp(d^2 / 2t) p_t(d)``: never underflows."""
    out = np.empty(t.shape)
    img = t < IMAGE_T_MAX
    if img.any():
        out[img] = _circle_images_scaled(t[img], d[img])
    if (~img).any():
        tt, dd = t[~img], d[~img]
        out[~img] = _circle_dual(tt, dd) * np.sqrt(TWO_PI * tt) * np.exp(dd * dd / (2 * tt))
    return out


def _arc_scaled(t, x, y, L, d):
    """Killed kernel on ``(0, L)`` scaled like :func:`_circle_scaled` with offset ``d``."""
    out = np.zeros(t.shape)
    img = t / (L * L) < ARC_RATIO_MAX
    if img.any():
        ti, xi, yi, Li, di = t[img], x[img], y[img], L[img], d[img]
        nmax = int(math.ceil(math.sqrt(74.0 * float(ti.max())) / (2.0 * float(Li.min())))) + 2
        n = np.arange(-nmax, nmax + 1)
        shift = 2.0 * n * Li[:, None]
        a = (xi - yi)[:, None] + shift
        b = (xi + yi)[:, None] + shift
        c = (di * di)[:, None]
        s = np.exp(-(a * a - c) / (2 * ti[:, None])) - np.exp(-(b * b - c) / (2 * ti[:, None]))
        out[img] = s.sum(axis=1)
    if (~img).any():
        td, xd, yd, Ld, dd = t[~img], x[~img], y[~img], L[~img], d[~img]
        kmax = int(math.ceil(math.sqrt(83.0 * float((Ld * Ld / td).max())) / math.pi)) + 2
        k = np.arange(1, kmax + 1)
        w = k * math.pi / Ld[:, None]
        s = (np.exp(-(w * w) * td[:, None] / 2) * np.sin(w * xd[:, None]) * np.sin(w * yd[:, None])).sum(axis=1)
        out[~img] = (2.0 / Ld) * s * np.sqrt(TWO_PI * td) * np.exp(dd * dd / (2 * td))
    return out


def arc_kernel(t, theta1, theta2, arc):
    """Heat kernel on the arc ``(a, b)`` killed at both ends (method of images).

    Angles are taken modulo ``2 pi`` relative to ``a``; endpoints give 0 and
    angles outside the arc raise ValueError.
    """
    a, b = float(arc[0]), float(arc[1])
    L = b - a
    if not 0 < L <= TWO_PI:
        raise ValueError("arc must satisfy 0 < b - a <= 2 pi")
    t = _check_t(t)
    x = np.mod(np.asarray(theta1, dtype=float) - a, TWO_PI)
    y = np.mod(np.asarray(theta2, dtype=float) - a, TWO_PI)
    if np.any(x > L) or np.any(y > L):
        raise ValueError("angle outside the arc")
    t, x, y = np.broadcast_arrays(t, x, y)
    inside = (x > 0) & (x < L) & (y > 0) & (y < L)
    out = np.zeros(t.shape)
    if inside.any():
        ti, xi, yi = t[inside], x[inside], y[inside]
        d = circle_distance(xi, yi)
        s = _arc_scaled(ti, xi, yi, np.full(ti.shape, L), d)
        out[inside] = np.maximum(s, 0.0) * np.exp(-d * d / (2 * ti)) / np.sqrt(TWO_PI * ti)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AvoidSet:
    """Finite set of absorbing angles; its complement is a union of open arcs."""

    points: tuple

    def __post_init__(self):
        pts = np.unique(np.mod(np.asarray(self.points, dtype=float), TWO_PI))
        if pts.size == 0:
            raise ValueError("avoid set needs at least one point")
        object.__setattr__(self, "points", tuple(float(p) for p in pts))

    @classmethod
    def pair(cls, alpha: float) -> "AvoidSet":
        """``{alpha, alpha + pi}``: the points ``+-exp(i alpha)``."""
        return cls((alpha, alpha + math.pi))

    @classmethod
    def conjugate_pair(cls, alpha: float) -> "AvoidSet":
        """``{-alpha, pi - alpha}``: the points ``+-exp(-i alpha)``."""
        return cls((-alpha, math.pi - alpha))

    def union(self, other: "AvoidSet") -> "AvoidSet":
        return AvoidSet(self.points + other.points)

    @property
    def arcs(self) -> list[tuple[float, float]]:
        p = list(self.points)
        return [(a, b) for a, b in zip(p, p[1:] + [p[0] + TWO_PI])]

    @property
    def lengths(self) -> np.ndarray:
        return np.array([b - a for a, b in self.arcs])

    def locate(self, theta):
        """Arc index (-1 on a point of the set) and offset from the arc start."""
        p = np.asarray(self.points)
        rel = np.mod(np.asarray(theta, dtype=float) - p[0], TWO_PI)
        starts = p - p[0]
        idx = np.searchsorted(starts, rel, side="right") - 1
        off = rel - starts[idx]
        idx = np.where(off == 0.0, -1, idx)
        return idx, off


def edge_avoid_probability(t, theta_x, theta_y, S: AvoidSet):
    """Probability that the edge bridge from ``theta_x`` to ``theta_y`` in time ``t`` avoids ``S``."""
    t = _check_t(t)
    t, tx, ty = np.broadcast_arrays(t, np.asarray(theta_x, dtype=float), np.asarray(theta_y, dtype=float))
    ix, ox = S.locate(tx)
    iy, oy = S.locate(ty)
    same = (ix == iy) & (ix >= 0)
    out = np.zeros(t.shape)
    if same.any():
        L = S.lengths[ix[same]]
        ts, xs, ys = t[same], ox[same], oy[same]
        d = circle_distance(tx[same], ty[same])
        out[same] = np.clip(_arc_scaled(ts, xs, ys, L, d) / _circle_scaled(ts, d), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def joint_atoms(t, theta_x, theta_y, sets) -> np.ndarray:
    """Atom probabilities of the avoidance indicators of ``k`` sets, shape ``(2^k, ...)``.

    Bit ``j`` of the atom index is the indicator of avoiding ``sets[j]``.  A
    trajectory avoids several sets iff it avoids their union, which fixes every
    joint probability; atoms follow by inclusion-exclusion.
    """
    k = len(sets)
    q = [np.ones(np.broadcast(np.asarray(t), np.asarray(theta_x), np.asarray(theta_y)).shape)]
    for mask in range(1, 2 ** k):
        U = None
        for j in range(k):
            if mask >> j & 1:
                U = sets[j] if U is None else U.union(sets[j])
        q.append(np.asarray(edge_avoid_probability(t, theta_x, theta_y, U)))
    q = np.stack(q)
    atoms = np.zeros_like(q)
    for J in range(2 ** k):
        for K in range(2 ** k):
            if K & J == J:
                atoms[J] += (-1) ** bin(K ^ J).count("1") * q[K]
    low = atoms.min()
    if low < -1e-9:
        log.warning("joint atom probability %.3e clamped to 0", low)
    return np.maximum(atoms, 0.0)


def sample_joint(atoms: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Indicators ``(k, ...)`` from atom tables and one uniform per trajectory."""
    cum = np.cumsum(atoms, axis=0)
    cum /= cum[-1]
    idx = (u[None, ...] >= cum).sum(axis=0)
    idx = np.minimum(idx, atoms.shape[0] - 1)
    k = int(round(math.log2(atoms.shape[0])))
    return np.stack([(idx >> j & 1).astype(bool) for j in range(k)])


def joint_edge_indicators(t, theta_x, theta_y, S1: AvoidSet, S2: AvoidSet, rng) -> tuple[bool, bool]:
    """One draw of (avoids ``S1``, avoids ``S2``) for a single edge trajectory."""
    atoms = joint_atoms(t, theta_x, theta_y, [S1, S2])
    ind = sample_joint(atoms, np.asarray(rng.random()))
    return bool(ind[0]), bool(ind[1])


@dataclass
class VillainState:
    domain: LatticeDomain
    angles: np.ndarray
    t_edges: np.ndarray
    boundary: float = 0.0

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.t_edges = np.broadcast_to(np.asarray(self.t_edges, dtype=float), (self.domain.n_edges,)).copy()
        if self.angles.shape != (self.domain.n_interior,):
            raise ValueError("need one angle per interior vertex")
        if np.any(self.angles < 0) or np.any(self.angles >= TWO_PI):
            raise ValueError("angles must lie in [0, 2 pi)")
        if np.any(self.t_edges <= 0) or not np.all(np.isfinite(self.t_edges)):
            raise ValueError("edge times must be positive")

    @classmethod
    def ordered(cls, domain: LatticeDomain, t, boundary: float = 0.0) -> "VillainState":
        return cls(domain, np.full(domain.n_interior, float(np.mod(boundary, TWO_PI))), t, boundary)

    def all_angles(self) -> np.ndarray:
        return np.r_[self.angles, np.full(self.domain.n_vertices - self.domain.n_interior, self.boundary)]

    def copy(self) -> "VillainState":
        return VillainState(self.domain, self.angles.copy(), self.t_edges.copy(), self.boundary)


@lru_cache(maxsize=64)
def _log_table(t: float, bins: int) -> np.ndarray:
    """``log p_t`` at the ``bins + 1`` offsets ``k * 2 pi / bins`` (periodic)."""
    k = np.arange(bins + 1)
    d = circle_distance(k * (TWO_PI / bins), 0.0)
    tt = np.full(d.shape, t)
    return np.log(_circle_scaled(tt, d)) - d * d / (2 * t) - 0.5 * math.log(TWO_PI * t)


@njit(cache=True, fastmath=True)
def _heat_bath(theta, nbrs, tabs, tables, boundary, sweeps, bins, u, record_every, out):
    # candidate angles are bin centres (j + 1/2) w; a neighbour at angle a
    # sits at offset (j - s) bins with s = a / w - 1/2, interpolated linearly
    n_int = theta.size
    w = 2.0 * np.pi / bins
    logw = np.empty(bins)
    c = 0
    r = 0
    for sw in range(sweeps):
        for x in range(n_int):
            logw[:] = 0.0
            for q in range(nbrs.shape[1]):
                y = nbrs[x, q]
                if y < 0:
                    continue
                ang = theta[y] if y < n_int else boundary
                sh = ang / w - 0.5
                m = int(np.floor(sh))
                g = sh - m
                i0 = (-m - 1) % bins
                tb = tables[tabs[x, q]]
                split = bins - i0
                for j in range(split):
                    logw[j] += g * tb[j + i0] + (1.0 - g) * tb[j + i0 + 1]
                for j in range(split, bins):
                    logw[j] += g * tb[j - split] + (1.0 - g) * tb[j - split + 1]
            mx = logw.max()
            tot = 0.0
            for j in range(bins):
                logw[j] = np.exp(logw[j] - mx)
                tot += logw[j]
            target = u[c] * tot
            c += 1
            j = 0
            cum = logw[0]
            while cum < target and j < bins - 1:
                j += 1
                cum += logw[j]
            theta[x] = (j + u[c]) * w
            c += 1
        if record_every > 0 and (sw + 1) % record_every == 0:
            out[r, :] = theta
            r += 1


class HeatBath:
    """Compiled single-site heat-bath updates for one domain and edge-time assignment."""

    def __init__(self, domain: LatticeDomain, t_edges, boundary: float = 0.0, bins: int = 4096):
        if bins < 2:
            raise ValueError("bins must be >= 2")
        self.domain = domain
        self.bins = bins
        self.boundary = float(np.mod(boundary, TWO_PI))
        t_edges = np.broadcast_to(np.asarray(t_edges, dtype=float), (domain.n_edges,))
        uniq, inv = np.unique(t_edges, return_inverse=True)
        self.tables = np.stack([_log_table(float(t), bins) for t in uniq])
        nb = domain.neighbors[: domain.n_interior]
        self.nbrs = nb.copy()
        self.tabs = np.zeros_like(nb)
        idx = domain.edge_index
        for x in range(domain.n_interior):
            for q in range(nb.shape[1]):
                y = nb[x, q]
                if y >= 0:
                    self.tabs[x, q] = inv[idx[(min(x, y), max(x, y))]]

    def run(self, angles: np.ndarray, sweeps: int, rng, record_every: int = 0) -> np.ndarray:
        """Update ``angles`` in place; returns the recorded states ``(sweeps // record_every, n)``."""
        if sweeps < 0:
            raise ValueError("sweeps must be >= 0")
        n = angles.size
        u = rng.random(2 * sweeps * n)
        rec = sweeps // record_every if record_every > 0 else 0
        out = np.empty((rec, n))
        _heat_bath(angles, self.nbrs, self.tabs, self.tables, self.boundary, sweeps, self.bins, u,
                   record_every, out)
        return out


def gibbs_sample(state: VillainState, sweeps: int, rng, bins: int = 4096) -> VillainState:
    """Heat-bath sweeps (inverse CDF over ``bins`` equal angular bins); returns a new state."""
    if sweeps < 0:
        raise ValueError("sweeps must be >= 0")
    new = state.copy()
    if sweeps > 0:
        HeatBath(state.domain, state.t_edges, state.boundary, bins).run(new.angles, sweeps, rng)
    return new


def _edge_arrays(domain: LatticeDomain):
    e = domain.edges
    return np.ascontiguousarray(e[:, 0]), np.ascontiguousarray(e[:, 1])


def villain_clusters(state: VillainState, S: AvoidSet, rng) -> ClusterLabeling:
    """Clusters of edges whose trajectories avoid ``S`` (independent given the angles)."""
    th = state.all_angles()
    eu, ev = _edge_arrays(state.domain)
    p = edge_avoid_probability(state.t_edges, th[eu], th[ev], S)
    open_ = rng.random(eu.size) < p
    out = np.empty(state.domain.n_vertices, dtype=np.int64)
    _roots(out.size, eu, ev, open_, np.ones(out.size, dtype=np.bool_), out)
    return ClusterLabeling(out)


def boundary_connection(roots: np.ndarray, x: int, n_interior: int) -> np.ndarray:
    """Per sample: does vertex ``x`` share a cluster with some Dirichlet vertex?"""
    r = roots[..., x]
    return (roots[..., n_interior:] == r[..., None]).any(axis=-1)


def sample_set_clusters(domain: LatticeDomain, states: np.ndarray, t_edges, sets, rng, boundary: float = 0.0):
    """Jointly sample edge indicators for several avoid sets on recorded states.

    Returns ``(edge_open, roots)`` with shapes ``(k, S, E)`` and ``(k, S, V)``.
    """
    S = states.shape[0]
    th = np.concatenate([states, np.full((S, domain.n_vertices - domain.n_interior), boundary)], axis=1)
    eu, ev = _edge_arrays(domain)
    t = np.broadcast_to(np.asarray(t_edges, dtype=float), (domain.n_edges,))
    atoms = joint_atoms(t[None, :], th[:, eu], th[:, ev], sets)
    edge_open = sample_joint(atoms, rng.random((S, eu.size)))
    roots = np.empty((len(sets), S, domain.n_vertices), dtype=np.int64)
    vm = np.ones((S, domain.n_vertices), dtype=np.bool_)
    for j in range(len(sets)):
        _roots_batch(eu, ev, np.ascontiguousarray(edge_open[j]), vm, roots[j])
    return edge_open, roots


def integrated_autocorrelation(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time with the automatic window ``M >= c tau``."""
    x = np.asarray(x, dtype=float) - np.mean(x)
    n = x.size
    var = float(x @ x) / n
    if var == 0 or n < 4:
        return 1.0
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (var * n)
    tau = 1.0
    for M in range(1, n):
        tau = 1.0 + 2.0 * acf[1:M + 1].sum()
        if M >= c * tau:
            break
    return max(tau, 1.0)


S_PLUS_MINUS_I = AvoidSet((math.pi / 2, 3 * math.pi / 2))


@dataclass
class VillainRatio:
    ratio: RatioEstimate
    mode: str
    chains: int
    sweeps: int
    burn_in: int
    tau_int: float
    alpha: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        r = self.ratio
        return {"mode": self.mode, "ratio": r.value, "stderr": r.stderr, "ci_lo": r.lo, "ci_hi": r.hi,
                "numerator": r.numerator.value, "denominator": r.denominator.value, "flagged": r.flagged,
                "notes": r.notes, "chains": self.chains, "sweeps": self.sweeps, "burn_in": self.burn_in,
                "tau_int": self.tau_int, "alpha": self.alpha, **self.extras}


def _burn_in(hb: HeatBath, x: int, seed: int, pilot: int = 400) -> tuple[int, float]:
    """Ten integrated autocorrelation times of ``cos(theta_x)`` from a pilot chain (at least 20 sweeps)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5EED])))
    angles = np.full(hb.domain.n_interior, hb.boundary)
    rec = hb.run(angles, pilot, rng, record_every=1)
    tau = float(integrated_autocorrelation(np.cos(rec[pilot // 4:, x])))
    return max(20, int(math.ceil(10 * tau))), tau


def _chains(domain, t_edges, chains: int, sweeps: int, seed: int, burn_in, bins: int, boundary: float, x: int,
            measure):
    """Run independent heat-bath chains; ``measure(states, rng)`` returns per-chain block statistics."""
    hb = HeatBath(domain, t_edges, boundary, bins)
    tau = float("nan")
    if burn_in is None:
        burn_in, tau = _burn_in(hb, x, seed)
    plan = RunPlan(chains, sweeps, seed)

    def replica(rng, m, _i):
        angles = np.full(domain.n_interior, hb.boundary)
        hb.run(angles, burn_in, rng)
        states = hb.run(angles, m, rng, record_every=1)
        return measure(states, rng)

    return run_replicas(plan, replica), burn_in, tau


def correlation_ratio(domain: LatticeDomain, t_edges, reps: int, sweeps: int, seed: int, mode: str = "cos",
                      x=None, burn_in: int | None = None, bins: int = 4096, alpha: float = math.pi / 4,
                      boundary: float = 0.0) -> VillainRatio:
    """``<cos theta_x> / P[x <-> boundary avoiding {+-i}]`` (mode "cos") or
    ``<cos 2 theta_x> / P[x <-> boundary avoiding {+-xi} and avoiding {+-conj xi}]`` (mode "cos2").

    ``reps`` independent chains each contribute ``sweeps`` recorded sweeps
    after ``burn_in``; chains are the blocks of the delta-method interval.
    """
    if mode not in ("cos", "cos2"):
        raise ValueError("mode must be 'cos' or 'cos2'")
    if reps < 2 or sweeps < 1:
        raise ValueError("need reps >= 2 chains and sweeps >= 1")
    xv = domain.vertex(origin(domain) if x is None else x)
    sets = [S_PLUS_MINUS_I] if mode == "cos" else [AvoidSet.pair(alpha), AvoidSet.conjugate_pair(alpha)]
    k = 1 if mode == "cos" else 2

    def measure(states, rng):
        _, roots = sample_set_clusters(domain, states, t_edges, sets, rng, boundary)
        conn = np.all([boundary_connection(roots[j], xv, domain.n_interior) for j in range(len(sets))], axis=0)
        f = np.cos(k * (states[:, xv] - boundary))
        return f.mean(), conn.mean(), (f * ~conn).mean()

    parts, burn, tau = _chains(domain, t_edges, reps, sweeps, seed, burn_in, bins, boundary, xv, measure)
    num = [p[0] for p in parts]
    den = [p[1] for p in parts]
    ratio = ratio_from_blocks(num, den, label=f"villain-{mode}", seed=seed)
    off = Estimate.from_samples([p[2] for p in parts], seed=seed, label="off-cluster")
    return VillainRatio(ratio, mode, reps, sweeps, burn, tau, alpha,
                        {"off_cluster_mean": off.value, "off_cluster_stderr": off.stderr})


def angle_association(domain: LatticeDomain, t_edges, x, y, level: float, reps: int, sweeps: int, seed: int,
                      burn_in: int | None = None, bins: int = 4096) -> Association:
    """Positive-association check for ``{cos theta_x >= level}`` and ``{cos theta_y >= level}``.

    Both events increase as angles move towards the boundary angle 0; chains
    are the blocks.
    """
    xv, yv = domain.vertex(x), domain.vertex(y)

    def measure(states, rng):
        a = np.cos(states[:, xv]) >= level
        b = np.cos(states[:, yv]) >= level
        return a.mean(), b.mean(), (a & b).mean()

    parts, _, _ = _chains(domain, t_edges, reps, sweeps, seed, burn_in, bins, 0.0, xv, measure)
    arr = np.array(parts)
    return association_from_blocks(arr[:, 0], arr[:, 1], arr[:, 2])


@dataclass
class VillainScanRow:
    n: int
    alpha: float | None
    estimate: RatioEstimate
    acceptance: float

    def row(self) -> dict:
        e = self.estimate
        return {"n": self.n, "alpha": self.alpha, "column": "A" if self.alpha is None else "B",
                "p_hat": e.value, "stderr": e.stderr, "ci_lo": e.lo, "ci_hi": e.hi,
                "acceptance_rate": self.acceptance, "flagged": e.flagged}


@dataclass
class VillainScan:
    rows: list[VillainScanRow]
    diagnostics: dict

    def to_dict(self) -> dict:
        return {"rows": [r.row() for r in self.rows], "diagnostics": self.diagnostics}


def villain_iic_scan(sizes, alphas, reps: int, sweeps: int, seed: int, t: float = 1.0, event: str = "edge-open",
                     burn_in: int | None = None, bins: int = 4096, R_max: int | None = None) -> VillainScan:
    """Column A: ``P[E | x <-> boundary avoiding {+-i}]``; column B per ``alpha``:
    ``P[E | x <-> boundary avoiding {+-xi} and {+-conj xi}]`` with ``xi = exp(i alpha)``.

    ``E`` is "edge-open" (the edge from the centre ``x`` to ``x + e_0`` avoids
    ``{+-i}``), "always", or "conditioning" (the column's own conditioning
    event).  The three sets are sampled jointly per edge trajectory, so every
    column is computed on the same states.  Conditioning means the cluster of
    ``x`` reaches ell-infinity distance ``R_max`` from ``x``; the default
    ``None`` means it touches the Dirichlet layer of the ``n x n`` box.
    """
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("alpha schedule must be nonempty")
    if event not in ("edge-open", "always", "conditioning"):
        raise ValueError(f"unknown event {event!r}")
    rows, diag = [], {}
    for i, n in enumerate(sizes):
        dom = build_grid((n, n))
        c = origin(dom)
        xv = dom.vertex(c)
        e_id = dom.edge_index[tuple(sorted((xv, dom.vertex((c[0] + 1, c[1])))))]
        if R_max is None:
            far = np.arange(dom.n_interior, dom.n_vertices)
        else:
            far = np.flatnonzero(np.abs(dom.coords - np.asarray(c)).max(axis=1) >= R_max)
            if far.size == 0:
                raise ValueError("R_max exceeds the domain")
        set_lists = [[S_PLUS_MINUS_I, AvoidSet.pair(a), AvoidSet.conjugate_pair(a)] for a in alphas]

        def measure(states, rng, set_lists=set_lists, xv=xv, e_id=e_id, dom=dom, far=far):
            out = []
            for sets in set_lists:
                edge_open, roots = sample_set_clusters(dom, states, t, sets, rng)
                conn = [(roots[j][:, far] == roots[j][:, xv:xv + 1]).any(axis=1) for j in range(3)]
                condA = conn[0]
                condB = conn[1] & conn[2]
                if event == "edge-open":
                    evA = evB = edge_open[0][:, e_id]
                elif event == "always":
                    evA = evB = np.ones(states.shape[0], dtype=bool)
                else:
                    evA, evB = condA, condB
                out.append(((evA & condA).mean(), condA.mean(), (evB & condB).mean(), condB.mean()))
            return out

        parts, burn, tau = _chains(dom, t, reps, sweeps, seed + i, burn_in, bins, 0.0, xv, measure)
        arr = np.array(parts)  # (chains, alphas, 4)
        A = ratio_from_blocks(arr[:, -1, 0], arr[:, -1, 1], "villain-iic-A", seed + i)
        rows.append(VillainScanRow(n, None, A, float(arr[:, -1, 1].mean())))
        Bs = []
        for j, a in enumerate(alphas):
            B = ratio_from_blocks(arr[:, j, 2], arr[:, j, 3], "villain-iic-B", seed + i)
            Bs.append(B)
            rows.append(VillainScanRow(n, a, B, float(arr[:, j, 3].mean())))
        sig = math.sqrt(A.stderr ** 2 + Bs[-1].stderr ** 2)
        diff = abs(A.value - Bs[-1].value)
        diag[n] = {"difference": diff, "combined_sigma": sig, "pass": bool(diff <= 3 * sig or diff == 0.0),
                   "burn_in": burn, "tau_int": tau, "proxy": "Dirichlet layer" if R_max is None else f"reach-{R_max}"}
    return VillainScan(rows, diag)


@njit(cache=True)
def _arc_survival(B, r, x0, dn, lo, hi, sig, stride):
    npts, reps = dn.shape
    m = B.shape[1]
    fine = np.zeros(npts, dtype=np.int64)
    coarse = np.zeros(npts, dtype=np.int64)
    for j in range(npts):
        for i in range(reps):
            k = 0
            while k < m:
                v = x0[j] + dn[j, i] * r[k] + sig[j] * B[i, k]
                if v <= lo[j] or v >= hi[j]:
                    break
                k += 1
            if k == m:
                fine[j] += 1
                coarse[j] += 1
                continue
            k = ((k + stride - 1) // stride) * stride
            while k < m:
                v = x0[j] + dn[j, i] * r[k] + sig[j] * B[i, k]
                if v <= lo[j] or v >= hi[j]:
                    break
                k += stride
            if k >= m:
                coarse[j] += 1
    return fine, coarse


def avoid_oracle_grid(points, S: AvoidSet, steps: int, reps: int, seed: int, chunk: int = 4096) -> list[OracleResult]:
    """Discretised circle bridges for many ``(t, theta_x, theta_y)``: fraction that avoid ``S``.

    The winding number is drawn from its exact law given the endpoints, then a
    Brownian bridge on the line connects the lifted endpoints; all points share
    the underlying standard bridges.
    """
    pts = [(float(t), float(a), float(b)) for t, a, b in points]
    npts = len(pts)
    plan = RunPlan.for_total(reps, seed, replicas=max(1, -(-reps // chunk)))
    r = np.linspace(0.0, 1.0, steps + 1)
    stride = 4 if steps % 4 == 0 else 1
    x0 = np.empty(npts)
    lo = np.empty(npts)
    hi = np.empty(npts)
    base = np.empty(npts)
    tt = np.array([p[0] for p in pts])
    for j, (t, a, b) in enumerate(pts):
        ix, ox = S.locate(a)
        start = S.points[0] + (S.points[int(ix)] - S.points[0] if ix >= 0 else 0.0)
        x0[j] = start + ox
        lo[j] = start
        hi[j] = start + S.lengths[int(ix)] if ix >= 0 else start
        base[j] = np.mod(b - x0[j], TWO_PI)
    nmax = int(math.ceil(math.sqrt(80.0 * tt.max()) / TWO_PI)) + 2
    wind = np.arange(-nmax - 1, nmax + 1)
    targets = base[:, None] + TWO_PI * wind[None, :]
    logw = -targets ** 2 / (2 * tt[:, None])
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]

    def replica(rng, m, _i):
        B = standard_bridges(rng, m, steps)
        u = rng.random(m)
        pick = np.minimum((u[None, :, None] >= cdf[:, None, :]).sum(axis=2), wind.size - 1)
        dn = targets[np.arange(npts)[:, None], pick]
        return _arc_survival(B, r, x0, dn, lo, hi, np.sqrt(tt), stride)

    parts = run_replicas(plan, replica)
    fine = sum(p[0] for p in parts)
    coarse = sum(p[1] for p in parts)
    return [OracleResult(Estimate.from_counts(fine[j], plan.total, seed=seed, label="avoid-oracle"),
                         Estimate.from_counts(coarse[j], plan.total, seed=seed, label="avoid-oracle"), steps)
            for j in range(npts)]
