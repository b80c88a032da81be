"""Dirichlet GFF sampling and the cable extension of its level sets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft
from numba import njit

from .geometry import LatticeDomain
from .mc import Estimate, RunPlan, run_replicas, wilson_interval
from .potential import GreenMatrix, green


def as_generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


class CholeskySampler:
    """Exact sampler ``phi = L z`` from the cached factor of a dense Green matrix."""

    def __init__(self, G: GreenMatrix):
        self.G = G
        self.n = G.domain.n_interior

    def sample(self, rng, size: int) -> np.ndarray:
        z = rng.standard_normal((size, self.n))
        return z @ self.G.chol.T


class SpectralBoxSampler:
    """Exact sampler for an ell-infinity box via the orthonormal DST-I.

    The Dirichlet Laplacian on ``[-n, n]^d`` is diagonal in the product sine
    basis, so ``phi = S diag(sqrt(eig(G))) z`` with ``S`` the (symmetric,
    orthogonal) type-I sine transform along every axis.
    """

    def __init__(self, domain: LatticeDomain):
        if not domain.is_full_box:
            raise ValueError("spectral sampling needs an ell-infinity box")
        self.domain = domain
        n, d = domain.descriptor["n"], domain.d
        self.side = 2 * n + 1
        k = np.arange(1, self.side + 1)
        lam1 = 2.0 - 2.0 * np.cos(np.pi * k / (self.side + 1))
        lam = sum(np.meshgrid(*([lam1] * d), indexing="ij"))
        self.scale = np.sqrt(2.0 * d / lam)
        self.shape = (self.side,) * d
        self.n = self.side ** d

    def sample(self, rng, size: int) -> np.ndarray:
        z = rng.standard_normal((size, *self.shape))
        z *= self.scale
        axes = tuple(range(1, len(self.shape) + 1))
        return sfft.dstn(z, type=1, norm="ortho", axes=axes, overwrite_x=True).reshape(size, self.n)

    def covariance(self) -> np.ndarray:
        """Dense covariance implied by the transform (tests and small boxes only)."""
        eye = np.eye(self.n).reshape(self.n, *self.shape)
        axes = tuple(range(1, len(self.shape) + 1))
        S = sfft.dstn(eye, type=1, norm="ortho", axes=axes).reshape(self.n, self.n)
        return S @ np.diag(self.scale.ravel() ** 2) @ S.T


def make_sampler(domain: LatticeDomain, G: GreenMatrix | None = None):
    if G is None and domain.is_full_box:
        return SpectralBoxSampler(domain)
    return CholeskySampler(G if G is not None else green(domain))


def sample_field(domain: LatticeDomain, G: GreenMatrix, seed) -> np.ndarray:
    """One exact draw of the interior field with covariance ``G``."""
    return CholeskySampler(G).sample(as_generator(seed), 1)[0]


def with_boundary(domain: LatticeDomain, interior_values: np.ndarray) -> np.ndarray:
    """Pad interior values with the Dirichlet zeros (last axis)."""
    pad = [(0, 0)] * (interior_values.ndim - 1) + [(0, domain.n_vertices - domain.n_interior)]
    return np.pad(interior_values, pad)


def bridge_open_probability(a, b, h, d):
    """Probability that the cable between values ``a`` and ``b`` stays at or above ``h``.

    The bridge on an edge has covariance ``2d (r ^ r' - r r')``, so the
    minimum law gives ``1 - exp(-(a - h)(b - h)/d)`` when both ends are >= h.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x = a - h
    y = b - h
    ok = (x > 0) & (y > 0)
    with np.errstate(over="ignore", invalid="ignore"):
        p = -np.expm1(-np.where(ok, x * y, 0.0) / d)
    out = np.where(ok, p, 0.0)
    return float(out) if out.ndim == 0 else out


def standard_bridges(rng, reps: int, steps: int) -> np.ndarray:
    """Standard Brownian bridges on ``[0, 1]`` sampled at ``k/steps``, shape (reps, steps + 1)."""
    w = np.zeros((reps, steps + 1))
    np.cumsum(rng.standard_normal((reps, steps)) * np.sqrt(1.0 / steps), axis=1, out=w[:, 1:])
    r = np.linspace(0.0, 1.0, steps + 1)
    w -= w[:, -1:] * r
    return w


@njit(cache=True)
def _bridge_survival(B, r, xs, ys, sig, stride):
    """Count paths ``x + (y - x) r + sig B`` staying >= 0 on the full and the strided grid."""
    npts = xs.size
    fine = np.zeros(npts, dtype=np.int64)
    coarse = np.zeros(npts, dtype=np.int64)
    reps, m = B.shape
    for j in range(npts):
        x, y, s = xs[j], ys[j], sig[j]
        if x < 0 or y < 0:
            continue
        for i in range(reps):
            k = 0
            while k < m:
                if x + (y - x) * r[k] + s * B[i, k] < 0:
                    break
                k += 1
            if k == m:
                fine[j] += 1
                coarse[j] += 1
                continue
            # fine grid failed at k; the strided grid may still survive
            k = ((k + stride - 1) // stride) * stride
            while k < m:
                if x + (y - x) * r[k] + s * B[i, k] < 0:
                    break
                k += stride
            if k >= m:
                coarse[j] += 1
    return fine, coarse


@dataclass
class OracleResult:
    """Monte Carlo value at ``steps`` plus the same paths monitored at ``steps // 4``.

    Discrete monitoring bias decays like ``steps ** -0.5``; the coarse/fine
    gap estimates the bias of the fine value, so ``bias_band`` is formula-free.
    """

    estimate: Estimate
    coarse: Estimate
    steps: int

    @property
    def bias_band(self) -> float:
        return 1.5 * abs(self.coarse.value - self.estimate.value) + 1e-12

    def accepts(self, target: float, nsigma: float = 3.0) -> bool:
        """``target`` inside the ``nsigma`` score interval widened by ``bias_band``.

        The Wilson score interval replaces ``value +- nsigma * stderr`` so that
        cells with every path surviving (or none) are not given zero width.
        """
        e = self.estimate
        if e.successes is None:
            return abs(e.value - target) <= nsigma * e.stderr + self.bias_band
        conf = math.erf(nsigma / math.sqrt(2.0))
        lo, hi = wilson_interval(e.successes, e.n, conf)
        return lo - self.bias_band <= target <= hi + self.bias_band


def bridge_oracle_grid(points, steps: int, reps: int, seed, chunk: int = 4096) -> list[OracleResult]:
    """Discretised-bridge survival fractions for many ``(a, b, h, d)`` points on shared paths."""
    if steps < 64:
        raise ValueError("steps must be >= 64")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    points = [tuple(float(v) for v in p) for p in points]
    fine = np.zeros(len(points), dtype=np.int64)
    coarse = np.zeros(len(points), dtype=np.int64)
    plan = RunPlan.for_total(reps, seed, replicas=max(1, -(-reps // chunk)))
    r = np.linspace(0.0, 1.0, steps + 1)

    xs = np.array([a - h for a, b, h, d in points])
    ys = np.array([b - h for a, b, h, d in points])
    sig = np.sqrt(2.0 * np.array([d for a, b, h, d in points]))
    stride = 4 if steps % 4 == 0 else 1

    def replica(rng, m, _i):
        return _bridge_survival(standard_bridges(rng, m, steps), r, xs, ys, sig, stride)

    parts = run_replicas(plan, replica)
    for f, c in parts:
        fine += f
        coarse += c
    total = plan.total
    return [OracleResult(Estimate.from_counts(fine[j], total, seed=seed, label="bridge-oracle"),
                         Estimate.from_counts(coarse[j], total, seed=seed, label="bridge-oracle"), steps)
            for j in range(len(points))]


def bridge_oracle(a, b, h, d, steps: int, reps: int, seed) -> OracleResult:
    return bridge_oracle_grid([(a, b, h, d)], steps, reps, seed)[0]


def sample_cable_points(domain: LatticeDomain, values: np.ndarray, points, rng) -> np.ndarray:
    """Cable field at points ``(u, v, r)`` on edges given vertex values ``(samples, n_vertices)``.

    Linear interpolation plus a bridge of covariance ``2d (r ^ r' - r r')``
    per edge, shared by every requested point on that edge and independent
    across edges.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[1] == domain.n_interior:
        values = with_boundary(domain, values)
    pts = []
    for w in points:
        u, v, r = (w.u, w.v, w.r) if hasattr(w, "u") else w
        if u > v:
            u, v, r = v, u, 1.0 - r
        if (u, v) not in domain.edge_set:
            raise ValueError(f"({u}, {v}) is not an edge of the domain")
        pts.append((int(u), int(v), float(r)))
    out = np.empty((values.shape[0], len(pts)))
    groups: dict[tuple, list[int]] = {}
    for k, (u, v, r) in enumerate(pts):
        groups.setdefault((u, v), []).append(k)
    for (u, v), ks in groups.items():
        r = np.array([pts[k][2] for k in ks])
        cov = 2.0 * domain.d * (np.minimum.outer(r, r) - np.outer(r, r))
        lam, vec = np.linalg.eigh(cov)
        root = vec * np.sqrt(np.clip(lam, 0.0, None))
        noise = rng.standard_normal((values.shape[0], r.size)) @ root.T
        out[:, ks] = (1 - r) * values[:, [u]] + r * values[:, [v]] + noise
    return out


@dataclass(frozen=True)
class HeightSchedule:
    heights: tuple

    def __post_init__(self):
        hs = tuple(float(h) for h in self.heights)
        if not hs:
            raise ValueError("schedule must be nonempty")
        if any(not np.isfinite(h) or h < 0 for h in hs):
            raise ValueError("heights must be finite and nonnegative")
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise ValueError("heights must be strictly decreasing")
        object.__setattr__(self, "heights", hs)

    def __iter__(self):
        return iter(self.heights)

    def __len__(self):
        return len(self.heights)


def open_edges(domain: LatticeDomain, values: np.ndarray, h: float, uniforms: np.ndarray) -> np.ndarray:
    """Edge indicators from vertex values (boundary included) and per-edge uniforms.

    Reusing ``uniforms`` across heights couples the level sets monotonically.
    """
    e = domain.edges
    p = bridge_open_probability(values[..., e[:, 0]], values[..., e[:, 1]], h, domain.d)
    return uniforms < p


@dataclass(eq=False)
class FieldSample:
    """One field realisation and its cable level set at height ``h``.

    ``values`` covers every domain vertex; Dirichlet entries are zero.
    """

    domain: LatticeDomain
    values: np.ndarray
    h: float
    edge_open: np.ndarray
    seed: object = None

    @cached_property
    def vertex_open(self) -> np.ndarray:
        return self.values >= self.h

    def at_height(self, h: float, uniforms: np.ndarray) -> "FieldSample":
        return FieldSample(self.domain, self.values, h, open_edges(self.domain, self.values, h, uniforms), self.seed)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"# seed={self.seed} h={self.h} domain={self.domain.to_json()}"])
            w.writerow(["kind", "a", "b", "value"])
            for i, v in enumerate(self.values):
                w.writerow(["vertex", i, "", repr(float(v))])
            for (a, b), o in zip(self.domain.edges.tolist(), self.edge_open.tolist()):
                w.writerow(["edge", a, b, int(o)])


def extend_level_set(domain: LatticeDomain, values, h: float, seed=None, uniforms=None) -> FieldSample:
    """Cable level set: each edge independently open with the bridge-minimum law."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] == domain.n_interior:
        values = with_boundary(domain, values)
    if uniforms is None:
        uniforms = as_generator(seed).random(domain.n_edges)
    return FieldSample(domain, values, float(h), open_edges(domain, values, h, uniforms), seed)
