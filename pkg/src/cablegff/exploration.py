"""Exploration martingales, first-passage probabilities and the level-set stopping time."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla
from scipy import integrate
from scipy.stats import norm

from .geometry import LatticeDomain, RegionSpec, build_box, region_vertices
from .gff import OracleResult
from .mc import Estimate, RunPlan, run_replicas
from .percolation import estimate_crossing, origin_to_sphere
from .potential import GreenMatrix, green_after_exploration, harmonic_matrix, precision_matrix


def _ids(x) -> np.ndarray:
    return np.unique(np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=np.int64))


@dataclass
class ExplorationSequence:
    domain: LatticeDomain
    sets: list
    A: np.ndarray

    def __post_init__(self):
        self.sets = [_ids(s) for s in self.sets]
        self.A = _ids(self.A)
        if not self.sets:
            raise ValueError("exploration needs at least one set")
        if self.A.size == 0:
            raise ValueError("target set A must be nonempty")
        n = self.domain.n_interior
        for s in self.sets:
            if s.size and (s.min() < 0 or s.max() >= n):
                raise ValueError("explored sets must consist of interior vertices")
            if np.intersect1d(s, self.A).size:
                raise ValueError("A must be disjoint from every explored set")
        for a, b in zip(self.sets, self.sets[1:]):
            if np.setdiff1d(a, b).size:
                raise ValueError("explored sets must be nested")


@dataclass(frozen=True)
class StoppingTimeParams:
    """Barrier ``m t - b`` on ``[0, T]``; ``h``, ``phi0``, ``sigma2`` describe the level-set time."""

    m: float
    b: float
    T: float
    h: float | None = None
    phi0: float | None = None
    sigma2: float | None = None

    def __post_init__(self):
        vals = [v for v in (self.m, self.b, self.T, self.h, self.phi0, self.sigma2) if v is not None]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("parameters must be finite")
        if self.b <= 0 or self.T <= 0:
            raise ValueError("need b > 0 and T > 0")
        if self.sigma2 is not None and self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")

    @classmethod
    def level_set(cls, h: float, phi0: float, sigma2: float, T: float) -> "StoppingTimeParams":
        """Slope ``h`` and intercept ``(phi0 - h) / sigma2``; requires ``phi0 > h``."""
        return cls(h, (phi0 - h) / sigma2, T, h, phi0, sigma2)


def conditional_variance(domain: LatticeDomain, G: GreenMatrix, A, I) -> float:
    """``Var[X_A | field on I]`` with ``X_A`` the average over ``A``."""
    A, I = _ids(A), _ids(I)
    if A.size == 0:
        raise ValueError("A must be nonempty")
    if np.intersect1d(A, I).size:
        raise ValueError("A must be disjoint from I")
    GI = G if I.size == 0 else green_after_exploration(domain, I)
    return float(GI.matrix[np.ix_(A, A)].sum()) / A.size ** 2


def decomposition_residual(domain: LatticeDomain, G: GreenMatrix, Is, It) -> float:
    """Max entry of ``|(G_s - G_t) - H_t G_s|`` for nested ``Is <= It``.

    ``H_t`` is the hitting distribution of ``It``; hits on ``Is`` carry zero
    weight because ``G_s`` vanishes there.
    """
    Is, It = _ids(Is), _ids(It)
    if np.setdiff1d(Is, It).size:
        raise ValueError("need Is contained in It")
    n = domain.n_interior
    Gs = G.matrix if Is.size == 0 else green_after_exploration(domain, Is).matrix
    Gt = green_after_exploration(domain, It).matrix
    if It.size == 0:
        return float(np.abs(Gs - Gt).max())
    H = harmonic_matrix(domain, It)[:n]
    return float(np.abs((Gs - Gt) - H @ Gs[It]).max())


@dataclass
class QuadraticVariation:
    values: list[float]
    residual: float

    @property
    def nondecreasing(self) -> bool:
        return all(b >= a - 1e-12 for a, b in zip(self.values, self.values[1:]))


def quadratic_variation(domain: LatticeDomain, G: GreenMatrix, seq: ExplorationSequence,
                        check: bool = True) -> QuadraticVariation:
    """``<M_A>_t = Var[X_A | I_0] - Var[X_A | I_t]`` along the sequence.

    With ``check`` the harmonic-measure decomposition is evaluated at every
    step; a residual above 1e-10 raises.
    """
    v0 = conditional_variance(domain, G, seq.A, seq.sets[0])
    vals, worst = [], 0.0
    for s in seq.sets:
        vals.append(v0 - conditional_variance(domain, G, seq.A, s))
        if check:
            worst = max(worst, decomposition_residual(domain, G, seq.sets[0], s))
    if worst > 1e-10:
        raise RuntimeError(f"harmonic-measure decomposition residual {worst:.3e}")
    return QuadraticVariation(vals, worst)


def martingale_step(domain: LatticeDomain, G: GreenMatrix, A, I, values: dict) -> float:
    """``E[X_A | field on I]`` from supplied values on the explored set.

    Only vertices of ``I`` charged by the harmonic measure from ``A`` need values.
    """
    A, I = _ids(A), _ids(I)
    if I.size == 0:
        return 0.0
    H = harmonic_matrix(domain, I)[A]
    charged = I[(H > 0).any(axis=0)]
    missing = [int(w) for w in charged if int(w) not in values]
    if missing:
        raise KeyError(f"missing boundary values at vertices {missing}")
    phi = np.array([float(values.get(int(w), 0.0)) for w in I])
    return float((H @ phi).mean())


def first_passage_cdf(params: StoppingTimeParams) -> float:
    """``P[inf{t : B_t <= m t - b} <= T]`` (survivor-function form, clamped to [0, 1])."""
    m, b, T = params.m, params.b, params.T
    s = math.sqrt(T)
    first = norm.sf(b / s - m * s)
    log_second = 2 * b * m + norm.logsf(b / s + m * s)
    p = first + (math.exp(log_second) if log_second < 700 else math.inf)
    return float(min(max(p, 0.0), 1.0))


def first_passage_oracle_grid(points, T: float, paths: int, steps: int, seed: int,
                              chunk: int = 512) -> list[OracleResult]:
    """Euler Brownian paths on ``[0, T]`` shared across all ``(m, b)`` points.

    The fine value checks every step; the coarse value checks every fourth.
    """
    if steps < 1000:
        raise ValueError("steps must be >= 1000")
    if paths < 1:
        raise ValueError("paths must be >= 1")
    points = [(float(m), float(b)) for m, b in points]
    slopes = sorted({m for m, _ in points})
    t = np.linspace(0.0, T, steps + 1)[1:]
    plan = RunPlan.for_total(paths, seed, replicas=max(1, -(-paths // chunk)))

    def replica(rng, n, _i):
        B = np.cumsum(rng.standard_normal((n, steps)) * math.sqrt(T / steps), axis=1)
        fine = np.zeros(len(points), dtype=np.int64)
        coarse = np.zeros(len(points), dtype=np.int64)
        for m in slopes:
            Y = B - m * t
            lo_f = np.minimum(Y.min(axis=1), 0.0)
            lo_c = np.minimum(Y[:, 3::4].min(axis=1), 0.0)
            for j, (mm, b) in enumerate(points):
                if mm == m:
                    fine[j] = (lo_f <= -b).sum()
                    coarse[j] = (lo_c <= -b).sum()
        return fine, coarse

    parts = run_replicas(plan, replica)
    fine = sum(p[0] for p in parts)
    coarse = sum(p[1] for p in parts)
    return [OracleResult(Estimate.from_counts(fine[j], plan.total, seed=seed, label="first-passage"),
                         Estimate.from_counts(coarse[j], plan.total, seed=seed, label="first-passage"), steps)
            for j in range(len(points))]


def first_passage_mc_oracle(params: StoppingTimeParams, paths: int, steps: int, seed: int) -> OracleResult:
    return first_passage_oracle_grid([(params.m, params.b)], params.T, paths, steps, seed)[0]


def tau_tail(h: float, T: float, sigma2: float, var0: float, nodes: int = 161) -> float:
    """``P[tau_h >= T]`` averaged over ``phi0 ~ N(0, var0)``; ``tau_h = 0`` when ``phi0 <= h``."""
    sd = math.sqrt(var0)
    if h / sd > 40:
        return 0.0

    def tail(phi0):
        if phi0 <= h:
            return 0.0
        return 1.0 - first_passage_cdf(StoppingTimeParams.level_set(h, phi0, sigma2, T))

    lo = max(h, -12 * sd)
    val, _ = integrate.quad(lambda x: tail(x) * norm.pdf(x, scale=sd), lo, max(lo, 12 * sd) + 1e-9,
                            limit=nodes)
    return float(min(max(val, 0.0), 1.0))


def _hitting_probability(domain: LatticeDomain, S, x: int) -> float:
    """``P_x(walk hits S before the Dirichlet layer)`` by conjugate gradients."""
    S = _ids(S)
    if x in set(S.tolist()):
        return 1.0
    n = domain.n_interior
    M = precision_matrix(domain, absorbed=S)
    rhs = np.zeros(n)
    e = domain.edges
    inS = np.zeros(domain.n_vertices, dtype=bool)
    inS[S] = True
    for a, b in ((0, 1), (1, 0)):
        sel = inS[e[:, b]] & ~inS[e[:, a]] & (e[:, a] < n)
        np.add.at(rhs, e[sel, a], 1.0 / (2 * domain.d))
    rhs[S] = 1.0
    h, info = spla.cg(M, rhs, rtol=1e-12, maxiter=20000)
    if info:
        raise RuntimeError("harmonic solve did not converge")
    return float(h[x])


def _green_column(domain: LatticeDomain, v: int) -> np.ndarray:
    rhs = np.zeros(domain.n_interior)
    rhs[v] = 1.0
    g, info = spla.cg(precision_matrix(domain), rhs, rtol=1e-12, maxiter=20000)
    if info:
        raise RuntimeError("Green solve did not converge")
    return g


def axis_segments(domain: LatticeDomain, N: int) -> list[tuple[str, np.ndarray]]:
    """Straight segments from the origin to the sphere of radius N along each half-axis."""
    out = []
    for j in range(domain.dim):
        for sgn in (1, -1):
            pts = []
            for t in range(N + 1):
                c = [0] * domain.dim
                c[j] = sgn * t
                pts.append(domain.vertex(c))
            out.append((f"{'+' if sgn > 0 else '-'}e{j}", np.array(pts)))
    return out


@dataclass
class TauReport:
    N: int
    h: float
    K: int
    f1: float
    f2: float
    lower: float
    upper: float
    p_hat: Estimate
    sigma2: float
    flagged: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"N": self.N, "h": self.h, "K": self.K, "f1_hat": self.f1, "f2_hat": self.f2,
                "P_tau_ge_f1": self.lower, "P_tau_ge_f2": self.upper, "p_hat": self.p_hat.as_row(),
                "sigma2": self.sigma2, "flagged": self.flagged, "notes": self.notes}


def tau_h_percolation_bounds(d: int, h: float, K_far: int, N: int, reps: int, seed: int,
                             sigma2: float | None = None, enclosure: float = 1.5) -> TauReport:
    """Finite-K stopping-time columns next to the Monte Carlo crossing probability.

    ``Hm(x, S)`` is read as the probability that the walk from ``x`` hits ``S``
    before leaving the enlarged box ``[-(K + N), K + N]^d``, with
    ``x = K e_0``.  ``f2`` takes the infimum over the half-axis segments from
    the origin to the sphere of radius N.
    """
    if not 0 < N < K_far:
        raise ValueError("need 0 < N < K_far")
    big = build_box(d, K_far + N)
    x = big.vertex((K_far,) + (0,) * (d - 1))
    o = big.vertex((0,) * d)
    g0 = _green_column(big, o)
    Gox, G00 = float(g0[x]), float(g0[o])
    notes = ["Hm(x, S): hitting probability of S before exiting the enlarged box"]
    if Gox <= 0:
        nan = float("nan")
        return TauReport(N, h, K_far, nan, nan, nan, nan, Estimate.empty("crossing"), nan, True,
                         notes + ["far vertex disconnected from the origin"])
    sigma2 = G00 if sigma2 is None else float(sigma2)
    hm0 = _hitting_probability(big, [o], x)
    ball = region_vertices(big, RegionSpec.box((0,) * d, N))
    f1 = (_hitting_probability(big, ball, x) - hm0) / Gox
    f2 = min((_hitting_probability(big, seg, x) - hm0) / Gox for _, seg in axis_segments(big, N))
    lower = tau_tail(h, f1, sigma2, G00)
    upper = tau_tail(h, f2, sigma2, G00)
    dom = build_box(d, math.ceil(enclosure * N))
    p = estimate_crossing(dom, origin_to_sphere(dom, N, h), reps, seed)
    return TauReport(N, h, K_far, f1, f2, lower, upper, p, sigma2, False, notes)
