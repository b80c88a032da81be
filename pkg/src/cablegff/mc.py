"""Seeded replica execution, streaming statistics and confidence intervals.

Every estimator in the package runs through :func:`run_replicas`: replica
``i`` draws from a generator seeded by ``SeedSequence(seed).spawn(...)[i]``,
replicas never communicate, and per-replica results are reduced in replica
order.  The output therefore does not depend on how many worker threads
executed the replicas.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats

WORKERS_ENV = "CABLEGFF_WORKERS"
GENERATORS = {"PCG64": np.random.PCG64, "Philox": np.random.Philox, "SFC64": np.random.SFC64}


class ReplicaError(RuntimeError):
    """A trial raised inside replica ``index``."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"replica {index} failed: {cause!r}")
        self.index = index


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    if trials < 1 or successes < 0 or successes > trials:
        raise ValueError(f"invalid counts: {successes}/{trials}")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    z = stats.norm.ppf(0.5 + confidence / 2.0)
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z / denom * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials))
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == trials else min(1.0, center + half)
    return float(lo), float(hi)


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo result.

    Bernoulli estimates carry ``successes`` and a Wilson interval; mean
    estimates carry running sums and a normal interval.  ``label`` names the
    experiment so that unrelated estimates cannot be merged by accident.
    """

    value: float
    stderr: float
    lo: float
    hi: float
    n: int
    successes: int | None = None
    seed: int | None = None
    label: str = ""
    total: float = 0.0
    total_sq: float = 0.0

    @property
    def kind(self) -> str:
        return "bernoulli" if self.successes is not None else "mean"

    @classmethod
    def empty(cls, label: str = "", kind: str = "bernoulli", seed: int | None = None) -> "Estimate":
        nan = float("nan")
        return cls(nan, nan, nan, nan, 0, 0 if kind == "bernoulli" else None, seed, label)

    @classmethod
    def from_counts(cls, successes: int, n: int, *, seed=None, label="", confidence=0.95) -> "Estimate":
        successes, n = int(successes), int(n)
        if n == 0:
            return cls.empty(label, "bernoulli", seed)
        p = successes / n
        lo, hi = wilson_interval(successes, n, confidence)
        return cls(p, math.sqrt(p * (1 - p) / n), lo, hi, n, successes, seed, label)

    @classmethod
    def from_sums(cls, total: float, total_sq: float, n: int, *, seed=None, label="") -> "Estimate":
        n = int(n)
        if n == 0:
            return cls.empty(label, "mean", seed)
        mean = total / n
        var = max(total_sq / n - mean * mean, 0.0) * n / (n - 1) if n > 1 else 0.0
        se = math.sqrt(var / n)
        return cls(mean, se, mean - 1.96 * se, mean + 1.96 * se, n, None, seed, label, float(total), float(total_sq))

    @classmethod
    def from_samples(cls, samples, *, seed=None, label="") -> "Estimate":
        x = np.asarray(samples, dtype=float)
        return cls.from_sums(float(x.sum()), float((x * x).sum()), x.size, seed=seed, label=label)

    @property
    def defined(self) -> bool:
        return self.n > 0

    def as_row(self) -> dict[str, Any]:
        return {"value": self.value, "stderr": self.stderr, "ci_lo": self.lo, "ci_hi": self.hi,
                "n": self.n, "successes": self.successes, "seed": self.seed}


def merge(e1: Estimate, e2: Estimate) -> Estimate:
    if e1.label != e2.label:
        raise ValueError(f"cannot merge estimates of {e1.label!r} and {e2.label!r}")
    if e1.n == 0:
        return replace(e2, seed=e2.seed if e2.seed is not None else e1.seed)
    if e2.n == 0:
        return e1
    if e1.kind != e2.kind:
        raise ValueError("cannot merge Bernoulli and mean estimates")
    seed = e1.seed if e1.seed == e2.seed else None
    if e1.kind == "bernoulli":
        return Estimate.from_counts(e1.successes + e2.successes, e1.n + e2.n, seed=seed, label=e1.label)
    return Estimate.from_sums(e1.total + e2.total, e1.total_sq + e2.total_sq, e1.n + e2.n,
                              seed=seed, label=e1.label)


@dataclass(frozen=True)
class RunPlan:
    replicas: int
    samples: int
    seed: int
    chunking: str = "replica"
    generator: str = "PCG64"

    def __post_init__(self):
        if self.replicas < 1 or self.samples < 1:
            raise ValueError("replica and sample counts must be >= 1")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator family {self.generator!r}")

    @classmethod
    def for_total(cls, total: int, seed: int, replicas: int | None = None, **kw) -> "RunPlan":
        """Split ``total`` samples over replicas of equal size (rounding up)."""
        if replicas is None:
            replicas = max(1, min(16, total // 256))
        return cls(replicas, -(-total // replicas), seed, **kw)

    @property
    def total(self) -> int:
        return self.replicas * self.samples

    def generators(self) -> list[np.random.Generator]:
        bitgen = GENERATORS[self.generator]
        children = np.random.SeedSequence(self.seed).spawn(self.replicas)
        return [np.random.Generator(bitgen(c)) for c in children]


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def run_replicas(plan: RunPlan, fn: Callable[[np.random.Generator, int, int], Any],
                 workers: int | None = None, indices: Sequence[int] | None = None) -> list:
    """Call ``fn(rng, samples, index)`` once per replica; results in replica order."""
    rngs = plan.generators()
    if indices is None:
        indices = range(plan.replicas)
    indices = list(indices)
    workers = worker_count() if workers is None else workers

    def call(i):
        try:
            return fn(rngs[i], plan.samples, i)
        except ReplicaError:
            raise
        except Exception as exc:
            raise ReplicaError(i, exc) from exc

    if workers <= 1 or len(indices) <= 1:
        return [call(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(call, indices))


def run_counts(plan: RunPlan, trial, workers=None, indices=None) -> np.ndarray:
    """Sum integer count vectors returned by ``trial(rng, n, index)`` over replicas."""
    parts = run_replicas(plan, trial, workers, indices)
    out = np.zeros_like(np.asarray(parts[0], dtype=np.int64))
    for p in parts:
        out = out + np.asarray(p, dtype=np.int64)
    return out


def run_bernoulli(plan: RunPlan, trial, label: str = "", workers=None, indices=None) -> Estimate:
    """Bernoulli estimate from ``trial(rng, n) -> bool array or success count``."""

    def count(rng, n, _i):
        out = trial(rng, n)
        if np.ndim(out) == 0:
            k = int(out)
            if not 0 <= k <= n:
                raise ValueError(f"trial returned {k} successes out of {n}")
            return k
        out = np.asarray(out, dtype=bool)
        if out.shape != (n,):
            raise ValueError(f"trial returned shape {out.shape}, expected ({n},)")
        return int(out.sum())

    parts = run_replicas(plan, count, workers, indices)
    n = plan.samples * len(parts)
    return Estimate.from_counts(sum(parts), n, seed=plan.seed, label=label)


def run_mean(plan: RunPlan, trial, label: str = "", workers=None) -> Estimate:
    """Mean estimate from ``trial(rng, n) -> array of n real samples``."""
    parts = run_replicas(plan, lambda rng, n, i: np.asarray(trial(rng, n), dtype=float), workers)
    total = 0.0
    total_sq = 0.0
    for p in parts:
        total += float(p.sum())
        total_sq += float((p * p).sum())
    return Estimate.from_sums(total, total_sq, plan.samples * len(parts), seed=plan.seed, label=label)


@dataclass
class RatioEstimate:
    """Ratio of two means with a delta-method interval."""

    value: float
    stderr: float
    lo: float
    hi: float
    numerator: Estimate
    denominator: Estimate
    flagged: bool = False
    notes: list[str] = field(default_factory=list)


def ratio_from_blocks(num_blocks, den_blocks, label: str = "", seed=None) -> RatioEstimate:
    """Delta-method ratio of means from paired per-block averages.

    Blocks are treated as i.i.d.; callers pass per-replica (or per-chain)
    averages when samples inside a block are correlated.
    """
    x = np.asarray(num_blocks, dtype=float)
    y = np.asarray(den_blocks, dtype=float)
    k = x.size
    num = Estimate.from_samples(x, seed=seed, label=label + ":num")
    den = Estimate.from_samples(y, seed=seed, label=label + ":den")
    if k < 2 or den.value == 0:
        return RatioEstimate(float("nan"), float("nan"), float("nan"), float("nan"), num, den, True,
                             ["denominator is zero or too few blocks"])
    r = num.value / den.value
    cov = np.cov(x, y, ddof=1)
    var = (cov[0, 0] - 2 * r * cov[0, 1] + r * r * cov[1, 1]) / (k * den.value ** 2)
    se = math.sqrt(max(var, 0.0))
    out = RatioEstimate(r, se, r - 1.96 * se, r + 1.96 * se, num, den)
    if den.lo <= 0.0:
        out.flagged = True
        out.notes.append("denominator interval contains 0")
    return out


@dataclass
class Association:
    """``P[A and B] - P[A] P[B]`` with a delta-method standard error."""

    p_a: float
    p_b: float
    p_ab: float
    value: float
    stderr: float
    blocks: int

    def holds(self, nsigma: float = 3.0) -> bool:
        """Positive association not rejected: ``value >= -nsigma * stderr``."""
        return self.value >= -nsigma * self.stderr

    def row(self) -> dict:
        return {"p_a": self.p_a, "p_b": self.p_b, "p_ab": self.p_ab, "covariance": self.value,
                "stderr": self.stderr, "blocks": self.blocks, "holds": self.holds()}


def association_from_blocks(a_blocks, b_blocks, ab_blocks) -> Association:
    """Block means of ``1_A``, ``1_B`` and ``1_{A and B}`` (single samples are blocks of size one)."""
    a = np.asarray(a_blocks, dtype=float)
    b = np.asarray(b_blocks, dtype=float)
    ab = np.asarray(ab_blocks, dtype=float)
    k = a.size
    if k < 2 or b.size != k or ab.size != k:
        raise ValueError("need >= 2 equally many blocks")
    pa, pb, pab = a.mean(), b.mean(), ab.mean()
    infl = ab - pb * a - pa * b
    se = float(np.std(infl, ddof=1) / math.sqrt(k))
    return Association(float(pa), float(pb), float(pab), float(pab - pa * pb), se, k)
