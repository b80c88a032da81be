import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cablegff.mc import (Estimate, ReplicaError, RunPlan, association_from_blocks, merge, ratio_from_blocks,
                         run_bernoulli, run_mean, run_replicas, wilson_interval)
from scipy import stats


def coin(rng, n):
    return rng.random(n) < 0.5


def test_wilson_examples():
    lo, hi = wilson_interval(50, 100, 0.95)
    assert (lo, hi) == pytest.approx((0.40383, 0.59617), abs=5e-6)
    assert wilson_interval(0, 17)[0] == 0.0
    assert wilson_interval(17, 17)[1] == 1.0


def test_wilson_matches_statsmodels_free_formula():
    # independent form: roots of (p - x)^2 = z^2 x (1 - x) / n
    k, n, z = 7, 40, stats.norm.ppf(0.975)
    p = k / n
    a = 1 + z * z / n
    b = -(2 * p + z * z / n)
    c = p * p
    roots = sorted(np.roots([a, b, c]).real)
    assert wilson_interval(k, n) == pytest.approx(tuple(roots), abs=1e-12)


@pytest.mark.parametrize("k,n,conf", [(-1, 5, 0.95), (6, 5, 0.95), (0, 0, 0.95), (1, 5, 1.0), (1, 5, 0.0)])
def test_wilson_rejects(k, n, conf):
    with pytest.raises(ValueError):
        wilson_interval(k, n, conf)


def test_run_bernoulli_trivial_trials():
    plan = RunPlan(3, 100, 1)
    yes = run_bernoulli(plan, lambda rng, n: np.ones(n, bool))
    assert (yes.value, yes.stderr, yes.hi) == (1.0, 0.0, 1.0)
    no = run_bernoulli(plan, lambda rng, n: 0)
    assert no.value == 0.0 and no.lo == 0.0


def test_fair_coin():
    e = run_bernoulli(RunPlan(4, 250_000, 9), coin, "coin")
    assert abs(e.value - 0.5) <= 3 * 0.5 / math.sqrt(1e6)
    assert e.lo <= 0.5 <= e.hi


def test_shards_merge_to_full_run():
    plan = RunPlan(4, 250_000, 21)
    full = run_bernoulli(plan, coin, "coin")
    parts = [run_bernoulli(plan, coin, "coin", indices=[i]) for i in range(4)]
    merged = parts[0]
    for p in parts[1:]:
        merged = merge(merged, p)
    assert merged == full


@pytest.mark.parametrize("workers", [1, 2, 8])
def test_worker_count_does_not_change_results(workers):
    plan = RunPlan(8, 1000, 3)
    ref = run_bernoulli(plan, coin, workers=1)
    assert run_bernoulli(plan, coin, workers=workers) == ref
    assert run_mean(plan, lambda rng, n: rng.normal(size=n), workers=workers) == \
        run_mean(plan, lambda rng, n: rng.normal(size=n), workers=1)


def test_generator_family_changes_stream():
    a = run_mean(RunPlan(2, 50, 3), lambda rng, n: rng.random(n))
    b = run_mean(RunPlan(2, 50, 3, generator="Philox"), lambda rng, n: rng.random(n))
    assert a.value != b.value
    with pytest.raises(ValueError):
        RunPlan(1, 1, 0, generator="MT")
    with pytest.raises(ValueError):
        RunPlan(0, 1, 0)


def test_trial_failure_reports_replica():
    def trial(rng, n, i):
        if i == 2:
            raise RuntimeError("boom")
        return 0
    with pytest.raises(ReplicaError) as info:
        run_replicas(RunPlan(4, 1, 0), trial)
    assert info.value.index == 2


def test_bad_trial_output_rejected():
    with pytest.raises(ReplicaError):
        run_bernoulli(RunPlan(1, 5, 0), lambda rng, n: 7)
    with pytest.raises(ReplicaError):
        run_bernoulli(RunPlan(1, 5, 0), lambda rng, n: np.ones(3, bool))


def test_merge_empty_and_mismatch():
    e = Estimate.from_counts(3, 10, label="x")
    assert merge(e, Estimate.empty("x")) == e
    assert merge(Estimate.empty("x"), e).value == e.value
    with pytest.raises(ValueError):
        merge(e, Estimate.from_counts(3, 10, label="y"))
    with pytest.raises(ValueError):
        merge(e, Estimate.from_sums(1.0, 1.0, 2, label="x"))


counts = st.integers(1, 500).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n)))


@given(a=counts, b=counts, c=counts)
def test_bernoulli_merge_is_commutative_and_associative(a, b, c):
    ea, eb, ec = (Estimate.from_counts(k, n, label="t") for k, n in (a, b, c))
    assert merge(ea, eb) == merge(eb, ea)
    assert merge(merge(ea, eb), ec) == merge(ea, merge(eb, ec))
    m = merge(ea, eb)
    assert m.lo <= m.value <= m.hi and m.stderr >= 0


samples = st.lists(st.integers(-50, 50), min_size=1, max_size=30)


@given(a=samples, b=samples, c=samples)
def test_mean_merge_properties(a, b, c):
    ea, eb, ec = (Estimate.from_samples(x, label="m") for x in (a, b, c))
    assert merge(ea, eb) == merge(eb, ea)
    # integer-valued sums are exact in floating point
    assert merge(merge(ea, eb), ec) == merge(ea, merge(eb, ec))
    assert merge(merge(ea, eb), ec).value == pytest.approx(np.mean(a + b + c))


def test_plan_for_total():
    p = RunPlan.for_total(1000, 5, replicas=3)
    assert p.replicas == 3 and p.total >= 1000


def test_ratio_from_blocks():
    rng = np.random.default_rng(0)
    y = rng.uniform(1, 2, 200)
    r = ratio_from_blocks(0.5 * y + rng.normal(0, 0.01, 200), y)
    assert abs(r.value - 0.5) < 3 * r.stderr + 1e-3 and not r.flagged
    assert ratio_from_blocks([1.0, 1.0], [0.0, 0.0]).flagged


def test_association():
    rng = np.random.default_rng(1)
    z = rng.random(20_000)
    a, b = z < 0.5, z < 0.3
    s = association_from_blocks(a, b, a & b)
    assert s.value == pytest.approx(0.3 - 0.5 * 0.3, abs=4 * s.stderr)
    assert s.holds()
    neg = association_from_blocks(a, ~a, np.zeros_like(a))
    assert not neg.holds()
    with pytest.raises(ValueError):
        association_from_blocks([1], [1], [1])
