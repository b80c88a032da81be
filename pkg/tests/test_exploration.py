import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from cablegff.exploration import (ExplorationSequence, StoppingTimeParams, conditional_variance,
                                  decomposition_residual, first_passage_cdf, first_passage_mc_oracle,
                                  martingale_step, quadratic_variation, tau_h_percolation_bounds, tau_tail)
from cablegff.geometry import build_box, build_from_vertices
from cablegff.potential import green


@pytest.fixture(scope="module")
def box5():
    dom = build_box(2, 2)
    return dom, green(dom)


def neighbors(dom, v):
    out = set()
    for a, b in dom.edges.tolist():
        if a == v:
            out.add(b)
        elif b == v:
            out.add(a)
    return sorted(w for w in out if w < dom.n_interior)


def conditional_mean(G, A, I, vals):
    """Gaussian conditioning by a direct solve."""
    GAI = G[np.ix_(A, I)]
    GII = G[np.ix_(I, I)]
    return float((GAI @ np.linalg.solve(GII, vals)).mean())


def test_conditional_variance_examples(box5):
    dom, G = box5
    v = dom.vertex((0, 0))
    assert conditional_variance(dom, G, [v], []) == pytest.approx(G.matrix[v, v])
    assert conditional_variance(dom, G, [v], neighbors(dom, v)) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        conditional_variance(dom, G, [v], [v])
    with pytest.raises(ValueError):
        conditional_variance(dom, G, [], [1])


def test_conditional_variance_is_schur_complement(box5):
    dom, G = box5
    A, I = [0, 4], [1, 7, 12]
    M = G.matrix
    S = M[np.ix_(A, A)] - M[np.ix_(A, I)] @ np.linalg.solve(M[np.ix_(I, I)], M[np.ix_(I, A)])
    assert conditional_variance(dom, G, A, I) == pytest.approx(S.sum() / 4, abs=1e-12)


@given(order=st.permutations(list(range(1, 25))), k=st.integers(0, 10))
def test_variance_nonincreasing_under_more_conditioning(box5, order, k):
    dom, G = box5
    I_small, I_big = order[:k], order[:k + 3]
    assert conditional_variance(dom, G, [0], I_big) <= conditional_variance(dom, G, [0], I_small) + 1e-12


def columns_sequence(dom, A):
    """Explore column by column from the side away from A."""
    inner = np.arange(dom.n_interior)
    xs = dom.coords[inner, 0]
    sets, acc = [[]], []
    for c in sorted(set(xs.tolist()))[:-1]:
        acc = acc + [int(v) for v in inner[xs == c] if v not in A]
        sets.append(list(acc))
    return ExplorationSequence(dom, sets, A)


def test_quadratic_variation_matches_two_solves(box5):
    dom, G = box5
    A = [dom.vertex((2, -2)), dom.vertex((2, -1))]
    seq = columns_sequence(dom, A)
    qv = quadratic_variation(dom, G, seq)
    assert qv.nondecreasing and qv.residual <= 1e-10
    M = G.matrix
    for s, q in zip(seq.sets, qv.values):
        if len(s):
            S = M[np.ix_(A, A)] - M[np.ix_(A, s)] @ np.linalg.solve(M[np.ix_(s, s)], M[np.ix_(s, A)])
            var = S.sum() / 4
        else:
            var = M[np.ix_(A, A)].sum() / 4
        assert q == pytest.approx(M[np.ix_(A, A)].sum() / 4 - var, abs=1e-10)
    assert qv.values[-1] <= conditional_variance(dom, G, A, []) + 1e-12


def test_quadratic_variation_constant_sequence(box5):
    dom, G = box5
    qv = quadratic_variation(dom, G, ExplorationSequence(dom, [[3, 4], [3, 4], [3, 4]], [0]))
    assert qv.values == [0.0, 0.0, 0.0]


def test_single_step_is_variance_difference(box5):
    dom, G = box5
    seq = ExplorationSequence(dom, [[], [5, 6]], [0])
    qv = quadratic_variation(dom, G, seq)
    assert qv.values[1] == pytest.approx(conditional_variance(dom, G, [0], []) -
                                         conditional_variance(dom, G, [0], [5, 6]))


def test_exploration_sequence_validation(box5):
    dom, _ = box5
    with pytest.raises(ValueError):
        ExplorationSequence(dom, [[1, 2], [1]], [0])
    with pytest.raises(ValueError):
        ExplorationSequence(dom, [[0]], [0])
    with pytest.raises(ValueError):
        ExplorationSequence(dom, [], [0])
    with pytest.raises(ValueError):
        ExplorationSequence(dom, [[dom.n_vertices - 1]], [0])


def test_decomposition_residual_small(box5):
    dom, G = box5
    assert decomposition_residual(dom, G, [1], [1, 2, 9, 17]) <= 1e-10
    with pytest.raises(ValueError):
        decomposition_residual(dom, G, [3], [1, 2])


def test_martingale_step_examples(box5):
    dom, G = box5
    assert martingale_step(dom, G, [0], [1, 2], {1: 0.0, 2: 0.0}) == 0.0
    assert martingale_step(dom, G, [0], [], {}) == 0.0


def test_martingale_step_on_explored_target():
    dom = build_box(2, 1)
    G = green(dom)
    vals = {1: 0.4, 2: -1.2, 5: 2.0}
    assert martingale_step(dom, G, [1, 2], [1, 2, 5], vals) == pytest.approx(-0.4)


def test_martingale_step_matches_conditional_mean():
    dom = build_box(2, 1)
    G = green(dom)
    I = [0, 3, 5, 8]
    vals = {0: 0.7, 3: -0.2, 5: 1.1, 8: 0.3}
    A = [4]
    direct = conditional_mean(G.matrix, A, I, np.array([vals[i] for i in I]))
    assert martingale_step(dom, G, A, I, vals) == pytest.approx(direct, abs=1e-12)
    with pytest.raises(KeyError):
        martingale_step(dom, G, A, I, {0: 1.0})


def test_martingale_property_by_resampling():
    dom = build_box(2, 2)
    G = green(dom)
    M = G.matrix
    A, I0, I1 = [0], [6, 7], [6, 7, 11, 12, 13]
    rng = np.random.default_rng(4)
    phi0 = rng.standard_normal(2)
    new = [11, 12, 13]
    # conditional law of the new vertices given the old ones
    K = np.linalg.solve(M[np.ix_(I0, I0)], M[np.ix_(I0, new)])
    mu = K.T @ phi0
    C = M[np.ix_(new, new)] - M[np.ix_(new, I0)] @ K
    draws = rng.multivariate_normal(mu, C, size=4000)
    ms = []
    for row in draws:
        vals = dict(zip(I0, phi0)) | dict(zip(new, row))
        ms.append(martingale_step(dom, G, A, I1, vals))
    ms = np.array(ms)
    target = martingale_step(dom, G, A, I0, dict(zip(I0, phi0)))
    assert abs(ms.mean() - target) <= 4 * ms.std() / math.sqrt(ms.size)


def test_first_passage_examples():
    assert first_passage_cdf(StoppingTimeParams(0.0, 1.0, 1.0)) == pytest.approx(2 * norm.sf(1.0), abs=1e-12)
    assert first_passage_cdf(StoppingTimeParams(0.0, 1.0, 1.0)) == pytest.approx(0.31731, abs=5e-6)
    assert first_passage_cdf(StoppingTimeParams(0.3, 1e-9, 1.0)) == pytest.approx(1.0, abs=1e-6)
    assert first_passage_cdf(StoppingTimeParams(0.5, 1.0, 1e6)) == pytest.approx(1.0, abs=1e-9)
    assert first_passage_cdf(StoppingTimeParams(200.0, 5.0, 1.0)) == 1.0
    for bad in [(math.nan, 1, 1), (0, 0, 1), (0, 1, 0), (0, math.inf, 1)]:
        with pytest.raises(ValueError):
            StoppingTimeParams(*bad)


@given(m=st.floats(-2, 2), b=st.floats(0.01, 3), T=st.floats(0.01, 5), dT=st.floats(0, 3), db=st.floats(0, 2))
def test_first_passage_monotonicity(m, b, T, dT, db):
    p = first_passage_cdf(StoppingTimeParams(m, b, T))
    assert 0.0 <= p <= 1.0
    assert first_passage_cdf(StoppingTimeParams(m, b, T + dT)) >= p - 1e-12
    assert first_passage_cdf(StoppingTimeParams(m, b + db, T)) <= p + 1e-12


def test_first_passage_oracle():
    r = first_passage_mc_oracle(StoppingTimeParams(0.0, 1.0, 1.0), 100_000, 10_000, 3)
    assert r.accepts(0.31731050786291404)
    assert first_passage_mc_oracle(StoppingTimeParams(0.0, 10.0, 0.01), 2000, 1000, 1).estimate.value == 0.0
    assert first_passage_mc_oracle(StoppingTimeParams(0.0, 1e-6, 1.0), 2000, 1000, 1).estimate.value > 0.97


def test_tau_tail_limits():
    assert tau_tail(1e6, 1.0, 1.0, 1.0) == 0.0
    assert tau_tail(-1e6, 1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-6)


def test_tau_report_extremes():
    hi = tau_h_percolation_bounds(2, 1e6, 4, 2, 200, 1)
    assert (hi.lower, hi.upper, hi.p_hat.value) == (0.0, 0.0, 0.0)
    lo = tau_h_percolation_bounds(2, -1e6, 4, 2, 200, 1)
    assert lo.lower == pytest.approx(1.0, abs=1e-6) and lo.upper == pytest.approx(1.0, abs=1e-6)
    assert lo.p_hat.value == 1.0
    assert not lo.flagged and set(lo.to_dict()) >= {"f1_hat", "f2_hat", "p_hat"}
    with pytest.raises(ValueError):
        tau_h_percolation_bounds(2, 0.0, 2, 3, 10, 1)


def test_tau_report_zero_height():
    r = tau_h_percolation_bounds(3, 0.0, 8, 2, 500, 2)
    assert 0 < r.f2 <= r.f1
    assert 0.0 <= r.lower <= 1.0 and 0.0 <= r.upper <= 1.0


def test_isolated_vertex_domain():
    dom = build_from_vertices(2, [(0, 0)])
    assert green(dom).matrix[0, 0] == pytest.approx(1.0)
