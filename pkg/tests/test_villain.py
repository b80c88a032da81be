import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from cablegff.geometry import build_grid
from cablegff.villain import (S_PLUS_MINUS_I, AvoidSet, HeatBath, VillainState, angle_association, arc_kernel,
                              avoid_oracle_grid, boundary_connection, circle_distance, circle_kernel,
                              correlation_ratio, edge_avoid_probability, gibbs_sample, integrated_autocorrelation,
                              joint_atoms, joint_edge_indicators, sample_joint, villain_clusters,
                              villain_iic_scan)

angles = st.floats(0, 2 * math.pi, exclude_max=True)
times = st.floats(0.02, 6.0)


def gauss(t, x):
    return np.exp(-x * x / (2 * t)) / np.sqrt(2 * np.pi * t)


def arc_reference(t, x, y, L, n=60):
    """Plain image sum on an interval of length L."""
    k = np.arange(-n, n + 1)
    return float(np.sum(gauss(t, x - y + 2 * k * L) - gauss(t, x + y + 2 * k * L)))


def test_circle_kernel_rejects_bad_time():
    for t in (0.0, -1.0, math.nan):
        with pytest.raises(ValueError):
            circle_kernel(t, 0.0, 1.0)


@given(t=times, a=angles, b=angles)
def test_circle_kernel_symmetry(t, a, b):
    assert circle_kernel(t, a, b) == circle_kernel(t, b, a)


@pytest.mark.parametrize("t", [0.05, 0.3, 1.0, 2.5, 8.0])
def test_circle_kernel_normalisation(t):
    val, _ = integrate.quad(lambda u: circle_kernel(t, 0.4, u), 0, 2 * math.pi, epsabs=1e-13, limit=200,
                            points=[0.4])
    assert val == pytest.approx(1.0, abs=1e-10)


def test_image_and_dual_series_agree():
    assert circle_kernel(1.0, 0.0, math.pi, "images") == pytest.approx(circle_kernel(1.0, 0.0, math.pi, "dual"),
                                                                       abs=1e-12)
    rng = np.random.default_rng(0)
    for t, d in zip(rng.uniform(0.2, 4, 20), rng.uniform(-math.pi, math.pi, 20)):
        assert abs(circle_kernel(t, 0.0, d, "images") - circle_kernel(t, 0.0, d, "dual")) <= 1e-12


@pytest.mark.parametrize("s,t", [(0.3, 0.3), (0.3, 1.0), (1.0, 0.3), (1.0, 1.0)])
def test_chapman_kolmogorov(s, t):
    a, b = 0.2, 2.9
    val, _ = integrate.quad(lambda u: circle_kernel(s, a, u) * circle_kernel(t, u, b), 0, 2 * math.pi,
                            epsabs=1e-13, limit=200)
    assert val == pytest.approx(circle_kernel(s + t, a, b), abs=1e-8)


def test_circle_distance():
    assert circle_distance(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
    assert circle_distance(0.0, math.pi) == pytest.approx(math.pi)


def test_arc_kernel_examples():
    arc = (-math.pi / 2, math.pi / 2)
    assert arc_kernel(1.0, -math.pi / 2, 0.3, arc) == 0.0
    assert arc_kernel(1.0, 0.0, 0.0, arc) == pytest.approx(arc_reference(1.0, math.pi / 2, math.pi / 2, math.pi),
                                                           abs=1e-13)
    with pytest.raises(ValueError):
        arc_kernel(1.0, 2.0, 0.0, arc)
    with pytest.raises(ValueError):
        arc_kernel(1.0, 0.0, 0.0, (0.0, 7.0))


@given(t=times, x=st.floats(0.01, 0.99), y=st.floats(0.01, 0.99), L=st.floats(0.2, 2 * math.pi))
def test_arc_kernel_matches_image_sum_and_is_below_circle(t, x, y, L):
    a = arc_kernel(t, x * L, y * L, (0.0, L))
    assert a == pytest.approx(arc_reference(t, x * L, y * L, L), abs=1e-12)
    assert a <= circle_kernel(t, x * L, y * L) + 1e-15


def test_arc_kernel_grows_to_circle():
    t, x, y = 0.5, 3.0, 3.4
    vals = [arc_kernel(t, x, y, (3.2 - h, 3.2 + h)) for h in (0.5, 1.0, 2.0, 3.0, math.pi)]
    assert vals == sorted(vals)
    assert vals[-1] == pytest.approx(circle_kernel(t, x, y), rel=1e-6)


def test_absorbed_bridge_oracle_at_origin():
    t = 1.0
    p = edge_avoid_probability(t, 0.0, 0.0, S_PLUS_MINUS_I)
    assert p == pytest.approx(arc_kernel(t, 0.0, 0.0, (-math.pi / 2, math.pi / 2)) / circle_kernel(t, 0.0, 0.0))
    r = avoid_oracle_grid([(t, 0.0, 0.0)], S_PLUS_MINUS_I, 1024, 50_000, 2)[0]
    assert r.accepts(p)


def test_avoid_set_structure():
    S = AvoidSet((3 * math.pi / 2, math.pi / 2, -math.pi / 2))
    assert S.points == pytest.approx((math.pi / 2, 3 * math.pi / 2))
    assert S.lengths.sum() == pytest.approx(2 * math.pi)
    assert S.pair(0.3).points == pytest.approx((0.3, 0.3 + math.pi))
    assert S.conjugate_pair(0.3).points == pytest.approx((math.pi - 0.3, 2 * math.pi - 0.3))
    idx, off = S.locate(np.array([0.0, math.pi / 2, math.pi]))
    assert idx.tolist() == [1, -1, 0]
    assert off[2] == pytest.approx(math.pi / 2)
    with pytest.raises(ValueError):
        AvoidSet(())


@given(t=times, a=angles, b=angles)
def test_opposite_half_planes_are_separated(t, a, b):
    if math.cos(a) * math.cos(b) <= 0:
        assert edge_avoid_probability(t, a, b, S_PLUS_MINUS_I) == 0.0


def test_short_time_limit():
    assert edge_avoid_probability(1e-4, 0.0, 0.0, S_PLUS_MINUS_I) == pytest.approx(1.0, abs=1e-12)


@given(t=times, a=angles, b=angles, extra=st.lists(angles, min_size=1, max_size=3))
def test_avoid_probability_antitone_and_union_bound(t, a, b, extra):
    S = S_PLUS_MINUS_I
    T = AvoidSet(tuple(extra))
    p = edge_avoid_probability(t, a, b, S)
    pu = edge_avoid_probability(t, a, b, S.union(T))
    assert 0.0 <= pu <= p <= 1.0
    assert pu <= edge_avoid_probability(t, a, b, T) + 1e-15


def test_joint_atoms_table():
    alpha = math.pi / 2 - 0.1
    S1, S2 = AvoidSet.pair(alpha), AvoidSet.conjugate_pair(alpha)
    for t, a, b in [(1.0, 0.1, 0.2), (0.3, 0.0, 6.0), (2.0, 1.0, 5.0)]:
        atoms = joint_atoms(t, a, b, [S1, S2])
        assert atoms.sum() == pytest.approx(1.0, abs=1e-12)
        assert atoms.min() >= 0
        # marginal of S1 is the avoid probability
        assert atoms[1] + atoms[3] == pytest.approx(edge_avoid_probability(t, a, b, S1), abs=1e-12)
        assert atoms[3] == pytest.approx(edge_avoid_probability(t, a, b, S1.union(S2)), abs=1e-12)


def test_equal_sets_give_equal_indicators():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a, b = rng.uniform(0, 2 * math.pi, 2)
        x, y = joint_edge_indicators(0.8, a, b, S_PLUS_MINUS_I, S_PLUS_MINUS_I, rng)
        assert x == y


def test_union_case_excludes_both():
    # S1 leaves 0.2 and 0.6 on one arc, S2 puts a point between them
    S1, S2 = AvoidSet((math.pi,)), AvoidSet((0.4,))
    atoms = joint_atoms(0.5, 0.2, 0.6, [S1, S2])
    assert atoms[3] == 0.0 and atoms[1] > 0
    rng = np.random.default_rng(2)
    draws = [joint_edge_indicators(0.5, 0.2, 0.6, S1, S2, rng) for _ in range(500)]
    assert not any(x and y for x, y in draws)
    assert any(x for x, _ in draws)


def test_sample_joint_frequencies():
    atoms = np.array([0.1, 0.2, 0.3, 0.4])[:, None].repeat(40_000, axis=1)
    ind = sample_joint(atoms, np.random.default_rng(3).random(40_000))
    code = ind[0].astype(int) + 2 * ind[1].astype(int)
    freq = np.bincount(code, minlength=4) / code.size
    assert freq == pytest.approx([0.1, 0.2, 0.3, 0.4], abs=0.01)


def test_state_validation():
    dom = build_grid((2, 2))
    with pytest.raises(ValueError):
        VillainState(dom, np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        VillainState(dom, np.full(4, 7.0), 1.0)
    with pytest.raises(ValueError):
        VillainState(dom, np.zeros(4), 0.0)


def test_zero_sweeps_keeps_state():
    dom = build_grid((3, 3))
    s = VillainState(dom, np.linspace(0, 6, 9), 1.0)
    out = gibbs_sample(s, 0, np.random.default_rng(0))
    assert np.array_equal(out.angles, s.angles)
    with pytest.raises(ValueError):
        gibbs_sample(s, -1, np.random.default_rng(0))


def test_gibbs_is_deterministic_and_keeps_input():
    dom = build_grid((3, 3))
    s = VillainState.ordered(dom, 1.0)
    a = gibbs_sample(s, 20, np.random.default_rng(5))
    b = gibbs_sample(s, 20, np.random.default_rng(5))
    assert np.array_equal(a.angles, b.angles)
    assert np.all(s.angles == 0.0)
    assert np.all((a.angles >= 0) & (a.angles < 2 * math.pi))


def test_small_time_concentrates_at_boundary_angle():
    dom = build_grid((3, 3))
    out = gibbs_sample(VillainState.ordered(dom, 1e-3, boundary=1.0), 50, np.random.default_rng(0))
    assert circle_distance(out.angles, 1.0).max() < 0.2


def test_single_site_conditional_mean():
    # one site with four neighbours at angle 0: E[cos] by quadrature of the product density
    dom = build_grid((1, 1))
    dens = lambda u: circle_kernel(1.0, u, 0.0) ** 4  # noqa: E731
    Z, _ = integrate.quad(dens, 0, 2 * math.pi)
    m, _ = integrate.quad(lambda u: math.cos(u) * dens(u), 0, 2 * math.pi)
    rec = HeatBath(dom, 1.0).run(np.zeros(1), 40_000, np.random.default_rng(4), record_every=1)[:, 0]
    c = np.cos(rec)
    assert abs(c.mean() - m / Z) <= 4 * c.std() / math.sqrt(c.size)


def brute_force_connection(state, x):
    """Exact P[x connected to the boundary] by enumerating all edge configurations."""
    dom = state.domain
    th = state.all_angles()
    e = dom.edges
    p = np.array([edge_avoid_probability(t, th[a], th[b], S_PLUS_MINUS_I) for t, (a, b) in zip(state.t_edges, e)])
    live = np.flatnonzero((p > 0) & (p < 1))
    total = 0.0
    for bits in itertools.product([False, True], repeat=live.size):
        o = p >= 1
        o[live] = bits
        w = np.prod(np.where(bits, p[live], 1 - p[live]))
        parent = list(range(dom.n_vertices))

        def find(v):
            while parent[v] != v:
                v = parent[v]
            return v
        for (a, b), flag in zip(e.tolist(), o):
            if flag:
                parent[find(a)] = find(b)
        if any(find(x) == find(v) for v in range(dom.n_interior, dom.n_vertices)):
            total += w
    return total


def test_hand_state_clusters_match_enumeration():
    dom = build_grid((2, 2))
    state = VillainState(dom, np.array([0.3, 5.9, 1.2, 0.8]), 0.7)
    exact = brute_force_connection(state, 0)
    rng = np.random.default_rng(6)
    n = 20_000
    hits = sum(boundary_connection(villain_clusters(state, S_PLUS_MINUS_I, rng).roots, 0, dom.n_interior)
               for _ in range(n))
    assert abs(hits / n - exact) <= 4 * math.sqrt(exact * (1 - exact) / n)


def test_straddling_state_has_no_open_edges():
    dom = build_grid((3, 3))
    # checkerboard of angles 0 and pi: every interior edge joins opposite half planes
    parity = (dom.coords[:dom.n_interior].sum(axis=1) % 2).astype(bool)
    state = VillainState(dom, np.where(parity, 0.0, math.pi), 1.0, boundary=math.pi)
    for seed in range(20):
        lab = villain_clusters(state, S_PLUS_MINUS_I, np.random.default_rng(seed))
        interior = lab.roots[:dom.n_interior]
        assert np.unique(interior).size == dom.n_interior


def test_nearly_empty_avoid_set_connects_everything():
    dom = build_grid((3, 3))
    state = VillainState(dom, np.full(9, 0.01), 1e-3)
    lab = villain_clusters(state, AvoidSet((math.pi,)), np.random.default_rng(0))
    assert lab.n_clusters == 1


def test_integrated_autocorrelation():
    rng = np.random.default_rng(0)
    assert integrated_autocorrelation(rng.standard_normal(20_000)) == pytest.approx(1.0, abs=0.15)
    phi, n = 0.8, 50_000
    z = np.empty(n)
    z[0] = 0
    eps = rng.standard_normal(n)
    for i in range(1, n):
        z[i] = phi * z[i - 1] + eps[i]
    assert integrated_autocorrelation(z) == pytest.approx((1 + phi) / (1 - phi), rel=0.15)


def test_correlation_ratio_small_time_is_near_one():
    dom = build_grid((3, 3))
    r = correlation_ratio(dom, 0.01, 4, 50, 1, burn_in=5)
    assert r.ratio.value == pytest.approx(1.0, abs=0.01)
    r2 = correlation_ratio(dom, 0.01, 4, 50, 1, mode="cos2", burn_in=5)
    assert r2.ratio.value == pytest.approx(1.0, abs=0.02)
    with pytest.raises(ValueError):
        correlation_ratio(dom, 1.0, 4, 10, 1, mode="sin")


def test_correlation_ratio_window_and_reproducibility():
    dom = build_grid((4, 4))
    a = correlation_ratio(dom, 1.0, 8, 150, 3)
    b = correlation_ratio(dom, 1.0, 8, 150, 3)
    assert a.to_dict() == b.to_dict()
    r = a.ratio
    assert r.lo > 0 and r.value <= 1 + 3 * r.stderr
    assert a.burn_in >= 20
    assert abs(a.extras["off_cluster_mean"]) <= 4 * a.extras["off_cluster_stderr"] + 1e-3


def test_angle_association_small_box():
    dom = build_grid((3, 3))
    s = angle_association(dom, 1.0, (0, 0), (1, 0), 0.5, 8, 200, 2)
    assert s.holds()


def test_villain_scan_trivial_columns():
    scan = villain_iic_scan([3], [math.pi / 2], 4, 40, 1, burn_in=5)
    rows = scan.rows
    assert rows[0].estimate.value == rows[1].estimate.value
    cond = villain_iic_scan([3], [1.3, 1.5], 4, 40, 1, event="conditioning", burn_in=5)
    assert all(r.estimate.value == 1.0 for r in cond.rows)
    assert cond.diagnostics[3]["pass"]
    with pytest.raises(ValueError):
        villain_iic_scan([3], [], 4, 10, 1)
    with pytest.raises(ValueError):
        villain_iic_scan([3], [1.0], 4, 10, 1, event="bogus")
    with pytest.raises(ValueError):
        villain_iic_scan([3], [1.0], 4, 10, 1, R_max=10)
