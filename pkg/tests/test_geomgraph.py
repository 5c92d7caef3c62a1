import itertools
import math

import numpy as np
import pytest

from portmanteau.bounds import VectorFunctional, holder_beta_criterion, stable_condition_estimates
from portmanteau.chaos import mall_D, ustat_eval
from portmanteau.geomgraph import (
    DiskGraph,
    GraphPattern,
    LocalGrid,
    PatternCount,
    RegimeSpec,
    connected_patterns,
    count_induced,
    count_patterns,
    depoissonized_counts,
    limiting_poisson_parameter,
    pattern_kernel,
    pattern_mean,
    pattern_projection,
    pattern_ustat,
    pattern_variance,
    run_mixed_experiment,
)
from portmanteau.poisson_space import (
    Configuration,
    ControlMeasure,
    Window,
    replicate_rng,
    sample_configuration,
)

TRI = GraphPattern.triangle()
PATH3 = GraphPattern.path(3)
EDGE = GraphPattern.edge()


def line(*xs):
    return Configuration(list(xs), dim=1, box=(np.zeros(1), np.ones(1)))


# ---------------------------------------------------------------- brute-force oracle

def _connected(A):
    seen, stack = {0}, [0]
    while stack:
        v = stack.pop()
        for u in np.flatnonzero(A[v]):
            if u not in seen:
                seen.add(u)
                stack.append(u)
    return len(seen) == A.shape[0]


def brute_counts(points, t, adjacencies):
    pts = np.asarray(points, dtype=float).reshape(len(points), -1)
    k = adjacencies[0].shape[0]
    # every relabelling of every pattern, keyed by its adjacency bytes
    lookup = {}
    for i, B in enumerate(adjacencies):
        for p in itertools.permutations(range(k)):
            lookup[B[np.ix_(p, p)].astype(bool).tobytes()] = i
    totals = [0] * len(adjacencies)
    for sub in itertools.combinations(range(len(pts)), k):
        P = pts[list(sub)]
        dist = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
        i = lookup.get(((dist > 0) & (dist < t)).tobytes())
        if i is not None:
            totals[i] += 1
    return totals


def brute_count(points, t, adjacency):
    return brute_counts(points, t, [adjacency])[0]


def brute_connected(points, t, k):
    pts = np.asarray(points, dtype=float).reshape(len(points), -1)
    total = 0
    for sub in itertools.combinations(range(len(pts)), k):
        P = pts[list(sub)]
        dist = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
        total += _connected((dist > 0) & (dist < t))
    return total


# ---------------------------------------------------------------- patterns

def test_connected_pattern_counts():
    assert [len(connected_patterns(k)) for k in (2, 3, 4, 5)] == [1, 2, 6, 21]


def test_canonical_forms():
    assert PATH3.canonical == "011" and TRI.canonical == "111"
    star = GraphPattern.star(4)
    relabelled = GraphPattern.from_edges(4, [(2, 0), (2, 1), (2, 3)])
    assert star == relabelled and star.is_isomorphic(relabelled)
    assert GraphPattern.path(4) != star
    assert len({GraphPattern.cycle(4), GraphPattern.from_edges(4, [(0, 2), (2, 1), (1, 3), (3, 0)])}) == 1


def test_disconnected_pattern_rejected():
    with pytest.raises(ValueError):
        GraphPattern.from_edges(3, [(0, 1)])


def test_hand_counts():
    collinear = line(0.0, 0.5, 1.0)
    assert count_induced(collinear, 0.6, PATH3) == 1
    assert count_induced(collinear, 0.6, TRI) == 0
    close = line(0.1, 0.2, 0.3)
    assert count_induced(close, 0.6, TRI) == 1
    assert count_induced(close, 0.6, PATH3) == 0


def test_edge_rule_is_open():
    assert count_induced(line(0.0, 0.5), 0.5, EDGE) == 0
    assert count_induced(line(0.0, 0.5), 0.5000001, EDGE) == 1
    assert DiskGraph(np.array([[0.3], [0.3]]), 0.1).edge_count == 0


def test_local_enumeration_matches_oracle_line():
    rng = replicate_rng(1)
    pts = rng.random((60, 1))
    assert count_patterns(pts, 0.15, [TRI, PATH3]).tolist() == brute_counts(
        pts, 0.15, [TRI.adjacency, PATH3.adjacency])


@pytest.mark.parametrize("seed", range(3))
def test_local_enumeration_matches_oracle_k4_plane(seed):
    rng = replicate_rng(2, seed)
    pts = rng.random((22, 2))
    t = 0.3
    pats = connected_patterns(4)
    got = count_patterns(pts, t, pats)
    want = brute_counts(pts, t, [p.adjacency for p in pats])
    assert got.tolist() == want
    assert got.sum() == brute_connected(pts, t, 4)


def test_partition_identity_k3():
    pts = replicate_rng(3).random((70, 1))
    c = count_patterns(pts, 0.05, [TRI, PATH3])
    assert c.sum() == brute_connected(pts, 0.05, 3)


# ---------------------------------------------------------------- kernels and U-statistics

def test_pattern_kernel():
    assert pattern_kernel(TRI, 0.2, [0.1, 0.15, 0.9]) == 0.0
    assert pattern_kernel(TRI, 0.2, [0.1, 0.15, 0.2]) == pytest.approx(1 / 6)
    with pytest.raises(ValueError):
        pattern_kernel(TRI, 0.2, [0.1, 0.1, 0.2])


def test_kernel_sum_over_orderings_is_indicator():
    rng = replicate_rng(4)
    for _ in range(50):
        pts = rng.random(3) * 0.3
        total = sum(pattern_kernel(PATH3, 0.12, pts[list(p)]) for p in itertools.permutations(range(3)))
        assert total == pytest.approx(count_induced(pts.reshape(-1, 1), 0.12, PATH3), abs=1e-12)


@pytest.mark.parametrize("pattern", [EDGE, TRI, PATH3])
def test_ustat_equals_count(pattern):
    mu = ControlMeasure.uniform(80.0)
    U = pattern_ustat(pattern, 0.04, mu)
    for r in range(10):
        cfg = sample_configuration(mu, replicate_rng(5, r))
        assert ustat_eval(U, cfg) == pytest.approx(count_induced(cfg, 0.04, pattern), abs=1e-9)


# ---------------------------------------------------------------- projections

def test_projection_examples():
    mu = ControlMeasure.uniform(1.0)
    assert pattern_projection(EDGE, 0.2, 1, 0.5, mu).value == pytest.approx(0.4, abs=1e-14)
    assert pattern_projection(TRI, 0.2, 3, [0.1, 0.2, 0.25], mu).value == pytest.approx(1 / 6)
    assert pattern_projection(EDGE, 0.2, 1, 1.5, mu).value == 0.0


def test_projection_triangle_against_grid_oracle():
    n, t, x = 3.0, 0.1, 0.05
    mu = ControlMeasure.uniform(n)
    got = pattern_projection(TRI, t, 1, x, mu).value
    # midpoint rule over the square [x - 2t, x + 2t]^2 intersected with [0, 1]^2
    G = 2000
    a = np.linspace(x - 2 * t, x + 2 * t, G + 1)
    y = 0.5 * (a[1:] + a[:-1])
    Y2, Y3 = np.meshgrid(y, y, indexing="ij")
    inside = (Y2 >= 0) & (Y3 >= 0)
    tri = (np.abs(Y2 - x) < t) & (np.abs(Y3 - x) < t) & (np.abs(Y2 - Y3) < t) & inside
    want = 3 * n * n * tri.sum() * (a[1] - a[0]) ** 2 / 6
    assert got == pytest.approx(want, abs=2e-3 * n * n * t)


def test_projection_monte_carlo_in_plane():
    n, t = 10.0, 0.1
    mu = ControlMeasure([0, 0], [1, 1], n)
    res = pattern_projection(EDGE, t, 1, [0.5, 0.5], mu, mc_nodes=40000, seed=3)
    assert abs(res.value - n * math.pi * t * t) < 4 * res.se
    with pytest.warns(RuntimeWarning):
        flagged = pattern_projection(EDGE, t, 1, [0.5, 0.5], mu, mc_nodes=100, target_se=1e-9)
    assert flagged.flagged


# ---------------------------------------------------------------- moments and limits

def test_edge_moments_closed_form():
    for n, t in ((50.0, 0.1), (300.0, 0.013)):
        mu = ControlMeasure.uniform(n)
        E = n * n * (2 * t - t * t) / 2
        assert pattern_mean(EDGE, t, mu) == pytest.approx(E, rel=1e-12)
        assert pattern_variance(EDGE, t, mu) == pytest.approx(E + n ** 3 * (4 * t * t - 10 / 3 * t ** 3), rel=1e-12)


@pytest.mark.parametrize("pattern", [TRI, PATH3])
def test_moments_against_simulation(pattern):
    n, t = 60.0, 0.03
    mu = ControlMeasure.uniform(n)
    R = 4000
    c = np.array([count_induced(sample_configuration(mu, replicate_rng(6, r)), t, pattern) for r in range(R)],
                 dtype=float)
    m, v = pattern_mean(pattern, t, mu), pattern_variance(pattern, t, mu)
    assert abs(c.mean() - m) < 4 * math.sqrt(v / R)
    se_var = math.sqrt(np.mean((c - c.mean()) ** 4) / R)
    assert abs(c.var(ddof=1) - v) < 4 * se_var


def _polygon_area(vertices):
    x, y = np.asarray(vertices, dtype=float).T
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def test_limit_triangle_region_area():
    # {|y2| < 1, |y3| < 1, |y2 - y3| < 1} is a hexagon
    area = _polygon_area([(1, 0), (1, 1), (0, 1), (-1, 0), (-1, -1), (0, -1)])
    assert area == 3.0
    assert limiting_poisson_parameter(TRI).value == pytest.approx(area / 6, abs=1e-12)
    half = lambda x: np.full(x.shape[0], 0.5)
    assert limiting_poisson_parameter(TRI, half, 1, 0.0, 2.0).value == pytest.approx(0.25 * area / 6, abs=1e-10)


def test_limit_path_complements_triangle():
    # connected triples anchored at 0: |y2|,|y3| < 2 and the three points connected
    G = 1200
    a = np.linspace(-2, 2, G + 1)
    y = 0.5 * (a[1:] + a[:-1])
    Y2, Y3 = np.meshgrid(y, y, indexing="ij")
    e12, e13, e23 = np.abs(Y2) < 1, np.abs(Y3) < 1, np.abs(Y2 - Y3) < 1
    path = (e12.astype(int) + e13 + e23) == 2
    want = path.sum() * (a[1] - a[0]) ** 2 / 6
    assert limiting_poisson_parameter(PATH3).value == pytest.approx(want, abs=5e-3)


def test_limit_degenerate_and_bad_density():
    assert limiting_poisson_parameter(TRI, lambda x: np.zeros(x.shape[0])).value == 0.0
    with pytest.raises(ValueError):
        limiting_poisson_parameter(TRI, lambda x: np.full(x.shape[0], 2.0))


def test_limit_plane_monte_carlo():
    # edge in the plane: a = (int p^2) * pi / 2 = pi / 2 for the unit square
    res = limiting_poisson_parameter(EDGE, None, 2, mc_nodes=200000, seed=1)
    assert abs(res.value - math.pi / 2) < 4 * res.se + 1e-12


# ---------------------------------------------------------------- functionals

@pytest.mark.parametrize("pattern", [EDGE, TRI, PATH3])
def test_add_one_cost_matches_recount(pattern):
    n, t = 40.0, 0.05
    mu = ControlMeasure.uniform(n)
    F = PatternCount(pattern, t, mu)
    zs = np.linspace(0.003, 0.997, 23).reshape(-1, 1)
    for r in range(5):
        cfg = sample_configuration(mu, replicate_rng(7, r))
        np.testing.assert_array_equal(F.add_one_cost(cfg, zs), [mall_D(F, cfg, z) for z in zs])


def _dlinv_oracle(pattern, t, measure, config, z):
    """``-D_z L^{-1} F = sum_i I_{i-1}(f_i(z, .))`` by inclusion-exclusion over projections."""
    k = pattern.order
    pts = config.points[:, 0]
    total = 0.0
    for i in range(1, k + 1):
        for l in range(i):
            coef = (-1) ** (i - 1 - l) * math.comb(i - 1, l) * math.comb(k, i) / math.comb(k, l + 1)
            s = 0.0
            for sub in itertools.combinations(range(pts.size), l):
                s += pattern_projection(pattern, t, l + 1, [z] + [pts[j] for j in sub], measure).value
            total += coef * math.factorial(l) * s
    return total


@pytest.mark.parametrize("pattern", [EDGE, PATH3, TRI])
def test_dlinv_matches_projection_oracle(pattern):
    n, t = 12.0, 0.12
    mu = ControlMeasure.uniform(n)
    F = PatternCount(pattern, t, mu)
    cfg = sample_configuration(mu, replicate_rng(8, pattern.order))
    zs = [0.02, 0.31, 0.5, 0.93]
    got = -F.dlinv(cfg, np.array(zs).reshape(-1, 1))
    want = [_dlinv_oracle(pattern, t, mu, cfg, z) for z in zs]
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_dlinv_mean_is_first_projection():
    n, t = 30.0, 0.05
    mu = ControlMeasure.uniform(n)
    F = PatternCount(TRI, t, mu)
    z = np.array([[0.4], [0.01]])
    R = 1500
    vals = np.array([-F.dlinv(sample_configuration(mu, replicate_rng(9, r)), z) for r in range(R)])
    f1 = [pattern_projection(TRI, t, 1, zz, mu).value for zz in z[:, 0]]
    assert np.all(np.abs(vals.mean(0) - f1) < 4 * vals.std(0, ddof=1) / math.sqrt(R))


def test_normalized_count_scaling():
    n, t = 100.0, 0.01
    mu = ControlMeasure.uniform(n)
    G = PatternCount.normalized(EDGE, t, mu)
    F = PatternCount(EDGE, t, mu)
    cfg = sample_configuration(mu, replicate_rng(10))
    assert G(cfg) == pytest.approx((F(cfg) - pattern_mean(EDGE, t, mu)) / math.sqrt(pattern_variance(EDGE, t, mu)))
    assert G.mean == 0.0


def test_local_grid_integrates_add_one_cost_exactly():
    n, t = 50.0, 0.02
    mu = ControlMeasure.uniform(n)
    F = PatternCount(EDGE, t, mu)
    grid = LocalGrid(mu, t, 2)
    for r in range(5):
        cfg = sample_configuration(mu, replicate_rng(11, r))
        nodes, w = grid.nodes_weights(cfg)
        x = cfg.points[:, 0]
        want = n * np.sum(np.minimum(x + t, 1) - np.maximum(x - t, 0))
        assert float(np.dot(w, F.add_one_cost(cfg, nodes))) == pytest.approx(want, rel=1e-12)
    with pytest.raises(NotImplementedError):
        LocalGrid(ControlMeasure([0, 0], [1, 1], 1.0), t, 2)


def test_holder_on_edge_triangle_pair():
    n = 1000
    t = n ** -1.5
    mu = ControlMeasure.uniform(n)
    V = VectorFunctional([PatternCount(TRI, t, mu)], [PatternCount.normalized(EDGE, t, mu)])
    rep = holder_beta_criterion(V, 3.0, 150, 12, LocalGrid(mu, t, 3))
    assert rep.pathwise_ok
    assert rep.beta <= rep.majorant + 4 * rep.beta_se


@pytest.mark.slow
def test_stable_condition_triangle_trend():
    out = {}
    for n in (1000, 4000):
        t = n ** -1.5
        mu = ControlMeasure.uniform(n)
        out[n] = stable_condition_estimates(PatternCount(TRI, t, mu), [Window(0.0, 0.5)], 250, 13,
                                            LocalGrid(mu, t, 3))[0]
    (a, sa), (b, sb) = out[1000]["D_Dm1"][0], out[4000]["D_Dm1"][0]
    assert a - b > 2 * math.hypot(sa, sb)
    # the first-order window integrals stay of order one in this regime
    for key in ("int_D", "int_DL"):
        (a, sa), (b, sb) = out[1000][key][0], out[4000][key][0]
        assert abs(a - b) < 4 * math.hypot(sa, sb) + 0.05 * a


# ---------------------------------------------------------------- regime experiment

def test_regime_validation():
    with pytest.raises(ValueError):
        RegimeSpec(2, 3, EDGE, [TRI, GraphPattern.from_edges(3, [(0, 1), (1, 2), (2, 0)])])
    with pytest.raises(ValueError):
        RegimeSpec(3, 3, TRI, [PATH3])
    with pytest.raises(ValueError):
        RegimeSpec(2, 3, TRI, [PATH3])
    spec = RegimeSpec(2, 3, EDGE, [TRI, PATH3])
    assert spec.radius(100.0) == pytest.approx(1e-3)


def test_small_mixed_experiment():
    spec = RegimeSpec(2, 3, EDGE, [TRI, PATH3])
    res = run_mixed_experiment(spec, [100, 300], 200, seed=14, bootstrap=5)
    assert len(res.rows) == 6
    assert {f["quantity"] for f in res.fits} == {"tv", "h1", "w1", "abs_cov_01", "abs_cov_02"}
    row0 = res.rows[0]
    assert row0["pattern"] == EDGE.canonical
    assert abs(row0["mean"]) < 4 * row0["se_mean"]
    for r in res.rows[1:3]:
        assert r["limit"] == pytest.approx(0.5, abs=1e-12)
    again = run_mixed_experiment(spec, [100, 300], 200, seed=14, bootstrap=5)
    assert again.rows == res.rows
    with pytest.raises(ValueError):
        run_mixed_experiment(spec, [100], 10, seed=0)


def test_depoissonized_counts():
    spec = RegimeSpec(2, 3, EDGE, [TRI, PATH3])
    tiny = depoissonized_counts(spec, 2, 50, 15)
    assert np.all(tiny.fixed[:, 1:] == 0)
    s = depoissonized_counts(spec, 200, 50, 15)
    assert s.fixed.shape == (50, 3)
    assert s.patterns == [EDGE.canonical, TRI.canonical, PATH3.canonical]
