import itertools
import json
import math

import numpy as np
import pytest

from _oracles import loop_contract, loop_norm
from portmanteau.bounds import (
    COEFFS,
    CellGrid,
    DiscreteGrid,
    MixedTarget,
    RunningStats,
    VectorFunctional,
    assemble_portmanteau,
    covariance_identity,
    depoisson_coefficient,
    estimate_coefficients,
    estimate_cross_coeff,
    estimate_gaussian_coeffs,
    estimate_poisson_coeffs,
    first_chaos_functional,
    grid_convergence,
    holder_beta_criterion,
    rho_n,
    stable_condition_estimates,
    svp_diagnostics,
    ustat_gaussian_bound,
    ustat_poisson_bound,
    window_functional,
)
from portmanteau.chaos import DiscreteChaosFunctional, UStatistic, mall_D, mall_DLinv
from portmanteau.kernel_algebra import DiscreteMeasure, SymKernel, symmetrize
from portmanteau.poisson_space import Configuration, replicate_rng, sample_configuration
from portmanteau.stein import portmanteau_constant

# dyadic weights keep every cell integral exact
SPACE = DiscreteMeasure([1.0, 1.0, 2.0, 0.5, 0.5, 1.0])
GRID = DiscreteGrid(SPACE)
A, B = [0, 1], [3, 4, 5]


def half_h(cells, space=SPACE):
    """``h = 1_A / sqrt(mu(A))`` with ``mu(A) = 4``."""
    mass = sum(space.weights[c] for c in cells)
    assert mass == 4.0
    return SymKernel(space.indicator(cells) / 2.0, space)


def pair_count(cells, space=SPACE):
    return DiscreteChaosFunctional.from_ustat(UStatistic(2, SymKernel.indicator_power(space, cells, 2, 0.5)))


# ---------------------------------------------------------------- basics

def test_running_stats_merge_matches_batch():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(101, 3))
    a, b = RunningStats(3), RunningStats(3)
    for row in x[:40]:
        a.push(row)
    for row in x[40:]:
        b.push(row)
    m = a.merge(b)
    np.testing.assert_allclose(m.mean, x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(m.var, x.var(0, ddof=1), rtol=1e-10)
    np.testing.assert_allclose(m.se, x.std(0, ddof=1) / math.sqrt(101), rtol=1e-10)


def test_mixed_target_validation():
    with pytest.raises(ValueError):
        MixedTarget([1.0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError):
        MixedTarget([1.0], [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        MixedTarget([0.0])
    assert MixedTarget([1.0], 2.0).m == 1


def test_vector_functional_rejects_non_integer():
    G = first_chaos_functional(half_h([0, 1, 3, 4, 5]))
    V = VectorFunctional([G])
    cfg = Configuration([0.5], dim=1)  # I_1(h) = 1/2 - 2
    with pytest.raises(ValueError, match="Z_\\+"):
        V.values(cfg)


# ---------------------------------------------------------------- exact cases

def test_window_alphas_exactly_zero():
    F = window_functional(SPACE, A)
    V = VectorFunctional([F])
    rep = estimate_coefficients(V, MixedTarget([2.0]), 500, 1, GRID)
    for c in COEFFS:
        assert rep.values[c] == 0.0 and rep.ses[c] == 0.0
    a = estimate_poisson_coeffs(V, MixedTarget([2.0]), 200, 2, GRID)
    assert a == ((0.0, 0.0),) * 3


def test_disjoint_windows_alpha3_zero():
    V = VectorFunctional([window_functional(SPACE, A), window_functional(SPACE, [2])])
    rep = estimate_coefficients(V, MixedTarget([2.0, 2.0]), 300, 3, GRID)
    assert rep.alpha3 == 0.0 and rep.ses["alpha3"] == 0.0
    assert rep.alpha1 == 0.0 and rep.alpha2 == 0.0


def test_first_chaos_gammas():
    G = first_chaos_functional(half_h([0, 1, 3, 4, 5]))
    V = VectorFunctional([], [G])
    (g1, s1), (g2, s2) = estimate_gaussian_coeffs(V, MixedTarget([], 1.0), 300, 4, GRID)
    assert (g1, s1) == (0.0, 0.0)
    assert g2 == 0.5 and s2 == 0.0


def test_zero_gaussian_part():
    G = first_chaos_functional(SymKernel.constant(0.0, 1, SPACE))
    V = VectorFunctional([], [G])
    assert estimate_gaussian_coeffs(V, MixedTarget([], 0.0), 50, 5, GRID) == ((0.0, 0.0), (0.0, 0.0))


def test_beta_cases():
    h = half_h([0, 1, 3, 4, 5])
    disjoint = VectorFunctional([window_functional(SPACE, [2])], [first_chaos_functional(h)])
    assert estimate_cross_coeff(disjoint, 100, 6, GRID) == (0.0, 0.0)
    overlap = VectorFunctional([window_functional(SPACE, [0, 2])], [first_chaos_functional(h)])
    # int_A |h| dmu with A = cells {0, 2}: only cell 0 overlaps, mass 1, |h| = 1/2
    assert estimate_cross_coeff(overlap, 100, 6, GRID) == (0.5, 0.0)


def test_missing_parts_raise():
    V = VectorFunctional([window_functional(SPACE, A)])
    with pytest.raises(ValueError):
        estimate_gaussian_coeffs(V, MixedTarget([2.0]), 10, 0, GRID)
    with pytest.raises(ValueError):
        estimate_cross_coeff(V, 10, 0, GRID)
    G = VectorFunctional([], [first_chaos_functional(SymKernel.constant(0.0, 1, SPACE))])
    with pytest.raises(ValueError):
        estimate_poisson_coeffs(G, MixedTarget([], 1.0), 10, 0, GRID)


# ---------------------------------------------------------------- shared-realization oracle

def _oracle_coeffs(Fs, Gs, lambdas, C, replicates, seed):
    """Coefficients from explicit add-one costs and chaos sums, cell by cell."""
    mu = SPACE.control_measure()
    w = SPACE.weights
    zs = [[c + 0.5] for c in range(SPACE.cell_count)]
    d, m = len(Fs), len(Gs)
    rows = []
    for r in range(replicates):
        cfg = sample_configuration(mu, replicate_rng(seed, r))
        DF = [[mall_D(F, cfg, z) for z in zs] for F in Fs]
        LF = [[mall_DLinv(F.decomposition, cfg, z) for z in zs] for F in Fs]
        DG = [[mall_D(G, cfg, z) for z in zs] for G in Gs]
        LG = [[mall_DLinv(G.decomposition, cfg, z) for z in zs] for G in Gs]
        cells = range(SPACE.cell_count)
        integ = lambda fn: sum(w[c] * fn(c) for c in cells)
        a1 = sum(abs(lambdas[i] - integ(lambda c: -DF[i][c] * LF[i][c])) for i in range(d))
        a2 = sum(integ(lambda c: abs(DF[i][c] * (DF[i][c] - 1) * LF[i][c])) for i in range(d))
        a3 = 0.0
        for i in range(d):
            for j in range(d):
                if i == j:
                    continue
                a3 += abs(integ(lambda c: -DF[i][c] * LF[j][c]))
                a3 += integ(lambda c: abs(DF[j][c] * (DF[j][c] - 1) * LF[i][c]))
        for j in range(d):
            for k in range(d):
                if j == k:
                    continue
                for i in range(d):
                    a3 += integ(lambda c: abs(DF[j][c] * DF[k][c] * LF[i][c]))
        beta = sum(integ(lambda c: abs(LG[j][c]) * abs(DF[i][c])) for i in range(d) for j in range(m))
        g1 = sum(abs(C[j][k] - integ(lambda c: -DG[j][c] * LG[k][c])) for j in range(m) for k in range(m))
        g2 = integ(lambda c: sum(abs(DG[j][c]) for j in range(m)) ** 2 * sum(abs(LG[j][c]) for j in range(m)))
        rows.append([a1, a2, a3, beta, g1, g2])
    return np.mean(rows, axis=0)


def test_coefficients_match_brute_force_oracle():
    rng = np.random.default_rng(8)
    f = symmetrize(rng.uniform(-1, 1, (6, 6)), SPACE)
    Fs = [window_functional(SPACE, A), pair_count([1, 2, 3])]
    Gs = [DiscreteChaosFunctional.multiple_integral(f), first_chaos_functional(half_h([0, 1, 3, 4, 5]))]
    lambdas = [2.0, 3.5]
    C = [[0.8, 0.1], [0.1, 1.0]]
    rep = estimate_coefficients(VectorFunctional(Fs, Gs), MixedTarget(lambdas, C), 200, 9, GRID)
    want = _oracle_coeffs(Fs, Gs, lambdas, C, 200, 9)
    got = np.array([rep.values[c] for c in COEFFS])
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)
    assert rep.negative == []
    assert rep.K == portmanteau_constant(2, 2, lambdas)


def test_threads_do_not_change_results():
    Fs = [window_functional(SPACE, A), pair_count([1, 2, 3])]
    V = VectorFunctional(Fs)
    t = MixedTarget([2.0, 3.5])
    a = estimate_coefficients(V, t, 301, 10, GRID, threads=1)
    b = estimate_coefficients(V, t, 301, 10, GRID, threads=4)
    assert a.to_json() == b.to_json()


def test_report_json_flat():
    V = VectorFunctional([window_functional(SPACE, A)], [first_chaos_functional(half_h([0, 1, 3, 4, 5]))])
    rep = estimate_coefficients(V, MixedTarget([2.0], 1.0), 50, 11, GRID)
    out = json.loads(rep.to_json())
    for c in COEFFS:
        assert c in out and c + "_se" in out
    assert out["replicates"] == 50 and out["z_cells"] == 6 and out["seed"] == 11
    assert out["bound"] == pytest.approx(rep.K * rep.total)


def test_grid_convergence_on_cell_grid():
    F = pair_count([1, 2, 3])
    V = VectorFunctional([F])
    mu = SPACE.control_measure()
    a, b, ok = grid_convergence(V, MixedTarget([3.5]), 100, 12, CellGrid(mu, 12))
    # the midpoint grid resolves the cells exactly, so refinement changes nothing
    assert ok and a.bias_estimate == pytest.approx(0.0, abs=1e-12)
    exact = estimate_coefficients(V, MixedTarget([3.5]), 100, 12, GRID)
    assert a.alpha1 == pytest.approx(exact.alpha1, rel=1e-12)


# ---------------------------------------------------------------- assembly

def test_assemble_examples():
    assert assemble_portmanteau([0.0] * 6, 5.0).value == 0.0
    b = assemble_portmanteau((0.1, 0, 0, 0.2, 0, 0.05), 10.0)
    assert b.value == pytest.approx(3.5, abs=1e-14)
    with pytest.raises(ValueError):
        assemble_portmanteau((0.1, -0.1, 0, 0, 0, 0), 1.0)
    d = assemble_portmanteau({"beta": 0.2}, 2.0, {"beta": 0.01})
    assert d == (0.4, 0.02)


def test_assemble_disjoint_case_is_gamma2_only():
    V = VectorFunctional([window_functional(SPACE, [2])], [first_chaos_functional(half_h([0, 1, 3, 4, 5]))])
    rep = estimate_coefficients(V, MixedTarget([2.0], 1.0), 100, 13, GRID)
    bound = assemble_portmanteau(rep, rep.K)
    assert bound.value == rep.K * 0.5 and bound.se == 0.0


# ---------------------------------------------------------------- Hoelder, stable, SVP

def test_holder_trivial_cases():
    F = window_functional(SPACE, A)
    zero = first_chaos_functional(SymKernel.constant(0.0, 1, SPACE))
    rep = holder_beta_criterion(VectorFunctional([F], [zero]), 3.0, 100, 14, GRID)
    assert rep.term1[0] == 2.0 and rep.term1_se[0] == 0.0
    assert rep.term2[0] == 0.0 and rep.majorant == 0.0
    with pytest.raises(ValueError):
        holder_beta_criterion(VectorFunctional([F], [zero]), 1.0, 10, 0, GRID)


def test_holder_pathwise():
    rng = np.random.default_rng(15)
    f = symmetrize(rng.uniform(-1, 1, (6, 6)), SPACE)
    V = VectorFunctional([pair_count([0, 1, 2])], [DiscreteChaosFunctional.multiple_integral(f)])
    rep = holder_beta_criterion(V, 3.0, 1000, 15, GRID)
    assert rep.pathwise_ok
    assert rep.beta <= rep.majorant + 4 * rep.beta_se


def test_stable_condition_window():
    F = window_functional(SPACE, [0, 2])
    rep = stable_condition_estimates(F, [lambda x: x[:, 0] < 2.0, lambda x: x[:, 0] >= 2.0], 50, 16, GRID)
    assert rep[0]["int_D"][0] == (1.0, 0.0)
    assert rep[1]["int_D"][0] == (2.0, 0.0)
    for r in rep:
        assert r["D_Dm1"][0] == (0.0, 0.0)


def test_svp_first_chaos():
    c = 0.75
    h = SymKernel(c * SPACE.indicator([2, 3]), SPACE)
    rows = svp_diagnostics([first_chaos_functional(h)], 4000, 17, GRID)
    r = rows[0]
    norm2 = c * c * 2.5
    assert r.DB2 == (norm2, 0.0)
    assert r.DB4 == (c ** 4 * 2.5, 0.0)
    assert abs(r.B2[0] - norm2) < 4 * r.B2[1]
    assert not r.ordering_violated


def test_svp_random_second_chaos():
    rng = np.random.default_rng(18)
    B = [DiscreteChaosFunctional.multiple_integral(symmetrize(rng.uniform(-1, 1, (6, 6)), SPACE) * s)
         for s in (1.0, 0.5, 0.25)]
    rows = svp_diagnostics(B, 500, 18, GRID)
    assert not any(r.ordering_violated for r in rows)
    assert rows[0].B2[0] > rows[2].B2[0]


def test_covariance_identity_ustat_pair():
    F = pair_count([0, 1, 2])
    G = DiscreteChaosFunctional.from_ustat(UStatistic(2, SymKernel.indicator_power(SPACE, [2, 3, 4], 2, 0.5)))
    im, ise, cm, cse, z = covariance_identity(F, G, 4000, 19, GRID)
    assert abs(z) < 4
    assert im > 0


# ---------------------------------------------------------------- U-statistic bounds

def _oracle_gauss_bound(gs, sigma, w):
    k = len(gs)
    best = 0.0
    for i in range(1, k + 1):
        for j in range(i, k + 1):
            for r in range(1, i + 1):
                for l in range(1, r + 1):
                    if l == j or gs[i - 1] is None or gs[j - 1] is None:
                        continue
                    c = loop_contract(gs[i - 1], gs[j - 1], r, l, w)
                    best = max(best, loop_norm(c, w, 2))
    l4 = max(loop_norm(g, w, 4) ** 2 for g in gs if g is not None)
    return (best + l4) / sigma ** 2


def test_ustat_gaussian_bound_oracle():
    space = DiscreteMeasure([1.0, 0.5, 2.0])
    U = UStatistic(2, SymKernel.indicator_power(space, [0, 2], 2, 0.5))
    dec = DiscreteChaosFunctional.from_ustat(U).decomposition
    gs = dec.projections
    got = ustat_gaussian_bound(gs, 1.7)
    want = _oracle_gauss_bound([g.values for g in gs], 1.7, space.weights)
    assert got == pytest.approx(want, rel=1e-12)
    scaled = ustat_gaussian_bound([g * 3.0 for g in gs], 1.7 * 3.0)
    assert scaled == pytest.approx(got, rel=1e-12)
    only2 = ustat_gaussian_bound([None, gs[1]], 1.0)
    assert only2 == pytest.approx(_oracle_gauss_bound([None, gs[1].values], 1.0, space.weights), rel=1e-12)
    with pytest.raises(ValueError):
        ustat_gaussian_bound(gs, 0.0)


def test_ustat_poisson_bound():
    assert ustat_poisson_bound(1.3, 1.3, 0.0) == 0.0
    assert ustat_poisson_bound(1.0, 1.0, 1.0) == pytest.approx(4 * (1 - math.exp(-1)), abs=1e-12)
    assert ustat_poisson_bound(2.0, 1.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        ustat_poisson_bound(0.0, 1.0, 0.1)


def _oracle_rho(O, w):
    k = O.ndim
    M = len(w)
    best = 0.0
    for j in range(1, k):
        for o in itertools.product(range(M), repeat=k - j):
            tot = 0.0
            for y in itertools.product(range(M), repeat=j):
                if O[y + o]:
                    tot += np.prod([w[c] for c in y])
            best = max(best, tot)
    return best


def test_rho_n():
    space = DiscreteMeasure([1.0, 0.25, 2.0, 0.5])
    assert rho_n(np.zeros((4, 4), bool), space) == 0.0
    a = space.indicator([1, 2]).astype(bool)
    assert rho_n(np.multiply.outer(a, a), space) == 2.25
    rng = np.random.default_rng(20)
    for k in (2, 3):
        raw = rng.random((4,) * k) < 0.4
        sym = np.zeros_like(raw)
        for p in itertools.permutations(range(k)):
            sym |= raw.transpose(p)
        assert rho_n(sym, space) == pytest.approx(_oracle_rho(sym, space.weights), rel=1e-12)
    with pytest.raises(ValueError):
        rho_n(np.triu(np.ones((4, 4), bool)), space)


def test_depoisson_coefficient():
    assert depoisson_coefficient(50, 0) == 1.0
    assert depoisson_coefficient(1, 1) == pytest.approx(1 - math.exp(-1), abs=1e-12)
    vals = [depoisson_coefficient(n, 2) for n in (10, 100, 1000)]
    assert all(0 < v <= 1 for v in vals)
    assert vals[0] < vals[1] < vals[2]
    assert 1 - vals[2] < 1 - vals[0]
    with pytest.raises(ValueError):
        depoisson_coefficient(1, 2)


def test_depoisson_against_direct_series():
    from scipy import stats
    n, l = 40, 3
    p = np.arange(0, 400)
    ratio = np.array([math.comb(min(n, q), l) / math.comb(n, l) for q in p])
    assert depoisson_coefficient(n, l) == pytest.approx(float(np.sum(stats.poisson.pmf(p, n) * ratio)), abs=1e-12)
