"""Monte Carlo estimators of the six mixed-bound coefficients and related diagnostics.

Every coefficient is an expectation over configurations of an integral over
the control space.  The inner integral is a deterministic quadrature supplied
by a *z-grid* object exposing ``nodes_weights(config) -> (nodes, weights)``;
weights already include the control measure.  All inner integrals go through
:func:`portmanteau.kernel_algebra.wsum`, so identical integrands give
bitwise identical results.
"""
from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import special, stats

from .chaos import DiscreteChaosFunctional, FunctionalEvaluator, UStatistic
from .kernel_algebra import DiscreteMeasure, Kernel, SymKernel, contract, norm, wsum
from .poisson_space import ControlMeasure, Configuration, Window, replicate_rng, sample_configuration
from .stein import portmanteau_constant

__all__ = [
    "RunningStats",
    "VectorFunctional",
    "MixedTarget",
    "CoefficientReport",
    "DiscreteGrid",
    "CellGrid",
    "window_functional",
    "first_chaos_functional",
    "estimate_coefficients",
    "estimate_poisson_coeffs",
    "estimate_gaussian_coeffs",
    "estimate_cross_coeff",
    "grid_convergence",
    "assemble_portmanteau",
    "holder_beta_criterion",
    "stable_condition_estimates",
    "svp_diagnostics",
    "covariance_identity",
    "ustat_gaussian_bound",
    "ustat_poisson_bound",
    "rho_n",
    "depoisson_coefficient",
]

COEFFS = ("alpha1", "alpha2", "alpha3", "beta", "gamma1", "gamma2")


class RunningStats:
    """Welford accumulator for a fixed-length vector, mergeable across chunks."""

    def __init__(self, size: int):
        self.n = 0
        self._mean = np.zeros(size)
        self._m2 = np.zeros(size)

    def push(self, x) -> None:
        x = np.asarray(x, dtype=float)
        self.n += 1
        delta = x - self._mean
        self._mean += delta / self.n
        self._m2 += delta * (x - self._mean)

    def merge(self, other: "RunningStats") -> "RunningStats":
        out = RunningStats(self._mean.size)
        n = self.n + other.n
        if n == 0:
            return out
        delta = other._mean - self._mean
        out.n = n
        out._mean = self._mean + delta * other.n / n
        out._m2 = self._m2 + other._m2 + delta ** 2 * self.n * other.n / n
        return out

    @property
    def mean(self) -> np.ndarray:
        return self._mean.copy()

    @property
    def var(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self._mean)
        return self._m2 / (self.n - 1)

    @property
    def se(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self._mean)
        return np.sqrt(self.var / self.n)


class VectorFunctional:
    """Integer-valued part ``F_1..F_d`` and centred part ``G_1..G_m``."""

    def __init__(self, poisson: Sequence[FunctionalEvaluator] = (),
                 gaussian: Sequence[FunctionalEvaluator] = ()):
        self.poisson = list(poisson)
        self.gaussian = list(gaussian)
        for F in self.poisson + self.gaussian:
            if F.decomposition is None:
                raise ValueError(f"functional {F.name or F.tag!r} lacks a chaos decomposition")

    @property
    def d(self) -> int:
        return len(self.poisson)

    @property
    def m(self) -> int:
        return len(self.gaussian)

    def values(self, config: Configuration):
        """``(F values, G values)``; raises if an integer part is not in Z_+."""
        f = np.array([F(config) for F in self.poisson], dtype=float)
        if np.any(f < 0) or np.any(f != np.round(f)):
            raise ValueError(f"integer part produced non Z_+ values {f.tolist()}")
        g = np.array([G(config) for G in self.gaussian], dtype=float)
        return f, g


class MixedTarget:
    """Independent ``Po(lambda_1..lambda_d)`` and ``N(0, C)``."""

    def __init__(self, lambdas: Sequence[float] = (), C=None):
        self.lambdas = np.array([float(v) for v in lambdas])
        if np.any(self.lambdas <= 0):
            raise ValueError("Poisson means must be positive")
        C = np.zeros((0, 0)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        if C.shape[0] != C.shape[1]:
            raise ValueError("C must be square")
        if not np.allclose(C, C.T, atol=1e-12, rtol=0):
            raise ValueError("C must be symmetric")
        if C.size and np.linalg.eigvalsh(C).min() < -1e-10:
            raise ValueError("C must be positive semidefinite")
        self.C = C

    @property
    def d(self) -> int:
        return self.lambdas.size

    @property
    def m(self) -> int:
        return self.C.shape[0]


@dataclass
class CoefficientReport:
    values: Dict[str, float]
    ses: Dict[str, float]
    replicates: int
    z_cells: int
    seed: int
    K: Optional[float] = None
    total: float = 0.0
    total_se: float = 0.0
    exact_grid: bool = True
    bias_estimate: Optional[float] = None
    negative: List[str] = field(default_factory=list)

    def __getattr__(self, name):
        if name in COEFFS:
            return self.values[name]
        raise AttributeError(name)

    @property
    def bound(self) -> Optional[float]:
        return None if self.K is None else self.K * self.total

    @property
    def bound_se(self) -> Optional[float]:
        return None if self.K is None else self.K * self.total_se

    def to_json(self) -> str:
        out = {}
        for c in COEFFS:
            out[c] = self.values[c]
            out[c + "_se"] = self.ses[c]
        out.update(bound=self.bound, bound_se=self.bound_se, replicates=self.replicates,
                   z_cells=self.z_cells, seed=self.seed, quadrature_bias=not self.exact_grid,
                   bias_estimate=self.bias_estimate)
        return json.dumps(out, sort_keys=True)


class DiscreteGrid:
    """Exact z-integration on a cell space: one node per cell."""

    exact = True

    def __init__(self, space: DiscreteMeasure):
        self.space = space
        self.measure = space.control_measure()
        self._nodes = (np.arange(space.cell_count) + 0.5).reshape(-1, 1)

    @property
    def cells(self) -> int:
        return self.space.cell_count

    def nodes_weights(self, config=None):
        return self._nodes, self.space.weights

    def refine(self) -> "DiscreteGrid":
        return self


class CellGrid:
    """Midpoint rule on a uniform grid of ``cells`` per axis over the box."""

    exact = False

    def __init__(self, measure: ControlMeasure, cells: int = 64):
        if cells < 1:
            raise ValueError("need at least one cell per axis")
        self.measure = measure
        self.per_axis = int(cells)
        axes = [lo + (np.arange(cells) + 0.5) * (hi - lo) / cells
                for lo, hi in zip(measure.lower, measure.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self._nodes = np.stack([g.reshape(-1) for g in mesh], axis=1)
        vol = measure.volume / cells ** measure.dim
        self._weights = measure.intensity * vol * measure.density(self._nodes)

    @property
    def cells(self) -> int:
        return self._nodes.shape[0]

    def nodes_weights(self, config=None):
        return self._nodes, self._weights

    def refine(self) -> "CellGrid":
        return CellGrid(self.measure, 2 * self.per_axis)


def window_functional(space: DiscreteMeasure, cells, name: str = "") -> DiscreteChaosFunctional:
    """``eta(A)`` for a set of cells ``A``, as an order-one U-statistic (integer exact)."""
    U = UStatistic(1, SymKernel(space.indicator(cells), space))
    return DiscreteChaosFunctional.from_ustat(U, name=name or f"eta({sorted(cells)})")


def first_chaos_functional(h: SymKernel, name: str = "") -> DiscreteChaosFunctional:
    """``I_1(h)``."""
    if h.order != 1:
        raise ValueError("need an order-one kernel")
    return DiscreteChaosFunctional.multiple_integral(h, name=name or "I1(h)")


def _derivatives(parts, config, nodes):
    if not parts:
        return np.zeros((0, nodes.shape[0])), np.zeros((0, nodes.shape[0]))
    D = np.array([F.add_one_cost(config, nodes) for F in parts], dtype=float)
    L = np.array([F.dlinv(config, nodes) for F in parts], dtype=float)
    return D, L


def _replicate_coeffs(w, DF, LF, DG, LG, lambdas, C):
    d, m = DF.shape[0], DG.shape[0]
    a1 = sum(abs(lambdas[i] - wsum(w, DF[i] * -LF[i])) for i in range(d))
    a2 = sum(wsum(w, np.abs(DF[i] * (DF[i] - 1) * LF[i])) for i in range(d))
    a3 = 0.0
    for i, j in itertools.permutations(range(d), 2):
        a3 += abs(wsum(w, DF[i] * -LF[j]))
        a3 += wsum(w, np.abs(DF[j] * (DF[j] - 1) * LF[i]))
    for j, k in itertools.permutations(range(d), 2):
        for i in range(d):
            a3 += wsum(w, np.abs(DF[j] * DF[k] * LF[i]))
    beta = sum(wsum(w, np.abs(LG[j]) * np.abs(DF[i])) for i in range(d) for j in range(m))
    g1 = sum(abs(C[j, k] - wsum(w, DG[j] * -LG[k])) for j in range(m) for k in range(m))
    g2 = wsum(w, np.abs(DG).sum(axis=0) ** 2 * np.abs(LG).sum(axis=0)) if m else 0.0
    return np.array([a1, a2, a3, beta, g1, g2])


CHUNK = 64


def _chunks(replicates: int):
    # fixed blocks so the merge order, and hence every bit, ignores the thread count
    return [(s, min(replicates, s + CHUNK)) for s in range(0, replicates, CHUNK)]


def _reduce(work, replicates: int, size: int, threads: int = 1) -> RunningStats:
    """Run ``work(index) -> vector`` over replicates and merge chunk accumulators in order."""

    def run(bounds):
        acc = RunningStats(size)
        for r in range(*bounds):
            acc.push(work(r))
        return acc

    parts = _chunks(replicates)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            accs = list(ex.map(run, parts))
    else:
        accs = [run(p) for p in parts]
    total = RunningStats(size)
    for a in accs:
        total = total.merge(a)
    return total


def estimate_coefficients(V: VectorFunctional, target: MixedTarget, replicates: int, seed: int,
                          grid, threads: int = 1) -> CoefficientReport:
    """All six coefficients on shared realizations, plus their sum.

    Parts with ``d = 0`` or ``m = 0`` contribute zero.  ``K`` is attached
    when the constant is defined for ``(d, m)``.
    """
    if V.d != target.d or V.m != target.m:
        raise ValueError("target dimensions differ from the functional")
    if replicates < 2:
        raise ValueError("need at least two replicates")
    measure = grid.measure

    def work(r):
        config = sample_configuration(measure, replicate_rng(seed, r))
        V.values(config)
        nodes, w = grid.nodes_weights(config)
        DF, LF = _derivatives(V.poisson, config, nodes)
        DG, LG = _derivatives(V.gaussian, config, nodes)
        c = _replicate_coeffs(w, DF, LF, DG, LG, target.lambdas, target.C)
        return np.append(c, c.sum())

    acc = _reduce(work, replicates, 7, threads)
    mean, se = acc.mean, acc.se
    values = dict(zip(COEFFS, mean[:6].tolist()))
    ses = dict(zip(COEFFS, se[:6].tolist()))
    negative = [c for c in COEFFS if values[c] < -4 * ses[c]]
    K = None
    if V.d >= 1 and (V.m != 1 or target.C[0, 0] > 0):
        K = portmanteau_constant(V.d, V.m, target.lambdas,
                                 float(target.C[0, 0]) if V.m == 1 else None)
    return CoefficientReport(values, ses, replicates, grid.cells, seed, K, float(mean[6]),
                             float(se[6]), bool(getattr(grid, "exact", False)), None, negative)


def estimate_poisson_coeffs(V, target, replicates, seed, grid, threads=1):
    """``(alpha1, alpha2, alpha3)`` as ``(value, se)`` pairs."""
    if V.d == 0:
        raise ValueError("no integer-valued components")
    rep = estimate_coefficients(V, target, replicates, seed, grid, threads)
    return tuple((rep.values[c], rep.ses[c]) for c in COEFFS[:3])


def estimate_gaussian_coeffs(V, target, replicates, seed, grid, threads=1):
    """``(gamma1, gamma2)`` as ``(value, se)`` pairs."""
    if V.m == 0:
        raise ValueError("no Gaussian components")
    rep = estimate_coefficients(V, target, replicates, seed, grid, threads)
    return tuple((rep.values[c], rep.ses[c]) for c in COEFFS[4:])


def estimate_cross_coeff(V, replicates, seed, grid, threads=1):
    """``beta`` as ``(value, se)``; D acts on the integer part, DL^{-1} on the Gaussian part."""
    if V.d * V.m == 0:
        raise ValueError("beta needs both parts")
    target = MixedTarget(np.ones(V.d), np.eye(V.m))
    rep = estimate_coefficients(V, target, replicates, seed, grid, threads)
    return rep.values["beta"], rep.ses["beta"]


def grid_convergence(V, target, replicates, seed, grid, threads=1):
    """Compare estimates on ``grid`` and its refinement over the same realizations.

    Returns ``(report, refined_report, passed)`` where ``passed`` means every
    coefficient moved by less than one standard error.  The report carries
    the change of the sum as its bias estimate.
    """
    a = estimate_coefficients(V, target, replicates, seed, grid, threads)
    b = estimate_coefficients(V, target, replicates, seed, grid.refine(), threads)
    passed = all(abs(a.values[c] - b.values[c]) <= max(a.ses[c], 1e-300) or a.values[c] == b.values[c]
                 for c in COEFFS)
    a.bias_estimate = b.bias_estimate = abs(a.total - b.total)
    return a, b, passed


class Bound(NamedTuple):
    value: float
    se: float

    def __float__(self):
        return self.value


def assemble_portmanteau(coeffs, K: float, ses=None) -> Bound:
    """``K * (alpha1 + alpha2 + alpha3 + beta + gamma1 + gamma2)``.

    ``coeffs`` is a :class:`CoefficientReport`, a mapping or a 6-sequence.
    For reports the standard error of the sum is taken from the shared
    realizations; for bare values the standard errors are added, which
    cannot underestimate it.
    """
    if K is None or not K > 0:
        raise ValueError("K must be positive")
    if isinstance(coeffs, CoefficientReport):
        vals = [coeffs.values[c] for c in COEFFS]
        if any(v < 0 for v in vals):
            raise ValueError(f"negative coefficient in {vals}")
        return Bound(K * sum(vals), K * coeffs.total_se)
    if isinstance(coeffs, dict):
        vals = [float(coeffs.get(c, 0.0)) for c in COEFFS]
        ses = [float((ses or {}).get(c, 0.0)) for c in COEFFS]
    else:
        vals = [float(v) for v in coeffs]
        if len(vals) != 6:
            raise ValueError("need six coefficients")
        ses = [0.0] * 6 if ses is None else [float(s) for s in ses]
    if any(v < 0 for v in vals):
        raise ValueError(f"negative coefficient in {vals}")
    return Bound(K * sum(vals), K * sum(ses))


@dataclass
class HolderReport:
    term1: np.ndarray
    term1_se: np.ndarray
    term2: np.ndarray
    term2_se: np.ndarray
    majorant: float
    beta: float
    beta_se: float
    pathwise_ok: bool


def holder_beta_criterion(V: VectorFunctional, epsilon: float, replicates: int, seed: int,
                          grid, threads: int = 1) -> HolderReport:
    """Hölder majorant of ``beta`` with exponent ``1 + epsilon``.

    ``term1[i] = E int (D F_i)^2`` and ``term2[j] = E int |D L^{-1} G_j|^{1+eps}``;
    the majorant is ``sum_ij term1_i^{eps/(1+eps)} term2_j^{1/(1+eps)}``.
    ``pathwise_ok`` records whether the same inequality held on every
    sampled configuration.
    """
    if not epsilon > 1:
        raise ValueError("epsilon must exceed 1")
    d, m = V.d, V.m
    p, q = epsilon / (1 + epsilon), 1 / (1 + epsilon)
    measure = grid.measure
    ok = [True]

    def work(r):
        config = sample_configuration(measure, replicate_rng(seed, r))
        nodes, w = grid.nodes_weights(config)
        DF, _ = _derivatives(V.poisson, config, nodes)
        _, LG = _derivatives(V.gaussian, config, nodes)
        t1 = np.array([wsum(w, DF[i] ** 2) for i in range(d)])
        t2 = np.array([wsum(w, np.abs(LG[j]) ** (1 + epsilon)) for j in range(m)])
        b = sum(wsum(w, np.abs(LG[j]) * np.abs(DF[i])) for i in range(d) for j in range(m))
        path = sum(t1[i] ** p * t2[j] ** q for i in range(d) for j in range(m))
        if b > path * (1 + 1e-12) + 1e-300:
            ok[0] = False
        return np.concatenate([t1, t2, [b]])

    acc = _reduce(work, replicates, d + m + 1, 1)
    mean, se = acc.mean, acc.se
    t1, t2 = mean[:d], mean[d:d + m]
    maj = float(sum(t1[i] ** p * t2[j] ** q for i in range(d) for j in range(m)))
    return HolderReport(t1, se[:d], t2, se[d:d + m], maj, float(mean[-1]), float(se[-1]), ok[0])


def _window_mask(A, nodes):
    if isinstance(A, Window):
        return A.contains(nodes)
    return np.asarray(A(nodes), dtype=bool)


def stable_condition_estimates(F, windows, replicates: int, seed: int, grid) -> List[dict]:
    """Window quantities behind the stable Poisson convergence conditions.

    ``F`` is one functional or a sequence.  For each window ``A`` the result
    holds ``(mean, se)`` pairs:

    - ``int_D[i]``: ``E|int_A D F_i|``
    - ``D_Dm1[i]``: ``E int_A |D F_i (D F_i - 1)|``
    - ``int_DL[i]``: ``E|int_A D L^{-1} F_i|``
    - ``DD[(i, j)]``: ``E int_A |D F_i D F_j|`` for ``i != j``
    - ``DDL_same[i]``: ``E int_A |D F_i D L^{-1} F_i|`` (index repeated)
    - ``DDL_cross[(i, j)]``: ``E int_A |D F_i D L^{-1} F_j|`` for ``i != j``
    """
    Fs = list(F) if isinstance(F, (list, tuple)) else [F]
    d = len(Fs)
    pairs = list(itertools.permutations(range(d), 2))
    measure = grid.measure
    per_window = 3 * d + 2 * len(pairs) + d

    def work(r):
        config = sample_configuration(measure, replicate_rng(seed, r))
        nodes, w = grid.nodes_weights(config)
        D, L = _derivatives(Fs, config, nodes)
        out = []
        for A in windows:
            wa = np.where(_window_mask(A, nodes), w, 0.0)
            out += [abs(wsum(wa, D[i])) for i in range(d)]
            out += [wsum(wa, np.abs(D[i] * (D[i] - 1))) for i in range(d)]
            out += [abs(wsum(wa, L[i])) for i in range(d)]
            out += [wsum(wa, np.abs(D[i] * D[j])) for i, j in pairs]
            out += [wsum(wa, np.abs(D[i] * L[i])) for i in range(d)]
            out += [wsum(wa, np.abs(D[i] * L[j])) for i, j in pairs]
        return np.array(out)

    acc = _reduce(work, replicates, per_window * len(windows))
    mean, se = acc.mean, acc.se
    reports = []
    for a in range(len(windows)):
        base = a * per_window
        take = lambda s, n: list(zip(mean[base + s:base + s + n].tolist(), se[base + s:base + s + n].tolist()))
        rep = {
            "int_D": take(0, d),
            "D_Dm1": take(d, d),
            "int_DL": take(2 * d, d),
            "DD": dict(zip(pairs, take(3 * d, len(pairs)))),
            "DDL_same": take(3 * d + len(pairs), d),
            "DDL_cross": dict(zip(pairs, take(4 * d + len(pairs), len(pairs)))),
        }
        reports.append(rep)
    return reports


@dataclass
class SVPRow:
    index: int
    B2: tuple
    DB2: tuple
    DLB2: tuple
    DB4: tuple
    DLB4: tuple
    ordering_violated: bool


def svp_diagnostics(B: Sequence[FunctionalEvaluator], replicates: int, seed: int, grids) -> List[SVPRow]:
    """Moments of a perturbation sequence and its derivatives, one row per element.

    ``grids`` is one z-grid or one per element.  ``ordering_violated`` is set
    when ``E||DB||^2 < E||DL^{-1}B||^2`` or the fourth-power analogue fails by
    more than 4 standard errors of the paired difference.
    """
    if not isinstance(grids, (list, tuple)):
        grids = [grids] * len(B)
    rows = []
    for n, (Bn, grid) in enumerate(zip(B, grids)):
        measure = grid.measure
        mean_b = Bn.mean if Bn.decomposition is not None else 0.0

        def work(r, Bn=Bn, grid=grid, mean_b=mean_b, measure=measure):
            config = sample_configuration(measure, replicate_rng(seed, r))
            nodes, w = grid.nodes_weights(config)
            D = np.asarray(Bn.add_one_cost(config, nodes), dtype=float)
            L = np.asarray(Bn.dlinv(config, nodes), dtype=float)
            v = [(Bn(config) - mean_b) ** 2, wsum(w, D ** 2), wsum(w, L ** 2),
                 wsum(w, D ** 4), wsum(w, L ** 4)]
            return np.array(v + [v[1] - v[2], v[3] - v[4]])

        acc = _reduce(work, replicates, 7)
        mean, se = acc.mean, acc.se
        bad = bool(mean[5] < -4 * se[5] or mean[6] < -4 * se[6])
        pair = lambda i: (float(mean[i]), float(se[i]))
        rows.append(SVPRow(n, pair(0), pair(1), pair(2), pair(3), pair(4), bad))
    return rows


def covariance_identity(F: FunctionalEvaluator, G: FunctionalEvaluator, replicates: int, seed: int, grid):
    """Paired check of ``E<DG, -DL^{-1}F> = Cov(G, F)`` with exact means.

    Returns ``(integral_mean, integral_se, cov_mean, cov_se, z)`` where ``z``
    is the mean of the per-replicate difference over its standard error.
    """
    measure = grid.measure
    mf, mg = F.mean, G.mean

    def work(r):
        config = sample_configuration(measure, replicate_rng(seed, r))
        nodes, w = grid.nodes_weights(config)
        x = wsum(w, np.asarray(G.add_one_cost(config, nodes)) * -np.asarray(F.dlinv(config, nodes)))
        y = (G(config) - mg) * (F(config) - mf)
        return np.array([x, y, x - y])

    acc = _reduce(work, replicates, 3)
    mean, se = acc.mean, acc.se
    z = 0.0 if se[2] == 0 else float(mean[2] / se[2])
    return float(mean[0]), float(se[0]), float(mean[1]), float(se[1]), z


def _ustat_quadruples(k: int):
    for l, r, i, j in itertools.product(range(1, k + 1), repeat=4):
        if l <= r <= i <= j and l != j:
            yield i, j, r, l


def ustat_gaussian_bound(projections: Sequence[Kernel], sigma: float) -> float:
    """``(1/sigma^2) [max ||g_i *_r^l g_j||_2 + max_i ||g_i||_4^2]``.

    ``projections[i-1]`` is ``g_i`` on a discrete space (``None`` means zero).
    The maximum runs over ``1 <= l <= r <= i <= j <= k`` with ``l != j``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    k = len(projections)
    best = 0.0
    for i, j, r, l in _ustat_quadruples(k):
        gi, gj = projections[i - 1], projections[j - 1]
        if gi is None or gj is None:
            continue
        best = max(best, norm(contract(gi, gj, r, l), 2))
    l4 = max((norm(g, 4) ** 2 for g in projections if g is not None), default=0.0)
    return (best + l4) / sigma ** 2


def ustat_poisson_bound(lambda_n: float, lam: float, rho: float, Dconst: float = 1.0) -> float:
    """``|lambda_n - lambda| + D ((1-e^{-l_n})/l_n)(1 + 1/l_n) sqrt((l_n + l_n^2)(rho + rho^4))``.

    ``Dconst`` is an unspecified constant; only rates are meaningful.
    """
    if not lambda_n > 0 or not lam > 0:
        raise ValueError("Poisson means must be positive")
    if rho < 0 or not Dconst > 0:
        raise ValueError("need rho >= 0 and a positive constant")
    ln = float(lambda_n)
    fac = -math.expm1(-ln) / ln * (1 + 1 / ln)
    return abs(ln - lam) + Dconst * fac * math.sqrt((ln + ln ** 2) * (rho + rho ** 4))


def rho_n(O, space: DiscreteMeasure) -> float:
    """``sup_j sup_o mu^j{y : (y, o) in O}`` over ``j = 1..k'-1`` by enumeration."""
    O = np.asarray(O, dtype=bool)
    k = O.ndim
    if k < 2:
        raise ValueError("need a set in a product of at least two copies")
    for perm in itertools.permutations(range(k)):
        if not np.array_equal(O, O.transpose(perm)):
            raise ValueError("O is not symmetric under coordinate permutations")
    vals = O.astype(float)
    best = 0.0
    for j in range(1, k):
        m = vals
        for _ in range(j):
            m = np.tensordot(space.weights, m, axes=(0, 0))
        best = max(best, float(m.max()))
    return best


def depoisson_coefficient(n: int, l: int, tail: float = 1e-12) -> float:
    """``b_{n,l} = sum_p Po(n)(p) C(min(n,p), l) / C(n, l)``."""
    n, l = int(n), int(l)
    if n < 1 or l < 0:
        raise ValueError("need n >= 1 and l >= 0")
    if l > n:
        raise ValueError("l must not exceed n")
    if l == 0:
        return 1.0
    lo = int(stats.poisson.ppf(tail / 2, n))
    # mass above n contributes ratio 1
    p = np.arange(max(l, lo), n + 1)
    ratio = np.exp(special.gammaln(p + 1) - special.gammaln(p - l + 1)
                   - special.gammaln(n + 1) + special.gammaln(n - l + 1))
    below = float(np.sum(stats.poisson.pmf(p, n) * ratio))
    return below + float(stats.poisson.sf(n, n))
