"""U-statistics, chaos projections, multiple integrals and Malliavin operators.

On a discrete cell space every kernel is constant on cells, so a functional
of a configuration depends only on its cell counts.  Sums over tuples of
distinct points are then evaluated exactly from the counts by Moebius
inversion over set partitions, which also vectorises over replicates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .kernel_algebra import DiscreteMeasure, Kernel, SymKernel, contract, inner, symmetrize
from .poisson_space import (Configuration, ControlMeasure, add_point, replicate_rng,
                            sample_configuration)

__all__ = [
    "distinct_sum",
    "ContinuousKernel",
    "UStatistic",
    "ChaosDecomposition",
    "FunctionalEvaluator",
    "DiscreteChaosFunctional",
    "ustat_eval",
    "hoeffding_projection",
    "multiple_integral_eval",
    "multiple_integral_counts",
    "product_formula_rhs",
    "mall_D",
    "mall_DLinv",
    "verify_isometry",
    "IsometryReport",
    "sample_counts",
]

QUAD_BUDGET = 1e8


@lru_cache(maxsize=None)
def _set_partitions(n: int):
    if n == 0:
        return ((),)
    out = []
    for part in _set_partitions(n - 1):
        for b in range(len(part)):
            out.append(part[:b] + (part[b] + (n - 1,),) + part[b + 1:])
        out.append(part + ((n - 1,),))
    return tuple(out)


def distinct_sum(values, counts, order: int):
    """Sum of a cell function over ordered tuples of distinct points.

    Parameters
    ----------
    values : ndarray
        Shape ``batch + (M,)*order``; the last ``order`` axes are cells.
    counts : ndarray
        Shape ``batch' + (M,)``; cell counts of the configuration(s).
    order : int
        Tuple length.

    Returns
    -------
    ndarray or float
        ``sum_{x in eta^order, distinct} values(cell(x))``, broadcast over the
        batch axes.
    """
    values = np.asarray(values, dtype=float)
    counts = np.asarray(counts, dtype=float)
    if order == 0:
        return values * np.ones(counts.shape[:-1])
    total = 0.0
    for blocks in _set_partitions(order):
        coef = 1
        label = [0] * order
        for b, block in enumerate(blocks):
            coef *= (-1) ** (len(block) - 1) * math.factorial(len(block) - 1)
            for a in block:
                label[a] = b
        ops = [values, [Ellipsis] + label]
        for b in range(len(blocks)):
            ops += [counts, [Ellipsis, b]]
        total = total + coef * np.einsum(*ops, [Ellipsis])
    return total


def _grid(measure: ControlMeasure, nodes: int):
    """Midpoint product grid on the box, weighted by ``mu``."""
    axes = [np.linspace(lo, hi, nodes + 1) for lo, hi in zip(measure.lower, measure.upper)]
    mids = [0.5 * (a[1:] + a[:-1]) for a in axes]
    mesh = np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1).reshape(-1, measure.dim)
    cell = float(np.prod((measure.upper - measure.lower) / nodes))
    w = measure.intensity * measure.density(mesh) * cell
    return mesh, w


class ContinuousKernel:
    """Symmetric kernel on ``(R^m)^q`` given by a vectorised callable.

    ``func`` maps an array of shape ``(N, q, m)`` to ``(N,)``.  Marginals
    integrate trailing arguments by a midpoint product rule with
    ``quad_nodes`` points per dimension.
    """

    def __init__(self, order: int, func: Callable, measure: ControlMeasure, quad_nodes: int = 64,
                 scale: float = 1.0):
        self.order = int(order)
        self.func = func
        self.measure = measure
        self.quad_nodes = int(quad_nodes)
        self.scale = float(scale)
        self._marginals = {}

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2 and self.order == 1:
            X = X[:, None, :]
        return self.scale * np.asarray(self.func(X), dtype=float)

    def marginal(self, j: int) -> "ContinuousKernel":
        if not 0 <= j <= self.order:
            raise ValueError("marginal order out of range")
        if j == self.order:
            return self
        if j in self._marginals:
            return self._marginals[j]
        r = self.order - j
        m = self.measure.dim
        if float(self.quad_nodes) ** (m * r) > QUAD_BUDGET:
            raise ValueError(f"product quadrature needs {self.quad_nodes}^{m * r} nodes, over the "
                             f"{QUAD_BUDGET:.0e} budget; use Monte Carlo integration instead")
        mesh, w = _grid(self.measure, self.quad_nodes)
        G = mesh.shape[0]
        idx = np.array(np.meshgrid(*[np.arange(G)] * r, indexing="ij")).reshape(r, -1).T
        Y = mesh[idx]
        W = np.prod(w[idx], axis=1)
        parent = self

        def func(X, Y=Y, W=W):
            X = np.asarray(X, dtype=float)
            if X.ndim != 3:
                X = X.reshape(-1, j, m)
            out = np.empty(X.shape[0])
            chunk = max(1, int(2e6 // max(1, Y.shape[0])))
            for s in range(0, X.shape[0], chunk):
                xs = X[s:s + chunk]
                big = np.concatenate([np.repeat(xs, Y.shape[0], axis=0),
                                      np.tile(Y, (xs.shape[0], 1, 1))], axis=1)
                vals = parent(big).reshape(xs.shape[0], Y.shape[0])
                out[s:s + chunk] = vals @ W
            return out

        k = ContinuousKernel(j, func, self.measure, self.quad_nodes)
        self._marginals[j] = k
        return k

    def value0(self) -> float:
        """The order-0 marginal as a number."""
        return float(self.marginal(0)(np.zeros((1, 0, self.measure.dim)))[0])

    def partial(self, z) -> "ContinuousKernel":
        """``f(z, .)`` as a kernel of order ``q - 1``."""
        z = np.asarray(z, dtype=float).reshape(1, 1, -1)
        parent = self

        def func(X):
            X = np.asarray(X, dtype=float)
            return parent(np.concatenate([np.repeat(z, X.shape[0], axis=0), X], axis=1))

        return ContinuousKernel(self.order - 1, func, self.measure, self.quad_nodes)

    def __mul__(self, a):
        return ContinuousKernel(self.order, self.func, self.measure, self.quad_nodes, self.scale * a)

    __rmul__ = __mul__


KernelLike = Union[SymKernel, ContinuousKernel]


class UStatistic:
    """``F = sum over ordered distinct k-tuples of h``.

    ``kernel`` is either a :class:`SymKernel` (discrete space) or a vectorised
    symmetric callable ``h(X)`` with ``X`` of shape ``(N, k, m)``, in which case
    ``measure`` must be a :class:`ControlMeasure`.
    """

    def __init__(self, order: int, kernel, measure: Optional[ControlMeasure] = None,
                 check_symmetry: bool = True):
        self.order = int(order)
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if isinstance(kernel, Kernel):
            if not isinstance(kernel, SymKernel):
                raise ValueError("kernel must be symmetric")
            if kernel.order != self.order:
                raise ValueError("kernel order differs from the statistic order")
            self.space = kernel.space
            self.measure = kernel.space.control_measure()
        else:
            if measure is None:
                raise ValueError("a control measure is required for a callable kernel")
            self.space = None
            self.measure = measure
            if check_symmetry and self.order > 1:
                self._spot_check(kernel)
        self.kernel = kernel

    @property
    def discrete(self) -> bool:
        return self.space is not None

    def _spot_check(self, h):
        rng = np.random.default_rng(12345)
        ms = self.measure
        X = ms.lower + (ms.upper - ms.lower) * rng.random((8, self.order, ms.dim))
        base = np.asarray(h(X), dtype=float)
        for _ in range(4):
            perm = rng.permutation(self.order)
            if not np.allclose(base, np.asarray(h(X[:, perm]), dtype=float), rtol=0, atol=1e-12):
                raise ValueError("kernel is not symmetric under argument permutation")

    def __call__(self, config: Configuration) -> float:
        return ustat_eval(self, config)


def _check_distinct(config: Configuration):
    if config.has_duplicates():
        raise ValueError("configuration has duplicate points")


def _subset_index(N: int, k: int) -> np.ndarray:
    if N < k:
        return np.zeros((0, k), dtype=int)
    return np.fromiter((i for c in combinations(range(N), k) for i in c), dtype=int).reshape(-1, k)


def ustat_eval(U: UStatistic, config: Configuration) -> float:
    """Sum of ``h`` over ordered tuples of distinct points (``k!`` times the subset sum)."""
    _check_distinct(config)
    if len(config) < U.order:
        return 0.0
    if U.discrete:
        return float(distinct_sum(U.kernel.values, U.space.counts(config), U.order))
    idx = _subset_index(len(config), U.order)
    X = config.points[idx]
    total = 0.0
    for s in range(0, X.shape[0], 200000):
        total += float(np.sum(U.kernel(X[s:s + 200000])))
    return math.factorial(U.order) * total


def hoeffding_projection(U: UStatistic, i: int, quad_nodes: int = 64) -> KernelLike:
    """Chaos kernel ``f_i = C(k, i) int h(x, y) mu^{k-i}(dy)``."""
    k = U.order
    if not 1 <= i <= k:
        raise ValueError("need 1 <= i <= k")
    if U.discrete:
        if i == k:
            return U.kernel
        return SymKernel(math.comb(k, i) * U.kernel.marginal(i), U.space)
    h = ContinuousKernel(k, U.kernel, U.measure, quad_nodes)
    if i == k:
        return h
    return math.comb(k, i) * h.marginal(i)


def multiple_integral_counts(f: Kernel, counts) -> np.ndarray:
    """``I_q(f)`` from cell counts (batched over leading axes of ``counts``)."""
    if not isinstance(f, SymKernel):
        raise ValueError("multiple integrals need a symmetric kernel; symmetrize first")
    q = f.order
    out = 0.0
    for i in range(q + 1):
        out = out + (-1) ** (q - i) * math.comb(q, i) * distinct_sum(f.marginal(i), counts, i)
    return out


def multiple_integral_eval(f: KernelLike, config: Configuration, measure=None) -> float:
    """``I_q(f)`` on a configuration by inclusion-exclusion over distinct sub-tuples."""
    if isinstance(f, Kernel):
        if not isinstance(f, SymKernel):
            raise ValueError("multiple integrals need a symmetric kernel; symmetrize first")
        _check_distinct(config)
        return float(multiple_integral_counts(f, f.space.counts(config)))
    if not isinstance(f, ContinuousKernel):
        raise TypeError("unsupported kernel type")
    _check_distinct(config)
    q = f.order
    total = 0.0
    for i in range(q + 1):
        coef = (-1) ** (q - i) * math.comb(q, i)
        if i == 0:
            total += coef * f.value0()
            continue
        if len(config) < i:
            continue
        idx = _subset_index(len(config), i)
        total += coef * math.factorial(i) * float(np.sum(f.marginal(i)(config.points[idx])))
    return total


def product_formula_rhs(f: SymKernel, g: SymKernel, config: Configuration, measure=None) -> float:
    """Right side of the product formula for ``I_p(f) I_q(g)`` on one configuration."""
    counts = f.space.counts(config)
    _check_distinct(config)
    p, q = f.order, g.order
    total = 0.0
    for r in range(min(p, q) + 1):
        for l in range(r + 1):
            coef = math.factorial(r) * math.comb(p, r) * math.comb(q, r) * math.comb(r, l)
            h = symmetrize(contract(f, g, r, l))
            total += coef * float(multiple_integral_counts(h, counts))
    return total


class ChaosDecomposition:
    """``F = mean + sum_i I_i(f_i)``; ``projections[i-1]`` is ``f_i`` or ``None`` for zero."""

    def __init__(self, mean: float, projections: Sequence[Optional[KernelLike]]):
        self.mean = float(mean)
        self.projections = list(projections)
        for i, f in enumerate(self.projections, start=1):
            if f is not None and f.order != i:
                raise ValueError(f"projection {i} has order {f.order}")

    @property
    def order(self) -> int:
        return len(self.projections)

    @classmethod
    def from_ustat(cls, U: UStatistic, quad_nodes: int = 64) -> "ChaosDecomposition":
        projs = [hoeffding_projection(U, i, quad_nodes) for i in range(1, U.order + 1)]
        if U.discrete:
            mean = float(U.kernel.marginal(0))
        else:
            mean = ContinuousKernel(U.order, U.kernel, U.measure, quad_nodes).value0()
        return cls(mean, projs)

    @classmethod
    def single(cls, f: KernelLike, mean: float = 0.0) -> "ChaosDecomposition":
        return cls(mean, [None] * (f.order - 1) + [f])

    def evaluate(self, config: Configuration) -> float:
        return self.mean + sum(multiple_integral_eval(f, config) for f in self.projections if f is not None)


class FunctionalEvaluator:
    """Pure map from configurations to reals with a structure tag.

    ``tag`` is one of ``"u-statistic"``, ``"multiple-integral"`` or
    ``"composite"``.  Subclasses may override :meth:`add_one_cost` and
    :meth:`dlinv` with exact vectorised versions.
    """

    def __init__(self, func: Callable[[Configuration], float], tag: str = "composite",
                 decomposition: Optional[ChaosDecomposition] = None, name: str = ""):
        if tag not in ("u-statistic", "multiple-integral", "composite"):
            raise ValueError(f"unknown tag {tag!r}")
        self.func = func
        self.tag = tag
        self.decomposition = decomposition
        self.name = name

    def __call__(self, config: Configuration) -> float:
        return float(self.func(config))

    @property
    def mean(self) -> float:
        if self.decomposition is None:
            raise ValueError("no chaos decomposition attached")
        return self.decomposition.mean

    def add_one_cost(self, config: Configuration, nodes) -> np.ndarray:
        """``D_z F`` at every row of ``nodes``."""
        base = self(config)
        return np.array([self(add_point(config, z)) - base for z in np.asarray(nodes)])

    def dlinv(self, config: Configuration, nodes) -> np.ndarray:
        """``D_z L^{-1}(F - EF)`` at every row of ``nodes``."""
        if self.decomposition is None:
            raise ValueError(f"functional {self.name or self.tag!r} has no chaos decomposition")
        return np.array([mall_DLinv(self.decomposition, config, z) for z in np.asarray(nodes)])


def mall_D(F: Callable[[Configuration], float], config: Configuration, z) -> float:
    """Add-one cost ``F(config + delta_z) - F(config)``."""
    return float(F(add_point(config, z))) - float(F(config))


def mall_DLinv(F: ChaosDecomposition, config: Configuration, z) -> float:
    """``D_z L^{-1}(F - EF) = -sum_i I_{i-1}(f_i(z, .))``."""
    if isinstance(F, FunctionalEvaluator):
        F = F.decomposition
    if F is None or not F.projections:
        raise ValueError("chaos projections are missing")
    z = np.asarray(z, dtype=float).reshape(-1)
    total = 0.0
    for f in F.projections:
        if f is None:
            continue
        if isinstance(f, Kernel):
            cell = int(f.space.cell_of(z[:1])[0])
            if f.order == 1:
                total += float(f.values[cell])
            else:
                total += multiple_integral_eval(f.slice(cell), config)
        else:
            if f.order == 1:
                total += float(f(z.reshape(1, 1, -1))[0])
            else:
                total += multiple_integral_eval(f.partial(z), config)
    return -total


class DiscreteChaosFunctional(FunctionalEvaluator):
    """Finite-chaos functional on a cell space with exact, vectorised operators.

    Parameters
    ----------
    decomposition : ChaosDecomposition
        Projections must be :class:`SymKernel` on one space.
    ustat : UStatistic, optional
        When given, values are computed from the U-statistic sum (integer
        exact for indicator kernels); otherwise from the chaos expansion.
    """

    def __init__(self, decomposition: ChaosDecomposition, ustat: Optional[UStatistic] = None,
                 tag: Optional[str] = None, name: str = ""):
        spaces = {f.space for f in decomposition.projections if f is not None}
        if len(spaces) != 1:
            raise ValueError("projections must live on exactly one discrete space")
        self.space: DiscreteMeasure = spaces.pop()
        self.ustat = ustat
        if tag is None:
            tag = "u-statistic" if ustat is not None else "multiple-integral"
        super().__init__(self._value, tag, decomposition, name)

    @classmethod
    def from_ustat(cls, U: UStatistic, name: str = "") -> "DiscreteChaosFunctional":
        if not U.discrete:
            raise ValueError("needs a U-statistic on a discrete space")
        return cls(ChaosDecomposition.from_ustat(U), U, name=name)

    @classmethod
    def multiple_integral(cls, f: SymKernel, name: str = "") -> "DiscreteChaosFunctional":
        return cls(ChaosDecomposition.single(f), name=name)

    def value_counts(self, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=float)
        if self.ustat is not None:
            return distinct_sum(self.ustat.kernel.values, counts, self.ustat.order)
        out = self.decomposition.mean * np.ones(counts.shape[:-1])
        for f in self.decomposition.projections:
            if f is not None:
                out = out + multiple_integral_counts(f, counts)
        return out

    def _value(self, config: Configuration) -> float:
        _check_distinct(config)
        return float(self.value_counts(self.space.counts(config)))

    def cell_add_one_cost(self, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=float)
        M = self.space.cell_count
        bumped = counts[None, :] + np.eye(M)
        return self.value_counts(bumped) - self.value_counts(counts)

    def cell_dlinv(self, counts) -> np.ndarray:
        counts = np.asarray(counts, dtype=float)
        out = np.zeros(self.space.cell_count)
        for i, f in enumerate(self.decomposition.projections, start=1):
            if f is None:
                continue
            for j in range(i):
                out += ((-1) ** (i - 1 - j) * math.comb(i - 1, j)
                        * distinct_sum(f.marginal(j + 1), counts, j))
        return -out

    def add_one_cost(self, config: Configuration, nodes) -> np.ndarray:
        cells = self.space.cell_of(np.asarray(nodes, dtype=float).reshape(-1, 1)[:, 0])
        return self.cell_add_one_cost(self.space.counts(config))[cells]

    def dlinv(self, config: Configuration, nodes) -> np.ndarray:
        cells = self.space.cell_of(np.asarray(nodes, dtype=float).reshape(-1, 1)[:, 0])
        return self.cell_dlinv(self.space.counts(config))[cells]


@dataclass
class IsometryReport:
    q: int
    q_prime: int
    replicates: int
    mean_f: float
    mean_f_se: float
    mean_g: float
    mean_g_se: float
    cross: float
    cross_se: float
    target: float

    def z_scores(self):
        def z(v, se, t=0.0):
            if se == 0:
                return 0.0 if v == t else math.inf
            return abs(v - t) / se
        return (z(self.mean_f, self.mean_f_se), z(self.mean_g, self.mean_g_se),
                z(self.cross, self.cross_se, self.target))

    @property
    def passed(self) -> bool:
        return max(self.z_scores()) < 4.0


def sample_counts(space: DiscreteMeasure, replicates: int, seed: int, start: int = 0) -> np.ndarray:
    """Cell counts of ``replicates`` configurations from the replicate streams."""
    measure = space.control_measure()
    out = np.empty((replicates, space.cell_count))
    for r in range(replicates):
        out[r] = space.counts(sample_configuration(measure, replicate_rng(seed, start + r)))
    return out


def verify_isometry(f: SymKernel, g: SymKernel, measure=None, replicates: int = 10000,
                    seed: int = 0) -> IsometryReport:
    """Monte Carlo check of ``E I_q(f) = 0`` and ``E I_q(f) I_q'(g) = q! <f,g> 1{q = q'}``."""
    if f.space != g.space:
        raise ValueError("kernels must share a space")
    counts = sample_counts(f.space, replicates, seed)
    a = np.asarray(multiple_integral_counts(f, counts))
    b = np.asarray(multiple_integral_counts(g, counts))
    prod = a * b
    sq = math.sqrt(replicates)
    target = math.factorial(f.order) * inner(f, g) if f.order == g.order else 0.0
    return IsometryReport(f.order, g.order, replicates,
                          float(a.mean()), float(a.std(ddof=1) / sq),
                          float(b.mean()), float(b.std(ddof=1) / sq),
                          float(prod.mean()), float(prod.std(ddof=1) / sq), float(target))
