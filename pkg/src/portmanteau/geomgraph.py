"""Disk graphs on Poisson samples and induced subgraph counts.

Two points are adjacent when their distance lies in the open interval
``(0, t)``, so coincident points are never joined.  Neighbourhoods come from a
hash grid with cell size ``t``.  In one dimension the chaos projections of the
pattern kernels are integrated exactly by Gauss rules on the pieces between
breakpoints ``x +- c t``; elsewhere Monte Carlo is used and flagged.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import integrate, sparse, stats

from .chaos import ChaosDecomposition, ContinuousKernel, FunctionalEvaluator, UStatistic
from .distances import EmpiricalLaw, ProductTarget, DiscreteLaw, h1_surrogate, tv_distance, wasserstein1
from .poisson_space import (ControlMeasure, Configuration, replicate_rng, sample_configuration,
                            sample_points)

__all__ = [
    "GraphPattern",
    "DiskGraph",
    "RegimeSpec",
    "count_induced",
    "count_patterns",
    "connected_patterns",
    "pattern_kernel",
    "pattern_ustat",
    "pattern_projection",
    "pattern_mean",
    "pattern_variance",
    "limiting_poisson_parameter",
    "PatternCount",
    "LocalGrid",
    "run_mixed_experiment",
    "ExperimentResult",
    "depoissonized_counts",
]

MAX_ORDER = 5


# ---------------------------------------------------------------- patterns

@lru_cache(maxsize=None)
def _pairs(k: int):
    return tuple(itertools.combinations(range(k), 2))


@lru_cache(maxsize=None)
def _canon_table(k: int) -> np.ndarray:
    """Canonical code of every adjacency mask on ``k`` vertices.

    Bit ``q`` of a mask is pair ``q`` of :func:`_pairs`.  The code reads the
    permuted pairs with the first pair most significant, so the minimum over
    permutations is the minimum adjacency string.
    """
    pairs = _pairs(k)
    npairs = len(pairs)
    index = {p: q for q, p in enumerate(pairs)}
    perms = list(itertools.permutations(range(k)))
    pp = np.array([[index[tuple(sorted((p[i], p[j])))] for i, j in pairs] for p in perms])
    masks = np.arange(2 ** npairs)
    bits = (masks[:, None] >> np.arange(npairs)) & 1
    weights = 1 << (npairs - 1 - np.arange(npairs))
    return (bits[:, pp] * weights).sum(axis=-1).min(axis=1)


@lru_cache(maxsize=None)
def _connected_masks(k: int) -> np.ndarray:
    out = np.zeros(2 ** len(_pairs(k)), dtype=bool)
    for mask in range(out.size):
        A = _mask_to_adjacency(mask, k)
        out[mask] = _is_connected(A)
    return out


def _mask_to_adjacency(mask: int, k: int) -> np.ndarray:
    A = np.zeros((k, k), dtype=bool)
    for q, (i, j) in enumerate(_pairs(k)):
        if mask >> q & 1:
            A[i, j] = A[j, i] = True
    return A


def _is_connected(A: np.ndarray) -> bool:
    k = A.shape[0]
    seen, stack = {0}, [0]
    while stack:
        v = stack.pop()
        for u in np.flatnonzero(A[v]):
            if u not in seen:
                seen.add(int(u))
                stack.append(int(u))
    return len(seen) == k


class GraphPattern:
    """Connected graph of order ``2 <= k <= 5`` up to isomorphism.

    Parameters
    ----------
    adjacency : array_like
        Symmetric boolean matrix with zero diagonal.
    name : str, optional
    """

    def __init__(self, adjacency, name: str = ""):
        A = np.asarray(adjacency, dtype=bool)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("adjacency must be square")
        k = A.shape[0]
        if not 2 <= k <= MAX_ORDER:
            raise ValueError(f"pattern order must be in [2, {MAX_ORDER}], got {k}")
        if not np.array_equal(A, A.T) or A.diagonal().any():
            raise ValueError("adjacency must be symmetric with zero diagonal")
        if not _is_connected(A):
            raise ValueError("pattern is disconnected")
        self.adjacency = A
        self.order = k
        mask = sum(1 << q for q, (i, j) in enumerate(_pairs(k)) if A[i, j])
        self.code = int(_canon_table(k)[mask])
        self.canonical = format(self.code, f"0{len(_pairs(k))}b")
        self.name = name or self.canonical

    @classmethod
    def from_edges(cls, k: int, edges, name: str = "") -> "GraphPattern":
        A = np.zeros((k, k), dtype=bool)
        for i, j in edges:
            A[i, j] = A[j, i] = True
        return cls(A, name)

    @classmethod
    def edge(cls) -> "GraphPattern":
        return cls.from_edges(2, [(0, 1)], "edge")

    @classmethod
    def triangle(cls) -> "GraphPattern":
        return cls.complete(3, "triangle")

    @classmethod
    def complete(cls, k: int, name: str = "") -> "GraphPattern":
        return cls.from_edges(k, _pairs(k), name or f"K{k}")

    @classmethod
    def path(cls, k: int, name: str = "") -> "GraphPattern":
        return cls.from_edges(k, [(i, i + 1) for i in range(k - 1)], name or f"path{k}")

    @classmethod
    def star(cls, k: int) -> "GraphPattern":
        return cls.from_edges(k, [(0, i) for i in range(1, k)], f"star{k}")

    @classmethod
    def cycle(cls, k: int) -> "GraphPattern":
        return cls.from_edges(k, [(i, (i + 1) % k) for i in range(k)], f"cycle{k}")

    def is_isomorphic(self, other: "GraphPattern") -> bool:
        return self.order == other.order and self.code == other.code

    def __eq__(self, other):
        return isinstance(other, GraphPattern) and self.is_isomorphic(other)

    def __hash__(self):
        return hash((self.order, self.code))

    def __repr__(self):
        return f"GraphPattern({self.name}, k={self.order}, canonical={self.canonical})"

    def codes(self, X: np.ndarray, t: float) -> np.ndarray:
        """Canonical codes of the disk graphs on the rows of ``X`` (shape ``(N, k, m)``)."""
        X = np.asarray(X, dtype=float)
        k = self.order
        if X.ndim == 2:
            X = X[:, :, None]
        mask = np.zeros(X.shape[0], dtype=np.int64)
        for q, (i, j) in enumerate(_pairs(k)):
            dist = np.sqrt(((X[:, i] - X[:, j]) ** 2).sum(axis=-1))
            mask |= ((dist > 0) & (dist < t)).astype(np.int64) << q
        return _canon_table(k)[mask]

    def indicator(self, X: np.ndarray, t: float) -> np.ndarray:
        """Whether the disk graph on each row of ``X`` is isomorphic to the pattern."""
        return self.codes(X, t) == self.code


def connected_patterns(k: int) -> List[GraphPattern]:
    """All connected patterns of order ``k`` up to isomorphism, sorted by code."""
    table = _canon_table(k)
    conn = _connected_masks(k)
    seen = {}
    for mask in np.flatnonzero(conn):
        code = int(table[mask])
        if code not in seen:
            seen[code] = GraphPattern(_mask_to_adjacency(int(mask), k))
    return [seen[c] for c in sorted(seen)]


# ---------------------------------------------------------------- disk graph

class _HashGrid:
    """Points bucketed into cubes of side ``cell``; lookups are vectorised."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = np.asarray(points, dtype=float)
        self.cell = float(cell)
        N, m = self.points.shape
        self.origin = self.points.min(axis=0) if N else np.zeros(m)
        coords = self._coords(self.points)
        self.dims = (coords.max(axis=0) + 1) if N else np.ones(m, dtype=np.int64)
        key = self._key(coords)
        self.order = np.argsort(key, kind="stable")
        self.sorted_keys = key[self.order]

    def _coords(self, x):
        return np.floor((x - self.origin) / self.cell).astype(np.int64)

    def _key(self, coords):
        return np.ravel_multi_index(tuple(coords.T), tuple(self.dims)) if coords.size else np.zeros(0, np.int64)

    def candidates(self, coords: np.ndarray, reach: int):
        """``(owner, point)`` index pairs for all points in cells within ``reach`` of each row."""
        owners, members = [], []
        m = coords.shape[1]
        for off in itertools.product(range(-reach, reach + 1), repeat=m):
            c = coords + np.array(off)
            ok = np.all((c >= 0) & (c < self.dims), axis=1)
            if not ok.any():
                continue
            rows = np.flatnonzero(ok)
            key = self._key(c[ok])
            start = np.searchsorted(self.sorted_keys, key, "left")
            end = np.searchsorted(self.sorted_keys, key, "right")
            L = end - start
            if L.sum() == 0:
                continue
            own = np.repeat(rows, L)
            pos = np.repeat(start, L) + np.arange(L.sum()) - np.repeat(np.cumsum(L) - L, L)
            owners.append(own)
            members.append(self.order[pos])
        if not owners:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(owners), np.concatenate(members)


def _disk_edges(points: np.ndarray, t: float):
    """Edges ``i < j`` with ``0 < |x_i - x_j| < t``."""
    N = points.shape[0]
    if N < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    grid = _HashGrid(points, t)
    I, J = grid.candidates(grid._coords(points), 1)
    keep = I < J
    I, J = I[keep], J[keep]
    dist = np.sqrt(((points[I] - points[J]) ** 2).sum(axis=1))
    keep = (dist > 0) & (dist < t)
    return I[keep], J[keep]


class DiskGraph:
    """Disk graph of radius ``t`` on a configuration."""

    def __init__(self, config, t: float):
        if not t > 0:
            raise ValueError("radius must be positive")
        pts = config.points if isinstance(config, Configuration) else np.asarray(config, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        self.points = pts
        self.t = float(t)
        self.I, self.J = _disk_edges(pts, self.t)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def edge_count(self) -> int:
        return int(self.I.size)

    def adjacency_matrix(self) -> sparse.csr_matrix:
        N = self.size
        data = np.ones(2 * self.I.size)
        return sparse.csr_matrix((data, (np.concatenate([self.I, self.J]), np.concatenate([self.J, self.I]))),
                                 shape=(N, N))

    def neighbour_sets(self) -> List[set]:
        nb = [set() for _ in range(self.size)]
        for i, j in zip(self.I.tolist(), self.J.tolist()):
            nb[i].add(j)
            nb[j].add(i)
        return nb

    def connected_subsets(self, k: int):
        """Every connected induced ``k``-subset once (ESU enumeration)."""
        nb = self.neighbour_sets()

        def extend(sub, ext, v, closed):
            if len(sub) == k:
                yield tuple(sorted(sub))
                return
            ext = list(ext)
            while ext:
                w = ext.pop()
                new = [u for u in nb[w] if u > v and u not in closed]
                yield from extend(sub + [w], ext + new, v, closed | nb[w] | {w})

        for v in range(self.size):
            yield from extend([v], [u for u in nb[v] if u > v], v, nb[v] | {v})

    def census(self, k: int) -> Dict[int, int]:
        """Counts of connected induced ``k``-subgraphs keyed by canonical code."""
        if k == 2:
            return {int(_canon_table(2)[1]): self.edge_count}
        if k == 3:
            A = self.adjacency_matrix()
            tri = int(round((A @ A).multiply(A).sum() / 6))
            deg = np.asarray(A.sum(axis=1)).reshape(-1)
            wedges = int((deg * (deg - 1) // 2).sum())
            return {GraphPattern.triangle().code: tri, GraphPattern.path(3).code: wedges - 3 * tri}
        out: Dict[int, int] = {}
        table = _canon_table(k)
        nb = self.neighbour_sets()
        for S in self.connected_subsets(k):
            mask = 0
            for q, (a, b) in enumerate(_pairs(k)):
                if S[b] in nb[S[a]]:
                    mask |= 1 << q
            code = int(table[mask])
            out[code] = out.get(code, 0) + 1
        return out


def _check_pattern(pattern):
    if not isinstance(pattern, GraphPattern):
        pattern = GraphPattern(pattern)
    return pattern


def count_patterns(config, t: float, patterns: Sequence[GraphPattern]) -> np.ndarray:
    """Induced counts of several patterns on one disk graph."""
    g = DiskGraph(config, t)
    cache: Dict[int, Dict[int, int]] = {}
    out = []
    for p in patterns:
        p = _check_pattern(p)
        if p.order not in cache:
            cache[p.order] = g.census(p.order)
        out.append(cache[p.order].get(p.code, 0))
    return np.array(out, dtype=np.int64)


def count_induced(config, t: float, pattern) -> int:
    """Number of ``k``-subsets whose induced disk graph is isomorphic to ``pattern``."""
    return int(count_patterns(config, t, [_check_pattern(pattern)])[0])


# ---------------------------------------------------------------- kernels

def pattern_kernel(pattern: GraphPattern, t: float, points) -> float:
    """``1/k!`` if the disk graph on the ``k`` points is isomorphic to the pattern, else 0."""
    X = np.asarray(points, dtype=float)
    X = X.reshape(pattern.order, -1)
    if np.unique(X, axis=0).shape[0] < X.shape[0]:
        raise ValueError("points must be distinct")
    return float(pattern.indicator(X[None], t)[0]) / math.factorial(pattern.order)


def pattern_ustat(pattern: GraphPattern, t: float, measure: Optional[ControlMeasure] = None) -> UStatistic:
    """The U-statistic with kernel ``h = 1{induced graph ~ pattern} / k!``."""
    k = pattern.order
    fk = math.factorial(k)
    return UStatistic(k, lambda X: pattern.indicator(X, t) / fk, measure, check_symmetry=False)


def _nested(func: Callable, fixed: np.ndarray, r: int, t: float, measure: ControlMeasure,
            reach: int, ng: Optional[int] = None) -> np.ndarray:
    """``int func(fixed, y_1..y_r) mu^r(dy)`` for each row of ``fixed`` (``m = 1``).

    Each variable is integrated piecewise between the breakpoints
    ``fixed + c t`` and ``box end + c t`` with ``|c| <= reach``, restricted to
    within ``reach * t`` of the fixed points.  For a uniform density the
    integrand is polynomial on every piece and the Gauss rule is exact.
    """
    fixed = np.asarray(fixed, dtype=float)
    if r == 0:
        return np.asarray(func(fixed), dtype=float)
    B, j = fixed.shape
    lo, hi = float(measure.lower[0]), float(measure.upper[0])
    c = np.arange(-reach, reach + 1) * t
    ends = (np.array([lo, hi])[:, None] + c).reshape(-1)
    extra = np.array(measure.breakpoints or (), dtype=float)
    if j:
        dom_lo = np.maximum(lo, fixed.min(axis=1) - reach * t)
        dom_hi = np.minimum(hi, fixed.max(axis=1) + reach * t)
        cand = np.concatenate([(fixed[:, :, None] + c).reshape(B, -1),
                               np.broadcast_to(np.concatenate([ends, extra]), (B, ends.size + extra.size))], axis=1)
    else:
        dom_lo, dom_hi = np.full(B, lo), np.full(B, hi)
        cand = np.broadcast_to(np.concatenate([ends, extra]), (B, ends.size + extra.size))
    cand = np.clip(cand, dom_lo[:, None], dom_hi[:, None])
    cand = np.sort(np.concatenate([dom_lo[:, None], cand, dom_hi[:, None]], axis=1), axis=1)
    a, b = cand[:, :-1], cand[:, 1:]
    if ng is None:
        ng = r // 2 + 1 if measure.is_uniform else r // 2 + 4
    gx, gw = np.polynomial.legendre.leggauss(ng)
    half = (b - a) / 2
    nodes = (a + half)[..., None] + half[..., None] * gx
    P = a.shape[1]
    live = half > 0
    flat_nodes = nodes[live]
    dens = measure.intensity * measure.density(flat_nodes.reshape(-1, 1)).reshape(flat_nodes.shape)
    wts = half[live][:, None] * gw * dens
    owner = np.broadcast_to(np.arange(B)[:, None], (B, P))[live]
    ext = np.concatenate([np.repeat(fixed[owner], ng, axis=0), flat_nodes.reshape(-1, 1)], axis=1)
    inner = _nested(func, ext, r - 1, t, measure, reach, ng if r > 1 else None)
    contrib = (inner.reshape(-1, ng) * wts).sum(axis=1)
    return np.bincount(owner, weights=contrib, minlength=B)


def _hbar_1d(pattern: GraphPattern, t: float, measure: ControlMeasure, fixed: np.ndarray) -> np.ndarray:
    """``int h(fixed, y) mu^{k-j}(dy)`` with ``h = indicator / k!`` (``m = 1``)."""
    k = pattern.order
    fixed = np.asarray(fixed, dtype=float)
    if fixed.ndim < 2:
        fixed = fixed.reshape(-1, 1)
    func = lambda X: pattern.indicator(X, t)
    val = _nested(func, fixed, k - fixed.shape[1], t, measure, k - 1)
    return val / math.factorial(k)


class ProjectionResult(NamedTuple):
    value: float
    se: float
    flagged: bool


def pattern_projection(pattern: GraphPattern, t: float, i: int, x, measure: ControlMeasure,
                       mc_nodes: int = 20000, seed: int = 0, target_se: Optional[float] = None
                       ) -> ProjectionResult:
    """``h_i(x) = C(k, i) int h(x, y) mu^{k-i}(dy)`` with standard error.

    Exact in one dimension.  Otherwise the ``k - i`` free points are drawn
    uniformly from the cube of half-side ``(k-1) t`` around ``x_1``, outside
    of which the integrand vanishes.  ``flagged`` is set when the standard
    error exceeds ``target_se``.
    """
    k = pattern.order
    if not 1 <= i <= k:
        raise ValueError("need 1 <= i <= k")
    X = np.asarray(x, dtype=float).reshape(i, measure.dim)
    if i == k:
        return ProjectionResult(pattern_kernel(pattern, t, X), 0.0, False)
    if not measure.contains(X).all():
        return ProjectionResult(0.0, 0.0, False)
    if measure.dim == 1:
        val = math.comb(k, i) * float(_hbar_1d(pattern, t, measure, X.reshape(1, i))[0])
        return ProjectionResult(val, 0.0, False)
    rng = replicate_rng(seed, 0)
    R = (k - 1) * t
    m = measure.dim
    r = k - i
    Y = X[0] + R * (2 * rng.random((mc_nodes, r, m)) - 1)
    inside = np.all([measure.contains(Y[:, s]) for s in range(r)], axis=0)
    dens = np.prod([measure.intensity * measure.density(Y[:, s]) for s in range(r)], axis=0) * inside
    full = np.concatenate([np.broadcast_to(X, (mc_nodes, i, m)), Y], axis=1)
    vals = pattern.indicator(full, t) * dens * (2 * R) ** (m * r) / math.factorial(k) * math.comb(k, i)
    se = float(vals.std(ddof=1) / math.sqrt(mc_nodes))
    flagged = target_se is not None and se > target_se
    if flagged:
        warnings.warn(f"projection standard error {se:.3g} exceeds target {target_se:.3g}; "
                      "increase mc_nodes", RuntimeWarning)
    return ProjectionResult(float(vals.mean()), se, flagged)


def pattern_mean(pattern: GraphPattern, t: float, measure: ControlMeasure) -> float:
    """``E[count] = int h dmu^k`` (one dimension, exact for uniform densities)."""
    if measure.dim != 1:
        raise NotImplementedError("exact moments are one-dimensional")
    return float(_hbar_1d(pattern, t, measure, np.zeros((1, 0)))[0])


def pattern_variance(pattern: GraphPattern, t: float, measure: ControlMeasure) -> float:
    """``Var[count] = sum_i i! ||h_i||^2`` (one dimension)."""
    if measure.dim != 1:
        raise NotImplementedError("exact moments are one-dimensional")
    k = pattern.order
    fk = math.factorial(k)
    total = pattern_mean(pattern, t, measure)  # i = k term: k! ||h||^2 = E
    ind = lambda X: pattern.indicator(X, t)
    for i in range(1, k):
        c = math.comb(k, i) / fk

        def sq(X, c=c, i=i):
            inner = _nested(ind, X, k - i, t, measure, k - 1)
            return (c * inner) ** 2

        ng = (k - i) + 1 if measure.is_uniform else k - i + 4
        norm2 = float(_nested(sq, np.zeros((1, 0)), i, t, measure, k - 1, ng)[0])
        total += math.factorial(i) * norm2
    return total


class LimitResult(NamedTuple):
    value: float
    se: float


def limiting_poisson_parameter(pattern: GraphPattern, density: Optional[Callable] = None, m: int = 1,
                               lower=0.0, upper=1.0, mc_nodes: int = 200000, seed: int = 0) -> LimitResult:
    """``a = (int p^k) (int h_{pattern,1}(0, y) dy)``, the limit of ``E[count]`` when ``t^m = n^{-k/(k-1)}``.

    ``density`` is a vectorised callable on ``(N, m)`` arrays supported on the
    box ``[lower, upper]``; uniform when omitted.  In one dimension both
    integrals are deterministic and the standard error is 0.
    """
    k = pattern.order
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (m,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (m,))
    vol = float(np.prod(upper - lower))
    if density is None:
        mass, pk, pk_se = 1.0, vol ** (1 - k), 0.0
    elif m == 1:
        f = lambda x: float(density(np.array([[x]]))[0])
        mass = integrate.quad(f, lower[0], upper[0], limit=200)[0]
        pk = integrate.quad(lambda x: f(x) ** k, lower[0], upper[0], limit=200)[0]
        pk_se = 0.0
    else:
        rng = replicate_rng(seed, 1)
        U = lower + (upper - lower) * rng.random((mc_nodes, m))
        p = np.asarray(density(U), dtype=float)
        mass = vol * p.mean()
        pk = vol * (p ** k).mean()
        pk_se = vol * (p ** k).std(ddof=1) / math.sqrt(mc_nodes)
    if mass == 0 and pk == 0:
        return LimitResult(0.0, 0.0)
    tol = 1e-6 if (density is None or m == 1) else 5 * vol * p.std(ddof=1) / math.sqrt(mc_nodes) + 1e-6
    if abs(mass - 1.0) > tol:
        raise ValueError(f"density integrates to {mass:.6g}, not 1")
    R = k - 1
    if m == 1:
        unit = ControlMeasure(-R, R, 2 * R)  # Lebesgue measure on [-R, R]
        integral = float(_nested(lambda X: pattern.indicator(X, 1.0), np.zeros((1, 1)), k - 1, 1.0, unit, k - 1)[0])
        integral_se = 0.0
    else:
        rng = replicate_rng(seed, 2)
        Y = R * (2 * rng.random((mc_nodes, k - 1, m)) - 1)
        full = np.concatenate([np.zeros((mc_nodes, 1, m)), Y], axis=1)
        vals = pattern.indicator(full, 1.0) * (2.0 * R) ** (m * (k - 1))
        integral, integral_se = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(mc_nodes))
    fk = math.factorial(k)
    value = pk * integral / fk
    se = math.hypot(pk_se * integral, pk * integral_se) / fk
    return LimitResult(value, se)


# ---------------------------------------------------------------- functionals

def _padded_neighbours(points: np.ndarray, nodes: np.ndarray, radius: float, cell: float):
    """Indices of points within ``radius`` of each node, padded with ``-1``."""
    Z = nodes.shape[0]
    if points.shape[0] == 0:
        return np.full((Z, 0), -1, dtype=np.int64)
    grid = _HashGrid(points, cell)
    reach = int(math.ceil(radius / cell))
    own, mem = grid.candidates(grid._coords(nodes), reach)
    dist = np.sqrt(((nodes[own] - points[mem]) ** 2).sum(axis=1))
    keep = dist <= radius
    own, mem = own[keep], mem[keep]
    order = np.lexsort((mem, own))
    own, mem = own[order], mem[order]
    counts = np.bincount(own, minlength=Z)
    K = int(counts.max()) if counts.size else 0
    out = np.full((Z, K), -1, dtype=np.int64)
    slot = np.arange(own.size) - np.repeat(np.cumsum(counts) - counts, counts)
    out[own, slot] = mem
    return out


class PatternCount(FunctionalEvaluator):
    """Induced count of a pattern, optionally affinely normalised as ``(count - shift) / scale``.

    Add-one costs and ``D L^{-1}`` are evaluated in closed form:
    ``-D_z L^{-1} F = sum_j j! sum_{|S| = j} hbar_{k-1-j}(z, S)`` where ``S``
    runs over subsets of the current points and ``hbar_r`` integrates ``r``
    arguments of ``h`` against the control measure.
    """

    def __init__(self, pattern: GraphPattern, t: float, measure: ControlMeasure,
                 shift: float = 0.0, scale: float = 1.0, name: str = ""):
        self.pattern = _check_pattern(pattern)
        self.t = float(t)
        self.measure = measure
        self.shift, self.scale = float(shift), float(scale)
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        k = self.pattern.order
        mean = (pattern_mean(self.pattern, t, measure) - self.shift) / self.scale if measure.dim == 1 else np.nan
        projs = [self._projection_kernel(i) for i in range(1, k + 1)]
        super().__init__(self._value, "u-statistic", ChaosDecomposition(mean, projs),
                         name or self.pattern.name)
        self._interior = None

    @classmethod
    def normalized(cls, pattern: GraphPattern, t: float, measure: ControlMeasure, name: str = ""):
        """Centred and scaled by the exact mean and standard deviation (one dimension)."""
        mean = pattern_mean(pattern, t, measure)
        sd = math.sqrt(pattern_variance(pattern, t, measure))
        return cls(pattern, t, measure, mean, sd, name or f"normalized {pattern.name}")

    def _projection_kernel(self, i: int) -> ContinuousKernel:
        k = self.pattern.order
        c = math.comb(k, i) / self.scale

        def func(X):
            X = np.asarray(X, dtype=float)
            if i == k:
                return self.pattern.indicator(X, self.t) / math.factorial(k) * c
            return c * _hbar_1d(self.pattern, self.t, self.measure, X[..., 0])

        return ContinuousKernel(i, func, self.measure)

    def _value(self, config) -> float:
        return (count_induced(config, self.t, self.pattern) - self.shift) / self.scale

    def _subset_terms(self, points, nodes):
        """Yield ``(j, rows, X)`` with ``X`` the tuples ``(z, S)``, ``|S| = j``, for valid subsets."""
        k = self.pattern.order
        nb = _padded_neighbours(points, nodes, (k - 1) * self.t, self.t)
        K = nb.shape[1]
        for j in range(1, k):
            for combo in itertools.combinations(range(K), j):
                idx = nb[:, combo]
                valid = np.all(idx >= 0, axis=1)
                if not valid.any():
                    continue
                rows = np.flatnonzero(valid)
                X = np.concatenate([nodes[rows][:, None, :], points[idx[rows]]], axis=1)
                yield j, rows, X

    def _raw_add_one(self, points, nodes):
        k = self.pattern.order
        out = np.zeros(nodes.shape[0])
        for j, rows, X in self._subset_terms(points, nodes):
            if j == k - 1:
                np.add.at(out, rows, self.pattern.indicator(X, self.t))
        return out

    def add_one_cost(self, config, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=float).reshape(-1, self.measure.dim)
        return self._raw_add_one(config.points, nodes) / self.scale

    def _hbar0(self, nodes):
        """``hbar_{k-1}(z)``; constant away from the box ends for uniform densities."""
        k = self.pattern.order
        z = nodes[:, 0]
        R = (k - 1) * self.t
        lo, hi = float(self.measure.lower[0]), float(self.measure.upper[0])
        out = np.empty(z.size)
        inner = (z - R >= lo) & (z + R <= hi) if self.measure.is_uniform else np.zeros(z.size, bool)
        if inner.any():
            if self._interior is None:
                mid = np.array([[0.5 * (lo + hi)]])
                self._interior = float(_hbar_1d(self.pattern, self.t, self.measure, mid)[0])
            out[inner] = self._interior
        if (~inner).any():
            out[~inner] = _hbar_1d(self.pattern, self.t, self.measure, z[~inner, None])
        return out

    def dlinv(self, config, nodes) -> np.ndarray:
        if self.measure.dim != 1:
            return super().dlinv(config, nodes)
        k = self.pattern.order
        nodes = np.asarray(nodes, dtype=float).reshape(-1, 1)
        out = self._hbar0(nodes)
        for j, rows, X in self._subset_terms(config.points, nodes):
            if j == k - 1:
                vals = self.pattern.indicator(X, self.t) / k
            else:
                vals = math.factorial(j) * _hbar_1d(self.pattern, self.t, self.measure, X[..., 0])
            np.add.at(out, rows, vals)
        return -out / self.scale


class LocalGrid:
    """Exact z-integration for disk-graph functionals on the line.

    Every integrand of the mixed coefficients carries an add-one cost, which
    vanishes farther than ``t`` from the points.  Breakpoints ``x + c t`` and
    ``box end + c t`` with ``|c| < k`` split that region into pieces on which
    all integrands are polynomial; ``ng`` Gauss nodes are used per piece.
    """

    def __init__(self, measure: ControlMeasure, t: float, k: int, ng: int = 3):
        if measure.dim != 1:
            raise NotImplementedError("local grids are one-dimensional; use CellGrid")
        self.measure, self.t, self.k, self.ng = measure, float(t), int(k), int(ng)
        self.exact = measure.is_uniform
        self.cells = 0

    def nodes_weights(self, config):
        x = np.sort(config.points[:, 0])
        lo, hi = float(self.measure.lower[0]), float(self.measure.upper[0])
        if x.size == 0:
            self.cells = 0
            return np.zeros((0, 1)), np.zeros(0)
        c = np.arange(-(self.k - 1), self.k) * self.t
        br = np.concatenate([(x[:, None] + c).reshape(-1), lo + c, hi + c, [lo, hi]])
        br = np.unique(np.clip(br, lo, hi))
        a, b = br[:-1], br[1:]
        mid = 0.5 * (a + b)
        pos = np.searchsorted(x, mid)
        near = np.full(mid.size, np.inf)
        near = np.minimum(near, np.abs(mid - x[np.clip(pos, 0, x.size - 1)]))
        near = np.minimum(near, np.abs(mid - x[np.clip(pos - 1, 0, x.size - 1)]))
        keep = (near < self.t) & (b > a)
        a, b = a[keep], b[keep]
        self.cells = int(a.size)
        gx, gw = np.polynomial.legendre.leggauss(self.ng)
        half = (b - a) / 2
        nodes = ((a + half)[:, None] + half[:, None] * gx).reshape(-1, 1)
        w = (half[:, None] * gw).reshape(-1) * self.measure.intensity * self.measure.density(nodes)
        return nodes, w

    def refine(self) -> "LocalGrid":
        return LocalGrid(self.measure, self.t, self.k, self.ng + 2)


# ---------------------------------------------------------------- experiment

@dataclass
class RegimeSpec:
    """Mixed regime: a Gaussian pattern of order ``k0`` and Poisson patterns of order ``k``."""

    k0: int
    k: int
    pattern0: GraphPattern
    patterns: Sequence[GraphPattern]
    m: int = 1
    lower: float = 0.0
    upper: float = 1.0
    density: Optional[Callable] = None
    density_bound: Optional[float] = None
    radius_constant: float = 1.0

    def __post_init__(self):
        if not 2 <= self.k0 < self.k <= MAX_ORDER:
            raise ValueError("need 2 <= k0 < k <= 5")
        if self.pattern0.order != self.k0:
            raise ValueError("pattern0 must have order k0")
        if not self.patterns:
            raise ValueError("need at least one Poisson pattern")
        for p in self.patterns:
            if p.order != self.k:
                raise ValueError("Poisson patterns must have order k")
        codes = [p.code for p in self.patterns]
        if len(set(codes)) != len(codes):
            raise ValueError("Poisson patterns must be pairwise non-isomorphic")

    def radius(self, n: float) -> float:
        """``t_n`` with ``t_n^m = c n^{-k/(k-1)}``."""
        return (self.radius_constant * float(n) ** (-self.k / (self.k - 1))) ** (1.0 / self.m)

    def measure(self, n: float) -> ControlMeasure:
        lower = np.full(self.m, self.lower)
        upper = np.full(self.m, self.upper)
        return ControlMeasure(lower, upper, n, self.density, self.density_bound)

    @property
    def all_patterns(self):
        return [self.pattern0] + list(self.patterns)


@dataclass
class ExperimentResult:
    rows: List[dict]
    fits: List[dict]
    samples: Dict[int, dict] = field(default_factory=dict)

    COLUMNS = ("n", "pattern", "mean", "var", "lambda_hat", "tv", "w1", "h1", "cov_0j",
               "se_mean", "se_var", "se_cov", "se_h1", "limit")


def _fit(x, y):
    x, y = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if x.size < 2 or not np.all(np.isfinite(y)):
        return math.nan, math.nan, math.nan
    if x.size == 2:
        s = (y[1] - y[0]) / (x[1] - x[0])
        return float(s), float(y[0] - s * x[0]), math.nan
    coef, cov = np.polyfit(x, y, 1, cov=True)
    return float(coef[0]), float(coef[1]), float(math.sqrt(cov[0, 0]))


def _normal_reference(size: int) -> np.ndarray:
    return stats.norm.ppf((np.arange(size) + 0.5) / size)


def _bootstrap_h1(ints, reals, target, size, seed, B=20):
    rng = replicate_rng(seed, 0, 7)
    R = ints.shape[0]
    vals = []
    for _ in range(B):
        idx = rng.integers(0, R, R)
        vals.append(h1_surrogate(EmpiricalLaw(ints[idx], reals[idx]), target, size))
    return float(np.std(vals, ddof=1))


def _regime_counts(spec: RegimeSpec, n: float, replicates: int, seed: int, n_index: int):
    measure = spec.measure(n)
    t = spec.radius(n)
    pats = spec.all_patterns
    out = np.zeros((replicates, len(pats)), dtype=np.int64)
    for r in range(replicates):
        config = sample_configuration(measure, replicate_rng(seed, r, n_index))
        out[r] = count_patterns(config, t, pats)
    return out


def run_mixed_experiment(spec: RegimeSpec, n_grid: Sequence[float], replicates: int, seed: int,
                         dictionary_size: int = 9, target_se: Optional[float] = None,
                         bootstrap: int = 20) -> ExperimentResult:
    """Joint law of (Poisson pattern counts, normalised Gaussian pattern count) across ``n_grid``.

    The normalising moments are exact in one dimension and empirical otherwise.
    Each row describes one pattern at one ``n``; joint distances (TV of the
    integer part, h1 surrogate) repeat on the rows of that ``n``.  Rate fits
    regress log distances on ``log n``.
    """
    if replicates < 20:
        raise ValueError("need at least 20 replicates")
    d = len(spec.patterns)
    limits = [limiting_poisson_parameter(p, spec.density, spec.m, spec.lower, spec.upper).value
              for p in spec.patterns]
    rows, samples = [], {}
    for a, n in enumerate(n_grid):
        counts = _regime_counts(spec, n, replicates, seed, a)
        raw0, F = counts[:, 0].astype(float), counts[:, 1:]
        if spec.m == 1:
            measure = spec.measure(n)
            t = spec.radius(n)
            mu0 = pattern_mean(spec.pattern0, t, measure)
            sd0 = math.sqrt(pattern_variance(spec.pattern0, t, measure))
        else:
            mu0, sd0 = raw0.mean(), raw0.std(ddof=1)
        G = (raw0 - mu0) / sd0
        lam = F.mean(axis=0)
        se_mean = F.std(axis=0, ddof=1) / math.sqrt(replicates)
        if target_se is not None and np.max(se_mean) > target_se:
            raise ValueError(f"replicates give SE {np.max(se_mean):.3g} above target {target_se:.3g}")
        tv = tv_distance(F, DiscreteLaw.poisson(np.maximum(lam, 1e-12)))
        w1 = wasserstein1(G, _normal_reference(replicates))
        target = ProductTarget(np.maximum(lam, 1e-12), 1.0)
        h1 = h1_surrogate(EmpiricalLaw(F, G), target, dictionary_size)
        se_h1 = _bootstrap_h1(F, G, target, dictionary_size, seed + a, bootstrap) if bootstrap else math.nan
        gc = G - G.mean()
        g4 = np.mean(gc ** 4)
        rows.append(dict(n=n, pattern=spec.pattern0.canonical, mean=G.mean(), var=G.var(ddof=1),
                         lambda_hat=math.nan, tv=math.nan, w1=w1, h1=h1, cov_0j=math.nan,
                         se_mean=G.std(ddof=1) / math.sqrt(replicates),
                         se_var=math.sqrt(max(g4 - G.var() ** 2, 0) / replicates),
                         se_cov=math.nan, se_h1=se_h1, limit=math.nan))
        for j, p in enumerate(spec.patterns):
            fj = F[:, j].astype(float)
            prod = gc * (fj - fj.mean())
            rows.append(dict(n=n, pattern=p.canonical, mean=fj.mean(), var=fj.var(ddof=1),
                             lambda_hat=lam[j], tv=tv, w1=math.nan, h1=h1,
                             cov_0j=prod.sum() / (replicates - 1),
                             se_mean=se_mean[j],
                             se_var=math.sqrt(max(np.mean((fj - fj.mean()) ** 4) - fj.var() ** 2, 0) / replicates),
                             se_cov=prod.std(ddof=1) / math.sqrt(replicates), se_h1=se_h1,
                             limit=limits[j]))
        samples[n] = {"counts": F, "normalized": G, "raw0": raw0}
    for j, p in enumerate(spec.patterns):
        if all(samples[n]["counts"][:, j].max() == 0 for n in n_grid):
            raise RuntimeError(f"pattern {p.canonical} never occurred; the regime is infeasible")
    fits = []
    ns = list(n_grid)
    by_n = {n: [r for r in rows if r["n"] == n] for n in ns}
    quantities = [("tv", lambda rs: rs[1]["tv"]), ("h1", lambda rs: rs[0]["h1"]),
                  ("w1", lambda rs: rs[0]["w1"])]
    quantities += [(f"abs_cov_0{j + 1}", lambda rs, j=j: abs(rs[j + 1]["cov_0j"])) for j in range(d)]
    for name, get in quantities:
        s, b, se = _fit(ns, [get(by_n[n]) for n in ns])
        fits.append(dict(quantity=name, slope=s, intercept=b, slope_se=se))
    return ExperimentResult(rows, fits, samples)


@dataclass
class DepoissonizedSample:
    patterns: List[str]
    fixed: np.ndarray
    poissonized: np.ndarray
    normalized_fixed: np.ndarray
    normalized_poissonized: np.ndarray


def depoissonized_counts(spec: RegimeSpec, n: int, replicates: int, seed: int) -> DepoissonizedSample:
    """Counts on exactly ``n`` i.i.d. points, coupled with the Poisson sample.

    Each replicate draws ``N ~ Po(n)`` and ``max(N, n)`` i.i.d. points; the
    fixed sample is the first ``n`` and the Poisson sample the first ``N``.
    The first pattern is also normalised by the exact Poisson moments.
    """
    n = int(n)
    measure = spec.measure(n)
    t = spec.radius(n)
    pats = spec.all_patterns
    fixed = np.zeros((replicates, len(pats)), dtype=np.int64)
    pois = np.zeros_like(fixed)
    for r in range(replicates):
        rng = replicate_rng(seed, r, n)
        N = int(rng.poisson(n))
        pts = sample_points(measure, max(N, n), rng)
        fixed[r] = count_patterns(pts[:n], t, pats)
        pois[r] = count_patterns(pts[:N], t, pats)
    if spec.m == 1:
        mu0 = pattern_mean(spec.pattern0, t, measure)
        sd0 = math.sqrt(pattern_variance(spec.pattern0, t, measure))
    else:
        mu0, sd0 = pois[:, 0].mean(), pois[:, 0].std(ddof=1)
    return DepoissonizedSample([p.canonical for p in pats], fixed, pois,
                               (fixed[:, 0] - mu0) / sd0, (pois[:, 0] - mu0) / sd0)
