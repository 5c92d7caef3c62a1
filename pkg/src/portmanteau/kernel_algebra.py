"""Dense symmetric kernels on a finite weighted cell space.

A :class:`DiscreteMeasure` with ``M`` cells stands for a non-atomic space
partitioned into cells of mass ``w_c``; a kernel of order ``q`` is a function
that is constant on products of cells, stored as an ``M**q`` tensor.
"""
from __future__ import annotations

import math
from itertools import permutations
from typing import Iterable, Sequence

import numpy as np

from .poisson_space import ControlMeasure, Configuration

__all__ = [
    "wsum",
    "DiscreteMeasure",
    "Kernel",
    "SymKernel",
    "symmetrize",
    "contract",
    "norm",
    "inner",
    "tensor_product",
    "check_assumptions",
    "dumps",
    "loads",
    "MAX_ORDER",
    "MAX_CELLS",
]

MAX_ORDER = 4
MAX_CELLS = 32


def wsum(weights: np.ndarray, values: np.ndarray) -> float:
    """Weighted sum used for every cell integral, so equal inputs give equal bits."""
    return float(np.dot(weights, values))


class DiscreteMeasure:
    """Finite measure space with ``M`` cells of positive mass.

    The cells are realised as the unit intervals ``[c, c+1)`` of ``[0, M)``,
    carrying density proportional to ``weights``; see :meth:`control_measure`.
    """

    def __init__(self, weights: Sequence[float]):
        w = np.array(weights, dtype=float).reshape(-1)
        if w.size < 1:
            raise ValueError("need at least one cell")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("cell weights must be finite and positive")
        w.setflags(write=False)
        self.weights = w
        self._control = None

    @property
    def cell_count(self) -> int:
        return self.weights.size

    @property
    def total(self) -> float:
        return float(self.weights.sum())

    def control_measure(self) -> ControlMeasure:
        """Continuous control on ``[0, M)`` whose cell masses are the weights."""
        if self._control is None:
            w, tot = self.weights, self.total
            M = self.cell_count

            def density(x, w=w, tot=tot, M=M):
                idx = np.clip(np.floor(x[:, 0]).astype(int), 0, M - 1)
                return w[idx] / tot

            self._control = ControlMeasure([0.0], [float(M)], tot, density=density,
                                           density_bound=float(w.max()) / tot,
                                           breakpoints=range(1, M))
        return self._control

    def cell_of(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float).reshape(-1)
        return np.clip(np.floor(x).astype(int), 0, self.cell_count - 1)

    def counts(self, config: Configuration) -> np.ndarray:
        """Cell counts of a configuration living on ``[0, M)``."""
        if len(config) == 0:
            return np.zeros(self.cell_count)
        return np.bincount(self.cell_of(config.points[:, 0]), minlength=self.cell_count).astype(float)

    def indicator(self, cells: Iterable[int]) -> np.ndarray:
        v = np.zeros(self.cell_count)
        v[list(cells)] = 1.0
        return v

    def __eq__(self, other):
        return isinstance(other, DiscreteMeasure) and np.array_equal(self.weights, other.weights)

    def __hash__(self):
        return hash(self.weights.tobytes())

    def __repr__(self):
        return f"DiscreteMeasure(M={self.cell_count}, total={self.total:g})"


def _integrate_last(values: np.ndarray, w: np.ndarray, times: int) -> np.ndarray:
    out = values
    for _ in range(times):
        out = np.tensordot(out, w, axes=([out.ndim - 1], [0]))
    return np.asarray(out)


class Kernel:
    """Order-``q`` function on the cell space, not necessarily symmetric."""

    def __init__(self, values, space: DiscreteMeasure):
        v = np.array(values, dtype=float)
        M = space.cell_count
        if v.shape != (M,) * v.ndim:
            raise ValueError(f"tensor shape {v.shape} does not match {M} cells")
        if not np.all(np.isfinite(v)):
            raise ValueError("kernel entries must be finite")
        v.setflags(write=False)
        self.values = v
        self.space = space
        self._marginals = {}

    @property
    def order(self) -> int:
        return self.values.ndim

    def marginal(self, j: int) -> np.ndarray:
        """Integrate out the last ``order - j`` arguments against the weights."""
        if not 0 <= j <= self.order:
            raise ValueError("marginal order out of range")
        if j not in self._marginals:
            self._marginals[j] = _integrate_last(self.values, self.space.weights, self.order - j)
        return self._marginals[j]

    def slice(self, cell: int) -> "Kernel":
        """``f(z, .)`` for ``z`` in ``cell``."""
        if self.order < 1:
            raise ValueError("cannot slice an order-0 kernel")
        return type(self)(self.values[cell], self.space)

    def _combine(self, other, op):
        if isinstance(other, Kernel):
            if other.space != self.space or other.order != self.order:
                raise ValueError("kernels live on different spaces or orders")
            cls = SymKernel if isinstance(self, SymKernel) and isinstance(other, SymKernel) else Kernel
            return cls(op(self.values, other.values), self.space)
        return NotImplemented

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, a):
        if np.isscalar(a):
            return type(self)(a * self.values, self.space)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(-self.values, self.space)

    def __repr__(self):
        return f"{type(self).__name__}(order={self.order}, M={self.space.cell_count})"


class SymKernel(Kernel):
    """Kernel invariant under permutations of its arguments."""

    def __init__(self, values, space: DiscreteMeasure, atol: float = 1e-12):
        super().__init__(values, space)
        v = self.values
        scale = atol * (1.0 + (np.abs(v).max() if v.size else 0.0))
        for a in range(v.ndim - 1):
            if not np.allclose(v, np.swapaxes(v, a, a + 1), rtol=0.0, atol=scale):
                raise ValueError("kernel is not symmetric; call symmetrize first")

    @classmethod
    def constant(cls, value: float, order: int, space: DiscreteMeasure) -> "SymKernel":
        return cls(np.full((space.cell_count,) * order, float(value)), space)

    @classmethod
    def indicator_power(cls, space: DiscreteMeasure, cells, order: int, scale: float = 1.0) -> "SymKernel":
        """``scale * 1_A^{(x) order}``."""
        v = space.indicator(cells)
        out = np.array(scale)
        for _ in range(order):
            out = np.multiply.outer(out, v)
        return cls(out, space)


def _canonical_index(M: int, q: int) -> np.ndarray:
    idx = np.indices((M,) * q).reshape(q, -1)
    return np.ravel_multi_index(np.sort(idx, axis=0), (M,) * q)


def symmetrize(f, space: DiscreteMeasure = None) -> SymKernel:
    """Canonical symmetrisation ``(1/q!) sum_sigma f(x_sigma)``.

    Entries sharing a sorted index tuple receive one stored value, so the
    result is exactly symmetric and the operation is idempotent.
    """
    if isinstance(f, Kernel):
        values, space = f.values, f.space
    else:
        if space is None:
            raise ValueError("space is required for a raw tensor")
        values = np.asarray(f, dtype=float)
    M = space.cell_count
    q = values.ndim
    if values.shape != (M,) * q:
        raise ValueError(f"tensor shape {values.shape} does not match {M} cells")
    if q <= 1:
        return SymKernel(values, space)
    perms = list(permutations(range(q)))
    if all(np.array_equal(values, np.transpose(values, p)) for p in perms[1:]):
        return SymKernel(values, space)
    avg = sum(np.transpose(values, p) for p in perms) / math.factorial(q)
    flat = avg.reshape(-1)[_canonical_index(M, q)].reshape(values.shape)
    return SymKernel(flat, space)


def contract(f: Kernel, g: Kernel, r: int, l: int) -> Kernel:
    """Contraction ``f star_r^l g``.

    ``r`` arguments are identified between ``f`` and ``g`` and ``l`` of them
    are integrated out.  The output arguments are ordered as (shared but not
    integrated, remaining of ``f``, remaining of ``g``).
    """
    if f.space != g.space:
        raise ValueError("kernels live on different spaces")
    p, q = f.order, g.order
    if not (0 <= l <= r <= min(p, q)):
        raise ValueError(f"need 0 <= l <= r <= min(p, q); got r={r}, l={l}, p={p}, q={q}")
    z = list(range(l))
    gam = list(range(l, r))
    t = list(range(r, r + p - r))
    s = list(range(p, p + q - r))
    w = f.space.weights
    ops = [f.values, z + gam + t, g.values, z + gam + s]
    for a in z:
        ops += [w, [a]]
    out = np.einsum(*ops, gam + t + s, optimize=len(ops) > 4)
    return Kernel(out, f.space)


def tensor_product(f: Kernel, g: Kernel) -> Kernel:
    return contract(f, g, 0, 0)


def _weight_tensor_sum(values: np.ndarray, w: np.ndarray) -> float:
    return float(_integrate_last(values, w, values.ndim))


def norm(f: Kernel, p: int = 2) -> float:
    """``L^p`` norm against the product measure, ``p`` in {2, 3, 4}."""
    if p not in (2, 3, 4):
        raise ValueError("p must be 2, 3 or 4")
    return _weight_tensor_sum(np.abs(f.values) ** p, f.space.weights) ** (1.0 / p)


def inner(f: Kernel, g: Kernel) -> float:
    if f.space != g.space or f.order != g.order:
        raise ValueError("inner product needs kernels of equal order on one space")
    return _weight_tensor_sum(f.values * g.values, f.space.weights)


def check_assumptions(kernels: Sequence[Kernel]) -> dict:
    """Numerical report of the technical kernel assumptions on a finite space.

    Returns a dict with

    - ``finite``: every reported quantity is finite;
    - ``self_contractions``: ``||f_i star_q^{q-r} f_i||_2`` for ``r = 1..q``;
    - ``abs_contractions_max``: sup of ``|f_i| star_r^l |f_i|`` for
      ``1 <= l <= r <= q`` (order >= 2 only);
    - ``cross_integrals``: ``int ||f_i(z,.) star_r^l f_j(z,.)||_2 mu(dz)``
      keyed by ``(i, j, r, l)``;
    - ``bounded_rectangle``: all kernels are bounded with support inside
      ``B x ... x B`` where ``B`` (reported as ``support_cells``) has finite
      mass; on a finite space this always holds.
    """
    kernels = list(kernels)
    if not kernels:
        return {"finite": True, "self_contractions": {}, "abs_contractions_max": {},
                "cross_integrals": {}, "bounded_rectangle": True, "support_cells": []}
    space = kernels[0].space
    if any(k.space != space for k in kernels):
        raise ValueError("kernels must share a space")
    w = space.weights
    selfc, absc, cross = {}, {}, {}
    for i, f in enumerate(kernels):
        q = f.order
        for r in range(1, q + 1):
            selfc[(i, r)] = norm(contract(f, f, q, q - r)) if r > 0 else 0.0
        if q >= 2:
            af = Kernel(np.abs(f.values), space)
            for r in range(1, q + 1):
                for l in range(1, r + 1):
                    c = contract(af, af, r, l).values
                    absc[(i, r, l)] = float(np.max(c)) if c.size else 0.0
    for i, f in enumerate(kernels):
        for j, g in enumerate(kernels):
            qi, qj = f.order, g.order
            if max(qi, qj) <= 1:
                continue
            for r in range(0, min(qi, qj)):
                for l in range(0, r + 1):
                    k = qi + qj - 2 - r - l
                    if k < max(abs(qi - qj), 1):
                        continue
                    vals = np.array([norm(contract(Kernel(f.values[c], space), Kernel(g.values[c], space), r, l))
                                     for c in range(space.cell_count)])
                    cross[(i, j, r, l)] = wsum(w, vals)
    support = np.zeros(space.cell_count, dtype=bool)
    for f in kernels:
        a = np.abs(f.values)
        for ax in range(f.order):
            support |= np.any(a > 0, axis=tuple(b for b in range(f.order) if b != ax)) if f.order > 1 else a > 0
    allvals = list(selfc.values()) + list(absc.values()) + list(cross.values())
    finite = bool(np.all(np.isfinite(allvals))) if allvals else True
    bounded = all(np.all(np.isfinite(f.values)) for f in kernels)
    return {
        "finite": finite,
        "self_contractions": selfc,
        "abs_contractions_max": absc,
        "cross_integrals": cross,
        "bounded_rectangle": bool(bounded and np.isfinite(wsum(w, support.astype(float)))),
        "support_cells": np.flatnonzero(support).tolist(),
    }


def dumps(f: Kernel) -> str:
    """Self-describing text form: order, cell count, weights, row-major values."""
    lines = [
        "# kernel v1",
        f"kind {'symmetric' if isinstance(f, SymKernel) else 'general'}",
        f"order {f.order}",
        f"cells {f.space.cell_count}",
        "weights " + " ".join(repr(float(x)) for x in f.space.weights),
        "values " + " ".join(repr(float(x)) for x in f.values.reshape(-1)),
    ]
    return "\n".join(lines) + "\n"


def loads(text: str) -> Kernel:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        fields[key] = rest
    try:
        order = int(fields["order"])
        M = int(fields["cells"])
        weights = [float(x) for x in fields["weights"].split()]
        values = np.array([float(x) for x in fields.get("values", "").split()])
    except (KeyError, ValueError) as exc:
        raise ValueError(f"malformed kernel text: {exc}") from None
    if len(weights) != M or values.size != M ** order:
        raise ValueError("kernel text sizes are inconsistent")
    space = DiscreteMeasure(weights)
    cls = SymKernel if fields.get("kind", "symmetric") == "symmetric" else Kernel
    return cls(values.reshape((M,) * order), space)
