"""Total variation, one-dimensional Wasserstein and a mixed-law dictionary surrogate."""
from __future__ import annotations

import math
from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy import special, stats

__all__ = [
    "DiscreteLaw",
    "EmpiricalLaw",
    "ProductTarget",
    "tv_distance",
    "wasserstein1",
    "h1_surrogate",
    "dictionary",
    "distance_rows",
]


class DiscreteLaw:
    """Probability mass function on a box ``{0..K_1} x ... x {0..K_d}``."""

    def __init__(self, pmf):
        p = np.asarray(pmf, dtype=float)
        if p.ndim == 0:
            p = p.reshape(1)
        if p.size == 0 or np.any(p < 0) or not p.sum() > 0:
            raise ValueError("empty or invalid pmf")
        self.pmf = p

    @property
    def dim(self) -> int:
        return self.pmf.ndim

    @classmethod
    def from_samples(cls, samples) -> "DiscreteLaw":
        s = np.asarray(samples)
        if s.size == 0:
            raise ValueError("empty sample")
        s = s.reshape(s.shape[0], -1) if s.ndim > 1 else s.reshape(-1, 1)
        if np.any(s < 0) or np.any(s != np.round(s)):
            raise ValueError("samples must be nonnegative integers")
        s = s.astype(np.int64)
        shape = tuple(int(v) + 1 for v in s.max(axis=0))
        flat = np.ravel_multi_index(tuple(s.T), shape)
        pmf = np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape) / s.shape[0]
        return cls(pmf)

    @classmethod
    def from_dict(cls, mapping) -> "DiscreteLaw":
        keys = [tuple(np.atleast_1d(k)) for k in mapping]
        d = len(keys[0])
        shape = tuple(max(k[i] for k in keys) + 1 for i in range(d))
        pmf = np.zeros(shape)
        for k, v in zip(keys, mapping.values()):
            pmf[k] += v
        return cls(pmf)

    @classmethod
    def poisson(cls, lambdas: Sequence[float], tail: float = 1e-12) -> "DiscreteLaw":
        """Independent Poisson product, each marginal truncated at tail mass ``tail``."""
        pmfs = []
        for lam in np.atleast_1d(lambdas):
            lam = float(lam)
            if lam < 0:
                raise ValueError("negative Poisson mean")
            K = int(stats.poisson.isf(tail / max(1, np.size(lambdas)), lam)) + 1 if lam > 0 else 0
            pmfs.append(stats.poisson.pmf(np.arange(K + 1), lam) if lam > 0 else np.array([1.0]))
        out = pmfs[0]
        for p in pmfs[1:]:
            out = np.multiply.outer(out, p)
        return cls(out)


def _pad(p: np.ndarray, shape) -> np.ndarray:
    return np.pad(p, [(0, s - n) for s, n in zip(shape, p.shape)])


def _law(x) -> DiscreteLaw:
    if isinstance(x, DiscreteLaw):
        return x
    if isinstance(x, dict):
        return DiscreteLaw.from_dict(x)
    if isinstance(x, EmpiricalLaw):
        if x.ints is None:
            raise ValueError("law has no integer part")
        return DiscreteLaw.from_samples(x.ints)
    return DiscreteLaw.from_samples(x)


def tv_distance(P, Q) -> float:
    """Total variation distance, half the L1 distance between pmfs.

    ``P`` and ``Q`` may be :class:`DiscreteLaw`, dicts ``{point: mass}``,
    integer sample arrays, or :class:`EmpiricalLaw` objects.
    """
    p, q = _law(P).pmf, _law(Q).pmf
    if p.ndim != q.ndim:
        raise ValueError("laws have different dimensions")
    shape = tuple(max(a, b) for a, b in zip(p.shape, q.shape))
    return 0.5 * float(np.abs(_pad(p, shape) - _pad(q, shape)).sum())


def wasserstein1(P, Q) -> float:
    """W1 between two real samples via the sorted (quantile) coupling."""
    a = np.sort(np.asarray(P, dtype=float).reshape(-1))
    b = np.sort(np.asarray(Q, dtype=float).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    return float(stats.wasserstein_distance(a, b))


class EmpiricalLaw:
    """Samples in ``Z_+^d x R^m`` with equal weights; either part may be absent."""

    def __init__(self, ints=None, reals=None):
        if ints is None and reals is None:
            raise ValueError("empty law")
        n = None
        if ints is not None:
            ints = np.asarray(ints)
            ints = ints.reshape(ints.shape[0], -1)
            if np.any(ints < 0) or np.any(ints != np.round(ints)):
                raise ValueError("integer part must hold nonnegative integers")
            ints = ints.astype(np.int64)
            n = ints.shape[0]
        if reals is not None:
            reals = np.asarray(reals, dtype=float)
            reals = reals.reshape(reals.shape[0], -1)
            if n is not None and reals.shape[0] != n:
                raise ValueError("parts have different sample counts")
            n = reals.shape[0]
        if not n:
            raise ValueError("empty law")
        self.ints, self.reals, self.size = ints, reals, n

    @property
    def d(self) -> int:
        return 0 if self.ints is None else self.ints.shape[1]

    @property
    def m(self) -> int:
        return 0 if self.reals is None else self.reals.shape[1]


class ProductTarget:
    """Product of independent Poisson laws and a centred normal ``N(0, C)`` (``m = 1``)."""

    def __init__(self, lambdas: Sequence[float], C: float = 1.0):
        self.lambdas = [float(v) for v in lambdas]
        self.C = float(C)
        self.d, self.m = len(self.lambdas), 1


_A_SEQ = [0.0, 1.0, -1.0]
_B_SEQ = [0.0, 1.0, -1.0]


def _nested(seq, count, scale):
    # dyadic refinement: 0, 1, -1, 1/2, -1/2, 1/4, -1/4, 3/4, -3/4, ...
    out = list(seq)
    level = 1
    while len(out) < count:
        den = 2 ** level
        for num in range(1, den, 2):
            out += [num / den, -num / den]
        level += 1
    return [scale * v for v in out[:count]]


def dictionary(size: int):
    """The ``(a, b)`` pairs of ``clamp(a x + b, -1, 1)``; nested in ``size``."""
    if size < 1:
        raise ValueError("dictionary size must be >= 1")
    a = _nested(_A_SEQ, size, 1.0)
    b = _nested(_B_SEQ, size, 2.0)
    return [(x, y) for x in a for y in b]


def _clamp_mean_normal(a: float, b: float, C: float) -> float:
    if a == 0.0 or C == 0.0:
        return float(np.clip(b, -1, 1))
    s = abs(a) * math.sqrt(C)
    lo, hi = (-1.0 - b) / s, (1.0 - b) / s
    Phi = lambda t: 0.5 * special.erfc(-t / math.sqrt(2))
    phi = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    inside = b * (Phi(hi) - Phi(lo)) + s * (phi(lo) - phi(hi))
    return inside + Phi(-hi) - Phi(lo)


def _box_sums(H: np.ndarray, d: int) -> np.ndarray:
    """Sums of ``H`` over all boxes ``[l, u]`` in each of the first ``d`` axes."""
    K = H.shape[0]
    l_idx, u_idx = np.triu_indices(K)
    out = H
    for ax in range(d):
        c = np.cumsum(out, axis=ax)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=ax)), c], axis=ax)
        out = np.take(c, u_idx + 1, axis=ax) - np.take(c, l_idx, axis=ax)
    return out


def h1_surrogate(P: EmpiricalLaw, Q, dictionary_size: int = 9, cap: int = 10) -> float:
    """Dictionary lower bound for the mixed distance between ``P`` and ``Q``.

    Maximises ``|E_P psi - E_Q psi|`` over ``psi(j; x) = 1{j in E} clamp(a x + b)``
    with ``E`` a box in ``{0..cap}^d`` (coordinates clipped at ``cap``) and
    ``(a, b)`` from :func:`dictionary`.  ``Q`` is an :class:`EmpiricalLaw` or
    a :class:`ProductTarget`, the latter integrated exactly.
    """
    if P.m != 1:
        raise ValueError("the surrogate needs a one-dimensional real part")
    if P.d != Q.d or Q.m != 1:
        raise ValueError("laws have mismatched dimensions")
    pairs = dictionary(dictionary_size)
    d = P.d
    K = cap + 1
    shape = (K,) * d

    def hist(law: EmpiricalLaw):
        x = law.reals[:, 0]
        Phi = np.stack([np.clip(a * x + b, -1, 1) for a, b in pairs], axis=1)
        if d == 0:
            return Phi.mean(axis=0)
        j = np.minimum(law.ints, cap)
        flat = np.ravel_multi_index(tuple(j.T), shape)
        H = np.zeros((K ** d, len(pairs)))
        np.add.at(H, flat, Phi)
        return H.reshape(shape + (len(pairs),)) / law.size

    HP = hist(P)
    if isinstance(Q, ProductTarget):
        pmf = np.ones(())
        for lam in Q.lambdas:
            p = stats.poisson.pmf(np.arange(cap), lam)
            pmf = np.multiply.outer(pmf, np.append(p, max(0.0, 1.0 - p.sum())))
        g = np.array([_clamp_mean_normal(a, b, Q.C) for a, b in pairs])
        HQ = np.multiply.outer(pmf, g) if d else g
    else:
        HQ = hist(Q)
    diff = HP - HQ
    if d == 0:
        return float(np.max(np.abs(diff)))
    return float(np.max(np.abs(_box_sums(diff, d))))


def distance_rows(values: dict, ses: Optional[dict] = None):
    """Rows ``(metric, value, se_or_na)`` for CSV output."""
    ses = ses or {}
    rows = []
    for k, v in values.items():
        se = ses.get(k)
        rows.append((k, float(v), "NA" if se is None else float(se)))
    return rows
