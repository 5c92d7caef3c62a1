"""Stein solvers, Stein factors, the portmanteau constant and a discrete Taylor check."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special, stats

__all__ = [
    "poisson_horizon",
    "ChenSteinSolution",
    "chen_stein_solve",
    "stein_factors",
    "gaussian_stein_solve",
    "GaussianSteinSolution",
    "portmanteau_constant",
    "TaylorReport",
    "discrete_taylor",
]

SQRT2PI = math.sqrt(2.0 * math.pi)


def poisson_horizon(lam: float, tail: float = 1e-14) -> int:
    """Smallest ``T`` with ``P(X >= T) < tail`` for ``X ~ Po(lam)``."""
    T = int(lam + 10 * math.sqrt(lam) + 10)
    while stats.poisson.sf(T - 1, lam) >= tail:
        T += 10
    while T > 1 and stats.poisson.sf(T - 2, lam) < tail:
        T -= 1
    return T


def _as_table(psi, upto: int) -> np.ndarray:
    if callable(psi):
        vals = np.asarray(psi(np.arange(upto)), dtype=float)
        if vals.shape != (upto,):
            vals = np.array([float(psi(int(w))) for w in range(upto)])
        return vals
    arr = np.asarray(psi, dtype=float).reshape(-1)
    if arr.size < upto:
        raise ValueError(f"test function tabulated on {arr.size} points, need {upto}")
    return arr[:upto]


class ChenSteinSolution:
    """Solution of ``lam f(x+1) - x f(x) = psi(x) - E psi(X)``, ``X ~ Po(lam)``.

    For ``x >= 1``, ``f(x) = (1/(lam p(x-1))) sum_{w<x} p(w) psit(w)`` with ``p`` the
    Poisson pmf and ``psit = psi - E psi``; equivalently minus the same
    expression over ``w >= x``.  The forward sum is used for ``x - 1 <= lam``
    and the tail sum beyond, both with pmf ratios formed in log space.  The
    value at 0 is ``f(1) - (f(3) - f(2))``.

    Parameters
    ----------
    lam : float
        Poisson mean.
    psi : callable or array_like
        Test function on the nonnegative integers with ``|psi| <= 1``.
    xmax : int
        Largest argument that will be requested.
    """

    def __init__(self, lam: float, psi, xmax: int = 200):
        if not lam > 0:
            raise ValueError("lambda must be positive")
        self.lam = float(lam)
        self.horizon = poisson_horizon(self.lam)
        self.xmax = int(max(xmax, 3))
        span = self.xmax + self.horizon + 2
        self.psi = _as_table(psi, span)
        if np.any(~np.isfinite(self.psi)) or np.max(np.abs(self.psi)) > 1 + 1e-12:
            raise ValueError("test function is not bounded by 1 on the horizon")
        w = np.arange(span)
        self._logp = w * math.log(self.lam) - self.lam - special.gammaln(w + 1)
        p = np.exp(self._logp[:self.horizon])
        self.expectation = float(np.dot(p, self.psi[:self.horizon]))
        self._centered = self.psi - self.expectation
        self._values = None

    def forward(self, x: int) -> float:
        """Forward-sum representation of ``f(x)``, ``x >= 1``."""
        if x < 1:
            raise ValueError("forward sum needs x >= 1")
        w = np.arange(x)
        ratio = np.exp(self._logp[w] - self._logp[x - 1])
        return float(np.dot(ratio, self._centered[w]) / self.lam)

    def tail(self, x: int) -> float:
        """Tail-sum representation of ``f(x)``, ``x >= 1``."""
        if x < 1:
            raise ValueError("tail sum needs x >= 1")
        w = np.arange(x, x + self.horizon)
        ratio = np.exp(self._logp[w] - self._logp[x - 1])
        return float(-np.dot(ratio, self._centered[w]) / self.lam)

    def forward_reliable(self, x: int) -> bool:
        """Whether the forward sum avoids catastrophic cancellation at ``x``."""
        w = np.arange(x)
        return bool(np.max(self._logp[w] - self._logp[x - 1]) < math.log(1e4))

    def tail_reliable(self, x: int) -> bool:
        w = np.arange(x, x + self.horizon)
        return bool(np.max(self._logp[w] - self._logp[x - 1]) < math.log(1e4))

    def values(self) -> np.ndarray:
        """``f(0..xmax+1)``."""
        if self._values is None:
            f = np.empty(self.xmax + 2)
            for x in range(1, self.xmax + 2):
                f[x] = self.forward(x) if x - 1 <= self.lam else self.tail(x)
            f[0] = f[1] - (f[3] - f[2])
            self._values = f
        return self._values

    def __call__(self, x: int) -> float:
        x = int(x)
        if x < 0 or x > self.xmax + 1:
            raise ValueError(f"x={x} outside the solved range 0..{self.xmax + 1}")
        return float(self.values()[x])

    def residual(self) -> np.ndarray:
        """``lam f(x+1) - x f(x) - psit(x)`` for ``x = 0..xmax``."""
        f = self.values()
        x = np.arange(self.xmax + 1)
        return self.lam * f[1:] - x * f[:-1] - self._centered[:self.xmax + 1]

    def differences(self):
        """Sup norms of ``f``, ``Delta f`` and ``Delta^2 f`` over ``0..xmax``."""
        f = self.values()
        return (float(np.max(np.abs(f[:self.xmax + 1]))),
                float(np.max(np.abs(np.diff(f)))),
                float(np.max(np.abs(np.diff(f, 2)))))


def chen_stein_solve(lam: float, psi, x: int) -> float:
    """Value ``f(x)`` of the Chen-Stein solution for test function ``psi``."""
    if x < 0:
        raise ValueError("x must be nonnegative")
    return ChenSteinSolution(lam, psi, xmax=max(int(x), 3))(x)


def stein_factors(lam: float):
    """The stated bounds ``(|f|, |Delta f|, |Delta^2 f|)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    c = -math.expm1(-lam)
    return 3.0, 2.0 * c / lam, 4.0 * c / lam ** 2


class GaussianSteinSolution:
    """Solution of ``f'(y) - y f(y) = psi(y) - E psi(N)``, ``N ~ N(0,1)``.

    Substituting ``a = y - s`` (for ``y <= 0``) or ``a = y + s`` (for ``y > 0``)
    in the integral representation gives integrands weighted by
    ``exp(y s - s^2/2)`` or ``exp(-y s - s^2/2)``, which never overflow.
    """

    def __init__(self, psi: Callable[[float], float], quad_tol: float = 1e-10,
                 breakpoints: Sequence[float] = ()):
        self.psi = psi
        self.tol = float(quad_tol)
        self.breakpoints = tuple(sorted(float(b) for b in breakpoints))
        self.expectation = self._gauss_mean()

    def _quad(self, fun, a, b, points=()):
        pts = [p for p in points if a < p < b]
        if math.isinf(b):
            if pts:
                v1, e1 = self._quad(fun, a, pts[-1], pts[:-1])
                v2, e2 = self._quad(fun, pts[-1], b)
                return v1 + v2, e1 + e2
            val, err = integrate.quad(fun, a, b, epsabs=self.tol, epsrel=self.tol, limit=400)
        else:
            val, err = integrate.quad(fun, a, b, epsabs=self.tol, epsrel=self.tol, limit=400,
                                      points=pts or None)
        if not np.isfinite(val) or err > 100 * self.tol:
            raise RuntimeError(f"quadrature failed: value {val}, error estimate {err:.3g}")
        return val, err

    def _gauss_mean(self) -> float:
        phi = lambda a: self.psi(a) * math.exp(-0.5 * a * a) / SQRT2PI
        neg, _ = self._quad(lambda s: phi(-s), 0.0, math.inf, [-b for b in self.breakpoints])
        pos, _ = self._quad(phi, 0.0, math.inf, self.breakpoints)
        return neg + pos

    def __call__(self, y: float) -> float:
        y = float(y)
        mu = self.expectation
        if y <= 0:
            fun = lambda s: (self.psi(y - s) - mu) * math.exp(y * s - 0.5 * s * s)
            pts = [y - b for b in self.breakpoints]
            return self._quad(fun, 0.0, math.inf, sorted(pts))[0]
        fun = lambda s: (self.psi(y + s) - mu) * math.exp(-y * s - 0.5 * s * s)
        pts = [b - y for b in self.breakpoints]
        return -self._quad(fun, 0.0, math.inf, sorted(pts))[0]

    def derivative(self, y: float) -> float:
        """``f'(y)`` from the Stein equation itself."""
        return self.psi(y) - self.expectation + y * self(y)


def gaussian_stein_solve(psi: Callable[[float], float], y: float, quad_tol: float = 1e-10,
                         breakpoints: Sequence[float] = ()) -> float:
    """Value at ``y`` of the Gaussian Stein solution for ``psi``."""
    return GaussianSteinSolution(psi, quad_tol, breakpoints)(y)


def portmanteau_constant(d: int, m: int, lambdas: Sequence[float] = (), C: Optional[float] = None) -> float:
    """Constant ``K`` multiplying the coefficient sum in the mixed bound.

    Uses ``M = max_i (1-e^{-lam_i})(1/lam_i + 1/lam_i^2)`` (0 for ``d = 0``) and

    - ``m = 1, d >= 1``: ``6 + (1 + 2 sqrt(2 pi))/C + M``;
    - ``m >= 2, d >= 1``: ``11 + M``;
    - ``m = 0, d >= 1``: ``6 * 1{d > 1} + M``.

    The pure Gaussian case ``d = 0`` is not covered here; the classical
    multivariate normal approximation bounds on the Poisson space apply.
    """
    if d < 0 or m < 0:
        raise ValueError("d and m must be nonnegative")
    if d == 0:
        raise ValueError("d = 0 is the pure Gaussian case; use the known normal approximation "
                         "bounds for Poisson functionals instead")
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) != d or any(not v > 0 for v in lambdas):
        raise ValueError("need d positive Poisson means")
    M = max(-math.expm1(-v) * (1.0 / v + 1.0 / v ** 2) for v in lambdas)
    if m == 1:
        if C is None or not C > 0:
            raise ValueError("a positive variance C is required when m = 1")
        return 6.0 + (1.0 + 2.0 * SQRT2PI) / float(C) + M
    if m >= 2:
        return 11.0 + M
    return (6.0 if d > 1 else 0.0) + M


@dataclass
class TaylorReport:
    """Discrete second-order Taylor expansion of ``f`` at ``a`` evaluated at ``x``.

    ``bound`` uses the sup of the mixed second differences over the lattice
    box spanned by ``a`` and ``x`` plus a 2-cell margin ("local box sup").
    """
    value: float
    linear_part: float
    remainder: float
    bound: float
    first_order_bound: float
    sup_kind: str = "local box sup"

    @property
    def holds(self) -> bool:
        return abs(self.remainder) <= self.bound * (1 + 1e-12) + 1e-12


def discrete_taylor(f: Callable, a: Sequence[int], x: Sequence[int]) -> TaylorReport:
    """Discrete Taylor expansion on the nonnegative integer lattice."""
    a = np.asarray(a, dtype=int).reshape(-1)
    x = np.asarray(x, dtype=int).reshape(-1)
    if a.shape != x.shape or np.any(a < 0) or np.any(x < 0):
        raise ValueError("a and x must be nonnegative integer points of equal dimension")
    d = a.size
    ev = lambda p: float(f(tuple(int(v) for v in p)))
    eye = np.eye(d, dtype=int)
    fa = ev(a)
    grad = np.array([ev(a + eye[i]) - fa for i in range(d)])
    h = x - a
    linear = fa + float(np.dot(grad, h))
    value = ev(x)
    lo = np.maximum(np.minimum(a, x) - 2, 0)
    hi = np.maximum(a, x) + 2
    sup2 = 0.0
    sup1 = 0.0
    for y in itertools.product(*[range(l, u + 1) for l, u in zip(lo, hi)]):
        y = np.array(y)
        fy = ev(y)
        for i in range(d):
            fi = ev(y + eye[i])
            sup1 = max(sup1, abs(fi - fy))
            for j in range(d):
                fj = ev(y + eye[j])
                fij = ev(y + eye[i] + eye[j])
                sup2 = max(sup2, abs(fij - fi - fj + fy))
    habs = np.abs(h)
    diag = float(np.sum(habs * np.abs(h - 1)))
    off = float(np.sum(habs) ** 2 - np.sum(habs ** 2))
    return TaylorReport(value, linear, value - linear, 0.5 * sup2 * (diag + off),
                        sup1 * float(np.sum(habs)))
