"""Poisson configurations on boxes in R^m.

A control measure is ``mu_n = n * p`` on an axis-aligned box, where ``p`` is a
bounded probability density.  Configurations are finite point multisets.
Every Monte Carlo replicate draws from its own counter-based stream keyed by
``(seed, index)``, so results do not depend on execution order.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate

__all__ = [
    "replicate_rng",
    "ControlMeasure",
    "Configuration",
    "Window",
    "sample_configuration",
    "sample_points",
    "add_point",
    "window_count",
    "control_mass",
]


def replicate_rng(seed: int, index: int = 0, *more: int) -> np.random.Generator:
    """Counter-based generator for replicate ``index`` of a run seeded by ``seed``.

    Extra integers select independent sub-streams, e.g. one per grid point.
    """
    if seed is None:
        raise ValueError("a seed is required")
    key = [int(seed), int(index)] + [int(v) for v in more]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def _as_box(lower, upper):
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if lower.shape != upper.shape or lower.ndim != 1:
        raise ValueError("box corners must be 1-d arrays of equal length")
    if not np.all(lower < upper):
        raise ValueError("degenerate box: need lower < upper in every coordinate")
    return lower, upper


class ControlMeasure:
    """Intensity measure ``n * p`` on a box.

    Parameters
    ----------
    lower, upper : array_like
        Box corners.
    intensity : float
        Total mass ``n`` of the measure on the box.
    density : callable, optional
        Vectorised density ``p(X)`` for ``X`` of shape ``(N, m)``.  Uniform if
        omitted.
    density_bound : float, optional
        Upper bound on ``p`` used for rejection sampling.  Required when a
        density is given.
    breakpoints : sequence of float, optional
        Discontinuities of a 1-d density, passed to the quadrature routine.
    """

    def __init__(self, lower, upper, intensity: float, density: Optional[Callable] = None,
                 density_bound: Optional[float] = None, breakpoints: Optional[Sequence[float]] = None):
        self.lower, self.upper = _as_box(lower, upper)
        self.intensity = float(intensity)
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError("intensity must be a finite nonnegative number")
        self.volume = float(np.prod(self.upper - self.lower))
        self.is_uniform = density is None
        if density is None:
            self._density = None
            self.density_bound = 1.0 / self.volume
        else:
            if density_bound is None or not density_bound > 0:
                raise ValueError("a positive density_bound is required with a custom density")
            self._density = density
            self.density_bound = float(density_bound)
        self.breakpoints = None if breakpoints is None else tuple(float(b) for b in breakpoints)

    @classmethod
    def uniform(cls, intensity: float, lower=0.0, upper=1.0) -> "ControlMeasure":
        return cls(lower, upper, intensity)

    @property
    def dim(self) -> int:
        return self.lower.size

    def density(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float).reshape(-1, self.dim)
        if self._density is None:
            return np.full(x.shape[0], 1.0 / self.volume)
        return np.asarray(self._density(x), dtype=float).reshape(x.shape[0])

    def contains(self, points, closed: bool = True) -> np.ndarray:
        x = np.asarray(points, dtype=float).reshape(-1, self.dim)
        upper_ok = x <= self.upper if closed else x < self.upper
        return np.all((x >= self.lower) & upper_ok, axis=1)

    def __repr__(self):
        kind = "uniform" if self.is_uniform else "density"
        return f"ControlMeasure(dim={self.dim}, n={self.intensity:g}, {kind})"


class Configuration:
    """Immutable finite multiset of points in R^m."""

    __slots__ = ("_points", "box")

    def __init__(self, points, dim: Optional[int] = None, box=None):
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            pts = np.zeros((0, dim if dim is not None else (box[0].size if box is not None else 1)))
        elif pts.ndim == 1:
            pts = pts.reshape(-1, 1) if dim in (None, 1) else pts.reshape(-1, dim)
        pts = np.array(pts, dtype=float, copy=True)
        pts.setflags(write=False)
        self._points = pts
        self.box = box

    @property
    def points(self) -> np.ndarray:
        return self._points

    @property
    def dim(self) -> int:
        return self._points.shape[1]

    def __len__(self) -> int:
        return self._points.shape[0]

    def has_duplicates(self) -> bool:
        if len(self) < 2:
            return False
        return np.unique(self._points, axis=0).shape[0] < len(self)

    def __repr__(self):
        return f"Configuration(size={len(self)}, dim={self.dim})"


class Window:
    """Half-open axis-aligned box ``[lower, upper)``."""

    def __init__(self, lower, upper, measure: Optional[ControlMeasure] = None):
        self.lower, self.upper = _as_box(lower, upper)
        if measure is not None:
            if self.lower.size != measure.dim:
                raise ValueError("window dimension differs from the control box")
            if np.any(self.lower < measure.lower) or np.any(self.upper > measure.upper):
                raise ValueError("window is not contained in the control box")

    def contains(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float).reshape(-1, self.lower.size)
        return np.all((x >= self.lower) & (x < self.upper), axis=1)

    def __repr__(self):
        return f"Window({self.lower.tolist()}, {self.upper.tolist()})"


def sample_points(measure: ControlMeasure, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` i.i.d. points with density ``p``, by rejection against ``density_bound``."""
    m = measure.dim
    if count == 0:
        return np.zeros((0, m))
    span = measure.upper - measure.lower
    if measure.is_uniform:
        return measure.lower + span * rng.random((count, m))
    accepted = []
    need = count
    bound = measure.density_bound
    while need > 0:
        batch = max(16, int(1.5 * need * bound * measure.volume) + 8)
        prop = measure.lower + span * rng.random((batch, m))
        p = measure.density(prop)
        bad = p > bound * (1 + 1e-12)
        if np.any(bad):
            x = prop[np.argmax(bad)]
            raise ValueError(f"density {p[np.argmax(bad)]:.6g} at point {x.tolist()} "
                             f"exceeds density_bound {bound:.6g}")
        keep = prop[rng.random(batch) * bound < p]
        accepted.append(keep[:need])
        need -= accepted[-1].shape[0]
    return np.concatenate(accepted)


def sample_configuration(measure: ControlMeasure, rng: np.random.Generator) -> Configuration:
    """Draw a Poisson configuration with control ``measure``.

    The count is Poisson(n); given the count, points are i.i.d. with density ``p``.
    """
    count = int(rng.poisson(measure.intensity)) if measure.intensity > 0 else 0
    return Configuration(sample_points(measure, count, rng), dim=measure.dim,
                         box=(measure.lower, measure.upper))


def add_point(config: Configuration, z) -> Configuration:
    """Return ``config + delta_z`` without modifying ``config``."""
    z = np.asarray(z, dtype=float).reshape(1, -1)
    if z.shape[1] != config.dim:
        raise ValueError("point dimension differs from the configuration")
    if config.box is not None:
        lo, hi = config.box
        if np.any(z[0] < lo) or np.any(z[0] > hi):
            raise ValueError(f"point {z[0].tolist()} lies outside the control box")
    return Configuration(np.concatenate([config.points, z]), box=config.box)


def window_count(config: Configuration, A: Window) -> int:
    """Number of points of ``config`` in the half-open window ``A``."""
    if len(config) == 0:
        return 0
    return int(np.count_nonzero(A.contains(config.points)))


def control_mass(measure: ControlMeasure, A: Window, rtol: float = 1e-8) -> float:
    """``mu_n(A) = n * int_A p`` by adaptive quadrature."""
    lo = np.maximum(A.lower, measure.lower)
    hi = np.minimum(A.upper, measure.upper)
    if np.any(lo >= hi):
        return 0.0
    if measure.is_uniform:
        return measure.intensity * float(np.prod(hi - lo)) / measure.volume
    m = measure.dim
    if m == 1:
        pts = None
        if measure.breakpoints:
            pts = [b for b in measure.breakpoints if lo[0] < b < hi[0]] or None
        val, err, info = integrate.quad(lambda x: measure.density(np.array([[x]]))[0], lo[0], hi[0],
                                        points=pts, epsrel=rtol, epsabs=0.0, limit=200, full_output=1)[:3]
    else:
        def f(*xs):
            return measure.density(np.array([xs]))[0]
        val, err = integrate.nquad(f, list(zip(lo, hi)), opts={"epsrel": rtol, "epsabs": 0.0, "limit": 200})
    if not np.isfinite(val) or err > max(rtol * abs(val), 1e-13) * 10:
        raise RuntimeError(f"quadrature did not converge: value {val:.6g}, residual {err:.3g}")
    return measure.intensity * float(val)
