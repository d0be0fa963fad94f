"""B-spline basis over age and the log baseline hazard it parameterizes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis on an age interval.

    The knot vector repeats each boundary age degree + 1 times, so the basis
    is a nonnegative partition of unity on [boundary[0], boundary[1]].
    """

    degree: int = 3
    interior_knots: tuple = ()
    boundary: tuple = (40.0, 74.0)

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        lo, hi = self.boundary
        if not lo < hi:
            raise ValueError("boundary interval must be nondegenerate")
        knots = tuple(float(k) for k in self.interior_knots)
        if any(k2 < k1 for k1, k2 in zip(knots, knots[1:])):
            raise ValueError("interior knots must be sorted")
        if any(not lo < k < hi for k in knots):
            raise ValueError("interior knots must lie strictly inside the boundary")
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(self, "boundary", (float(lo), float(hi)))

    @property
    def size(self) -> int:
        """Basis dimension: number of interior knots + degree + 1."""
        return len(self.interior_knots) + self.degree + 1

    def knot_vector(self) -> np.ndarray:
        lo, hi = self.boundary
        return np.concatenate([
            np.full(self.degree + 1, lo),
            np.asarray(self.interior_knots, dtype=float),
            np.full(self.degree + 1, hi),
        ])

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "interior_knots": list(self.interior_knots),
            "boundary": list(self.boundary),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        return cls(
            degree=int(d["degree"]),
            interior_knots=tuple(d["interior_knots"]),
            boundary=tuple(d["boundary"]),
        )


def basis_matrix(basis: SplineBasis, t) -> np.ndarray:
    """Evaluate all basis functions at the given ages, one row per age.

    Iterative Cox-de Boor recursion over the clamped knot vector; the right
    boundary age is mapped into the last nonempty interval so evaluation is
    defined on the closed support.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = basis.boundary
    if np.any(t < lo) or np.any(t > hi):
        raise ValueError("age outside spline support")
    kn = basis.knot_vector()
    d = basis.degree
    q = basis.size
    m = q + d  # number of degree-0 functions
    idx = np.clip(np.searchsorted(kn, t, side="right") - 1, d, q - 1)
    b = np.zeros((t.size, m))
    b[np.arange(t.size), idx] = 1.0
    for r in range(1, d + 1):
        nxt = np.zeros((t.size, m - r))
        for j in range(m - r):
            left = kn[j + r] - kn[j]
            if left > 0:
                nxt[:, j] += (t - kn[j]) / left * b[:, j]
            right = kn[j + r + 1] - kn[j + 1]
            if right > 0:
                nxt[:, j] += (kn[j + r + 1] - t) / right * b[:, j + 1]
        b = nxt
    return b


def basis_eval(basis: SplineBasis, t: float) -> np.ndarray:
    """Basis function values at a single age."""
    return basis_matrix(basis, float(t))[0]


def log_h0(basis: SplineBasis, gamma_h0, t):
    """Log baseline hazard: dot product of basis values and spline coefficients."""
    gamma_h0 = np.asarray(gamma_h0, dtype=float)
    if gamma_h0.shape != (basis.size,):
        raise ValueError(
            f"coefficient vector has length {gamma_h0.size}, basis dimension is {basis.size}"
        )
    if not np.all(np.isfinite(gamma_h0)):
        raise ValueError("baseline coefficients must be finite")
    out = basis_matrix(basis, t) @ gamma_h0
    return float(out[0]) if np.isscalar(t) or np.ndim(t) == 0 else out


def default_knots(event_ages, q_target: int, degree: int = 3,
                  boundary: tuple | None = None) -> SplineBasis:
    """Cubic basis with interior knots at quantiles of the observed event ages.

    The boundary defaults to the range of the supplied ages; callers fitting a
    cohort should pass (min entry age, max exit age) explicitly so the hazard
    is defined over the whole observation window.
    """
    event_ages = np.asarray(event_ages, dtype=float)
    if event_ages.size == 0:
        raise ValueError("cannot place baseline knots without observed events")
    if boundary is None:
        boundary = (float(event_ages.min()), float(event_ages.max()))
    lo, hi = boundary
    n_interior = q_target - degree - 1
    if n_interior < 0:
        raise ValueError("q_target smaller than degree + 1")
    if n_interior == 0:
        return SplineBasis(degree=degree, interior_knots=(), boundary=boundary)
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    knots = np.quantile(event_ages, probs)
    eps = 1e-9 * max(1.0, abs(hi))
    knots = np.clip(knots, lo + eps, hi - eps)
    unique = np.unique(knots)
    if unique.size < knots.size:
        warnings.warn(
            "duplicate event-age quantiles collapsed; reducing interior knot count "
            f"from {knots.size} to {unique.size}"
        )
        knots = unique
    if knots.size < n_interior and unique.size == knots.size:
        warnings.warn("fewer events than requested knots; knot count reduced")
    return SplineBasis(degree=degree, interior_knots=tuple(knots), boundary=boundary)
