"""Longitudinal sub-model: subject mean trajectory, its slope, and its integral.

The default design is linear in age with a random intercept and slope:
fixed covariates (1, age, age0, manuf) and random covariates (1, age).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quadrature


class LinearAgeDesign:
    """Fixed effects on (1, age, age0, manuf); random intercept and slope."""

    p = 4
    q = 2

    def fixed(self, t, subject) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, self.p))
        out[:, 0] = 1.0
        out[:, 1] = t
        out[:, 2] = subject.age0
        out[:, 3] = subject.manuf
        return out

    def random(self, t, subject) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((t.size, self.q))
        out[:, 0] = 1.0
        out[:, 1] = t
        return out

    def fixed_deriv(self, t, subject) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((t.size, self.p))
        out[:, 1] = 1.0
        return out

    def random_deriv(self, t, subject) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros((t.size, self.q))
        out[:, 1] = 1.0
        return out

    def translation_map(self, subject) -> np.ndarray:
        """A with X(t) @ delta == Z(t) @ (A @ delta) for every t.

        Exists because every fixed-effect column lies in the span of the
        random-effect columns: the intercept and age columns coincide, and
        the per-subject constants age0 and manuf are multiples of the
        intercept. Lets the sampler translate beta and absorb the shift into
        the random effects without changing any trajectory.
        """
        return np.array([[1.0, 0.0, subject.age0, subject.manuf],
                         [0.0, 1.0, 0.0, 0.0]])

    def to_dict(self) -> dict:
        return {"kind": "linear_age"}


DESIGN_REGISTRY = {"linear_age": LinearAgeDesign}


def design_from_dict(d: dict):
    kind = d.get("kind")
    if kind not in DESIGN_REGISTRY:
        raise ValueError(f"unknown design kind {kind!r}")
    return DESIGN_REGISTRY[kind]()


@dataclass
class LongitudinalParams:
    """Fixed effects, random-effects covariance, and residual sd."""

    beta: np.ndarray
    b_cov: np.ndarray
    sigma_eps: float

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.b_cov = np.asarray(self.b_cov, dtype=float)
        if self.sigma_eps <= 0:
            raise ValueError("residual sd must be positive")
        np.linalg.cholesky(self.b_cov)  # raises if not positive definite


def m_value(design, beta, b, subject, t):
    """Mean trajectory beta . X(t) + b . Z(t); scalar in, scalar out."""
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float)
    out = design.fixed(t, subject) @ beta + design.random(t, subject) @ b
    return float(out[0]) if np.ndim(t) == 0 else out


def has_derivative(design) -> bool:
    return getattr(design, "fixed_deriv", None) is not None and \
        getattr(design, "random_deriv", None) is not None


def m_slope(design, beta, b, subject, t):
    """Trajectory time derivative from the design's analytic derivatives."""
    if not has_derivative(design):
        raise ValueError("slope link requires differentiable design")
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float)
    out = design.fixed_deriv(t, subject) @ beta + design.random_deriv(t, subject) @ b
    return float(out[0]) if np.ndim(t) == 0 else out


def integrated_design(design, subject, t0: float, t) -> tuple:
    """(integral of X, integral of Z) from t0 to each target age.

    15-point Gauss-Legendre per target interval; exact for designs polynomial
    in age up to degree 29.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < t0):
        raise ValueError("integration endpoint precedes start")
    nodes, weights = quadrature.gl_points(np.full(t.size, t0), t)
    flat = nodes.ravel()
    xf = design.fixed(flat, subject).reshape(t.size, nodes.shape[1], -1)
    zf = design.random(flat, subject).reshape(t.size, nodes.shape[1], -1)
    ix = np.einsum("nk,nkp->np", weights, xf)
    iz = np.einsum("nk,nkq->nq", weights, zf)
    return ix, iz


def m_cumulative(design, beta, b, subject, t0: float, t):
    """Integral of the mean trajectory from t0 to t."""
    scalar = np.ndim(t) == 0
    if scalar and t < t0:
        raise ValueError("integration endpoint precedes start")
    ix, iz = integrated_design(design, subject, t0, t)
    out = ix @ np.asarray(beta, dtype=float) + iz @ np.asarray(b, dtype=float)
    return float(out[0]) if scalar else out
