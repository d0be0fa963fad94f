"""Survival sub-model: link functions, individual hazard, and survival.

The hazard is zero before a subject's entry age; cumulative hazards integrate
from t0 with a panel-subdivided 15-point Gauss-Legendre rule so that interior
spline knots of the baseline do not break quadrature accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quadrature, trajectory
from .basis import SplineBasis, basis_matrix

LINK_KINDS = ("value", "slope", "value_slope", "cumulative")

PANEL_YEARS = 2.0


@dataclass(frozen=True)
class LinkSpec:
    """Which functional of the trajectory enters the hazard, with coefficients."""

    kind: str
    alpha1: float = 0.0
    alpha2: float = 0.0
    alpha3: float = 0.0

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ValueError(f"unknown link kind {self.kind!r}")
        for a in (self.alpha1, self.alpha2, self.alpha3):
            if not np.isfinite(a):
                raise ValueError("link coefficients must be finite")

    @property
    def n_alpha(self) -> int:
        return 2 if self.kind == "value_slope" else 1

    @property
    def alphas(self) -> np.ndarray:
        if self.kind == "value":
            return np.array([self.alpha1])
        if self.kind == "slope":
            return np.array([self.alpha2])
        if self.kind == "value_slope":
            return np.array([self.alpha1, self.alpha2])
        return np.array([self.alpha3])

    def with_alphas(self, alphas) -> "LinkSpec":
        alphas = np.asarray(alphas, dtype=float)
        if alphas.size != self.n_alpha:
            raise ValueError("alpha vector length does not match link kind")
        if self.kind == "value":
            return LinkSpec("value", alpha1=float(alphas[0]))
        if self.kind == "slope":
            return LinkSpec("slope", alpha2=float(alphas[0]))
        if self.kind == "value_slope":
            return LinkSpec("value_slope", alpha1=float(alphas[0]), alpha2=float(alphas[1]))
        return LinkSpec("cumulative", alpha3=float(alphas[0]))

    @property
    def alpha_names(self) -> tuple:
        if self.kind == "value":
            return ("alpha1",)
        if self.kind == "slope":
            return ("alpha2",)
        if self.kind == "value_slope":
            return ("alpha1", "alpha2")
        return ("alpha3",)


@dataclass
class SurvivalParams:
    """Baseline spline, link, and optional baseline-covariate coefficients."""

    basis: SplineBasis
    gamma_h0: np.ndarray
    link: LinkSpec
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    covariate_names: tuple = ()

    def __post_init__(self):
        self.gamma_h0 = np.asarray(self.gamma_h0, dtype=float)
        self.gamma = np.asarray(self.gamma, dtype=float)
        if self.gamma_h0.shape != (self.basis.size,):
            raise ValueError("baseline coefficient length does not match basis dimension")
        if self.gamma.size != len(self.covariate_names):
            raise ValueError("gamma length does not match survival covariates")


def subject_covariates(subject, names) -> np.ndarray:
    """Baseline survival covariate vector looked up by name."""
    values = []
    for name in names:
        if name in getattr(subject, "extras", {}):
            values.append(subject.extras[name])
        elif hasattr(subject, name):
            values.append(getattr(subject, name))
        else:
            raise ValueError(f"subject has no covariate {name!r}")
    return np.asarray(values, dtype=float)


def link_value(link: LinkSpec, design, beta, b, subject, t):
    """f(m_i(t)) per the active link kind."""
    scalar = np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if link.kind == "value":
        out = link.alpha1 * trajectory.m_value(design, beta, b, subject, t_arr)
    elif link.kind == "slope":
        out = link.alpha2 * trajectory.m_slope(design, beta, b, subject, t_arr)
    elif link.kind == "value_slope":
        out = (link.alpha1 * trajectory.m_value(design, beta, b, subject, t_arr)
               + link.alpha2 * trajectory.m_slope(design, beta, b, subject, t_arr))
    else:
        out = link.alpha3 * trajectory.m_cumulative(design, beta, b, subject,
                                                    subject.t0, t_arr)
    return float(out[0]) if scalar else out


def log_hazard(params: SurvivalParams, design, beta, b, subject, t):
    """log h_i(t) = log h0(t) + gamma . Xc + f(m_i(t)); defined for t > t0."""
    scalar = np.ndim(t) == 0
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr <= subject.t0):
        raise ValueError("hazard undefined before entry")
    base = basis_matrix(params.basis, t_arr) @ params.gamma_h0
    cov = 0.0
    if params.gamma.size:
        cov = float(params.gamma @ subject_covariates(subject, params.covariate_names))
    out = base + cov + link_value(params.link, design, beta, b, subject, t_arr)
    return float(out[0]) if scalar else out


def cumulative_hazard(params: SurvivalParams, design, beta, b, subject,
                      a: float, b_t: float) -> float:
    """Integral of the hazard over [a, b_t], both at or after entry."""
    if b_t < a:
        raise ValueError("integration bounds out of order")
    if a < subject.t0 - 1e-12:
        raise ValueError("hazard undefined before entry")
    if b_t == a:
        return 0.0
    nodes, weights = quadrature.panel_points(a, b_t, PANEL_YEARS)
    log_h = log_hazard(params, design, beta, b, subject, nodes)
    return float(np.sum(weights * np.exp(log_h)))


def survival_prob(params: SurvivalParams, design, beta, b, subject, t: float) -> float:
    """S_i(t) = exp(-integral of the hazard from entry to t); S(t0) = 1."""
    if t < subject.t0:
        raise ValueError("survival undefined before entry")
    return float(np.exp(-cumulative_hazard(params, design, beta, b, subject,
                                           subject.t0, t)))
