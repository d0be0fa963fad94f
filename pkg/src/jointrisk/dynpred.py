"""Individual dynamic risk prediction over posterior draws.

For a subject event-free at landmark s, the probability of an event in
(s, s+w] is averaged over draws of the parameters and of the subject's
random effects given the history up to s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quadrature
from .errors import DataError
from .basis import basis_matrix
from .model import ModelSpec, ParameterVector
from .trajectory import integrated_design


@dataclass
class RiskPrediction:
    """Posterior mean and 95% credible interval of the window risk."""

    mean: float
    ci_low: float
    ci_high: float
    n_draws: int

    def __post_init__(self):
        # one-ulp slack: the mean of identical draws can round past the
        # percentile endpoints
        eps = 1e-12
        if not (-eps <= self.ci_low <= self.mean + eps
                and self.mean <= self.ci_high + eps <= 1.0 + 2 * eps):
            raise ValueError("risk prediction interval out of order")


@dataclass
class _History:
    """Subject history truncated at a landmark; duck-types SubjectRecord."""

    subject_id: str
    t0: float
    age0: float
    manuf: int
    times: np.ndarray
    y: np.ndarray
    extras: dict


def truncate_history(subject, s: float) -> _History:
    """Measurements at or before the landmark; later visits are excluded."""
    keep = subject.times <= s
    if not np.any(keep):
        raise DataError("landmark precedes the first measurement")
    return _History(
        subject_id=subject.subject_id, t0=subject.t0, age0=subject.age0,
        manuf=subject.manuf, times=subject.times[keep], y=subject.y[keep],
        extras=dict(getattr(subject, "extras", {})),
    )


class _HazardSegment:
    """Precomputed quadrature arrays for the hazard integral over one interval."""

    def __init__(self, model: ModelSpec, subject, a: float, b: float):
        self.empty = b <= a
        if self.empty:
            return
        design = model.design
        nodes, self.weights = quadrature.panel_points(a, b)
        self.basis = basis_matrix(model.basis, nodes)
        self.kind = model.link.kind
        if self.kind in ("value", "value_slope"):
            self.x = design.fixed(nodes, subject)
            self.z = design.random(nodes, subject)
        if self.kind in ("slope", "value_slope"):
            self.dx = design.fixed_deriv(nodes, subject)
            self.dz = design.random_deriv(nodes, subject)
        if self.kind == "cumulative":
            self.ix, self.iz = integrated_design(design, subject, subject.t0, nodes)
        if model.survival_covariates:
            from .hazard import subject_covariates
            self.xc = subject_covariates(subject, model.survival_covariates)
        else:
            self.xc = np.zeros(0)

    def cumhaz(self, pv: ParameterVector, b: np.ndarray) -> float:
        if self.empty:
            return 0.0
        log_h = self.basis @ pv.gamma_h0
        alphas = pv.alpha
        if self.kind == "value":
            log_h = log_h + alphas[0] * (self.x @ pv.beta + self.z @ b)
        elif self.kind == "slope":
            log_h = log_h + alphas[0] * (self.dx @ pv.beta + self.dz @ b)
        elif self.kind == "value_slope":
            log_h = log_h + alphas[0] * (self.x @ pv.beta + self.z @ b) \
                + alphas[1] * (self.dx @ pv.beta + self.dz @ b)
        else:
            log_h = log_h + alphas[0] * (self.ix @ pv.beta + self.iz @ b)
        if pv.gamma.size:
            log_h = log_h + float(pv.gamma @ self.xc)
        return float(np.sum(self.weights * np.exp(log_h)))


def sample_re_given_history(model: ModelSpec, pv: ParameterVector, history,
                            s: float, rng, n_burnin: int = 200,
                            _segment: "_HazardSegment | None" = None) -> np.ndarray:
    """One draw of the random effects given history and survival to s.

    An independence Metropolis-Hastings chain: proposals come from the exact
    Gaussian conditional of b given the longitudinal history alone, so the
    acceptance ratio reduces to the survival factor up to s.
    """
    design = model.design
    q = design.q
    b_cov = pv.b_cov
    sigma2 = pv.sigma_eps ** 2
    z = design.random(history.times, history)
    x = design.fixed(history.times, history)
    resid = history.y - x @ pv.beta
    prec = z.T @ z / sigma2 + np.linalg.inv(b_cov)
    cov = np.linalg.inv(prec)
    mean = cov @ (z.T @ resid) / sigma2
    chol = np.linalg.cholesky(cov)

    segment = _segment
    if segment is None:
        segment = _HazardSegment(model, history, history.t0, s)

    def log_survival(b):
        return -segment.cumhaz(pv, b)

    b = mean.copy()
    log_num = log_survival(b)  # target/proposal ratio up to the shared Gaussian
    if not np.isfinite(log_num):
        raise ValueError("non-finite random-effects target at the chain start")
    for _ in range(n_burnin):
        cand = mean + chol @ rng.standard_normal(q)
        log_cand = log_survival(cand)
        if np.log(rng.random()) < log_cand - log_num:
            b, log_num = cand, log_cand
    return b


def predict_risk(model: ModelSpec, draws: np.ndarray, subject, s: float,
                 w: float, n_draws: int = 500, seed: int = 0,
                 rng=None) -> RiskPrediction:
    """Monte Carlo estimate of the event probability in (s, s+w]."""
    if model.basis is None:
        raise ValueError("model basis must be resolved")
    if w < 0:
        raise ValueError("prediction window must be nonnegative")
    if s < subject.t0:
        raise DataError("landmark precedes entry")
    if s + w > model.basis.boundary[1] + 1e-12:
        raise DataError("window exceeds model support")
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2 or draws.shape[0] == 0:
        raise ValueError("need pooled posterior draws, one row per draw")
    rng = rng if rng is not None else np.random.default_rng(seed)
    history = truncate_history(subject, s)
    dims = model.dims
    seg_hist = _HazardSegment(model, history, history.t0, s)
    seg_window = _HazardSegment(model, history, s, s + w)
    probs = np.empty(n_draws)
    for rep in range(n_draws):
        g = rng.integers(draws.shape[0])
        pv = ParameterVector.from_flat(draws[g], dims)
        b = sample_re_given_history(model, pv, history, s, rng,
                                    _segment=seg_hist)
        probs[rep] = -np.expm1(-seg_window.cumhaz(pv, b))
    return RiskPrediction(
        mean=float(np.mean(probs)),
        ci_low=float(np.percentile(probs, 2.5)),
        ci_high=float(np.percentile(probs, 97.5)),
        n_draws=n_draws,
    )


def predict_curve(model: ModelSpec, draws: np.ndarray, subject, landmarks,
                  w: float, n_draws: int = 500, seed: int = 0) -> list:
    """Window risks at increasing landmarks, history truncated at each one."""
    landmarks = list(landmarks)
    if any(b <= a for a, b in zip(landmarks, landmarks[1:])):
        raise ValueError("landmarks must strictly increase")
    out = []
    for i, s in enumerate(landmarks):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        out.append(predict_risk(model, draws, subject, s, w,
                                n_draws=n_draws, rng=rng))
    return out
