"""Joint log-likelihood, priors, adaptive Metropolis-Hastings, and fit driver.

The sampler works on the unconstrained parameter space of ParameterVector and
updates blockwise: fixed effects, residual sd, random-effects Cholesky, link
(and survival-covariate) coefficients, baseline spline coefficients, and all
subject random effects in one vectorized pass. Proposal scales adapt toward a
target acceptance rate during warmup and are frozen afterwards.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import solve_triangular
from scipy.special import multigammaln
from scipy.stats import invwishart

from . import quadrature
from .cohort import Cohort
from .errors import DataError
from .basis import basis_matrix, default_knots
from .model import ModelSpec, ModelDims, ParameterVector, coefficient_names
from .trajectory import has_derivative, integrated_design

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Priors


@dataclass
class Priors:
    """Weakly informative defaults; the random-effects covariance gets an
    inverse-Wishart prior evaluated on the reconstructed matrix."""

    sd_beta: float = 10.0
    sd_gamma: float = 10.0
    sd_alpha: float = 10.0
    sd_spline: float = 10.0
    sd_log_sigma: float = 2.0
    iw_df: float | None = None
    iw_scale: np.ndarray | None = None

    def _normal_terms(self, pv: ParameterVector) -> float:
        out = 0.0
        for values, sd in ((pv.beta, self.sd_beta), (pv.gamma, self.sd_gamma),
                           (pv.alpha, self.sd_alpha), (pv.gamma_h0, self.sd_spline)):
            out += -0.5 * values.size * (LOG_2PI + 2.0 * math.log(sd))
            out += -0.5 * float(np.sum(values ** 2)) / sd ** 2
        out += -0.5 * (LOG_2PI + 2.0 * math.log(self.sd_log_sigma))
        out += -0.5 * pv.log_sigma ** 2 / self.sd_log_sigma ** 2
        return out

    def _invwishart_logpdf(self, b_cov: np.ndarray) -> float:
        q = b_cov.shape[0]
        df = self.iw_df if self.iw_df is not None else q + 2
        scale = self.iw_scale if self.iw_scale is not None else np.eye(q)
        sign, logdet_b = np.linalg.slogdet(b_cov)
        if sign <= 0:
            return -np.inf
        _, logdet_s = np.linalg.slogdet(scale)
        tr = float(np.trace(np.linalg.solve(b_cov, scale)))
        return (0.5 * df * logdet_s - 0.5 * df * q * math.log(2.0)
                - multigammaln(0.5 * df, q)
                - 0.5 * (df + q + 1) * logdet_b - 0.5 * tr)

    def log_prior(self, pv: ParameterVector, power: float = 1.0) -> float:
        """Log prior density in the unconstrained parameterization.

        `power` tempers the density (consensus splits use 1/n_splits); the
        log-Cholesky Jacobian is part of the change of measure and is never
        tempered.
        """
        q = pv.chol_log_diag.size
        constrained = self._normal_terms(pv) + self._invwishart_logpdf(pv.b_cov)
        # |d B / d (log-diag, lower)| for B = L L^T with log-diagonal L
        jacobian = q * math.log(2.0) + float(
            np.sum((q - np.arange(q) + 1) * pv.chol_log_diag))
        return power * constrained + jacobian


@dataclass
class MCMCConfig:
    n_chains: int = 3
    n_iter: int = 8500
    n_warmup: int = 3500
    seed: int = 0
    target_acceptance: float = 0.234
    adapt_cov_start: int = 200
    n_threads: int | None = None

    def __post_init__(self):
        if self.n_warmup >= self.n_iter:
            raise ValueError("warmup must be shorter than the chain")


# ---------------------------------------------------------------------------
# Likelihood cache


class LikelihoodCache:
    """Precomputed design, basis, and quadrature arrays for one cohort."""

    def __init__(self, cohort, model: ModelSpec):
        if model.basis is None:
            raise ValueError("model basis must be resolved before building the cache")
        design = model.design
        basis = model.basis
        kind = model.link.kind
        if kind in ("slope", "value_slope") and not has_derivative(design):
            raise ValueError("slope link requires differentiable design")
        subjects = cohort.subjects if hasattr(cohort, "subjects") else list(cohort)
        self.n_subjects = len(subjects)
        self.kind = kind
        self.subjects = subjects

        obs_x, obs_z, obs_y, obs_subj = [], [], [], []
        q_nodes, q_weights, q_subj = [], [], []
        t_event = np.empty(self.n_subjects)
        t_entry = np.empty(self.n_subjects)
        delta = np.empty(self.n_subjects)
        for i, s in enumerate(subjects):
            obs_x.append(design.fixed(s.times, s))
            obs_z.append(design.random(s.times, s))
            obs_y.append(s.y)
            obs_subj.append(np.full(s.times.size, i))
            nodes, weights = quadrature.panel_points(s.t0, s.event_age)
            q_nodes.append(nodes)
            q_weights.append(weights)
            q_subj.append(np.full(nodes.size, i))
            t_event[i] = s.event_age
            t_entry[i] = s.t0
            delta[i] = s.event_indicator

        self.x_obs = np.concatenate(obs_x)
        self.z_obs = np.concatenate(obs_z)
        self.y_obs = np.concatenate(obs_y)
        self.subj_obs = np.concatenate(obs_subj)
        self.n_obs_i = np.bincount(self.subj_obs, minlength=self.n_subjects).astype(float)
        self.t_event = t_event
        self.t_entry = t_entry
        self.delta = delta

        nodes = np.concatenate(q_nodes)
        self.w_quad = np.concatenate(q_weights)
        self.subj_quad = np.concatenate(q_subj)
        self.basis_quad = basis_matrix(basis, nodes)
        self.basis_event = basis_matrix(basis, t_event)

        if kind in ("value", "value_slope"):
            self.x_quad = np.concatenate([
                design.fixed(q_nodes[i], s) for i, s in enumerate(subjects)])
            self.z_quad = np.concatenate([
                design.random(q_nodes[i], s) for i, s in enumerate(subjects)])
            self.x_event = np.concatenate([
                design.fixed(t_event[i], s) for i, s in enumerate(subjects)])
            self.z_event = np.concatenate([
                design.random(t_event[i], s) for i, s in enumerate(subjects)])
        if kind in ("slope", "value_slope"):
            self.dx_quad = np.concatenate([
                design.fixed_deriv(q_nodes[i], s) for i, s in enumerate(subjects)])
            self.dz_quad = np.concatenate([
                design.random_deriv(q_nodes[i], s) for i, s in enumerate(subjects)])
            self.dx_event = np.concatenate([
                design.fixed_deriv(t_event[i], s) for i, s in enumerate(subjects)])
            self.dz_event = np.concatenate([
                design.random_deriv(t_event[i], s) for i, s in enumerate(subjects)])
        if kind == "cumulative":
            ix_q, iz_q, ix_t, iz_t = [], [], [], []
            for i, s in enumerate(subjects):
                ix, iz = integrated_design(design, s, s.t0, q_nodes[i])
                ix_q.append(ix)
                iz_q.append(iz)
                ix1, iz1 = integrated_design(design, s, s.t0, t_event[i])
                ix_t.append(ix1)
                iz_t.append(iz1)
            self.ix_quad = np.concatenate(ix_q)
            self.iz_quad = np.concatenate(iz_q)
            self.ix_event = np.concatenate(ix_t)
            self.iz_event = np.concatenate(iz_t)

        if model.survival_covariates:
            from .hazard import subject_covariates
            self.x_cov = np.stack([
                subject_covariates(s, model.survival_covariates) for s in subjects])
        else:
            self.x_cov = np.zeros((self.n_subjects, 0))

        # Z'Z per subject, used to precondition the random-effects proposals
        q_dim = self.z_obs.shape[1]
        self.ztz = np.zeros((self.n_subjects, q_dim, q_dim))
        np.add.at(self.ztz, self.subj_obs,
                  self.z_obs[:, :, None] * self.z_obs[:, None, :])
        # cross-products feeding the collapsed Gaussian update of beta
        p_dim = self.x_obs.shape[1]
        self.xtx = self.x_obs.T @ self.x_obs
        self.xty = self.x_obs.T @ self.y_obs
        self.xz = np.zeros((self.n_subjects, p_dim, q_dim))
        np.add.at(self.xz, self.subj_obs,
                  self.x_obs[:, :, None] * self.z_obs[:, None, :])
        self.zty = np.zeros((self.n_subjects, q_dim))
        np.add.at(self.zty, self.subj_obs, self.z_obs * self.y_obs[:, None])

    # -- component computations ------------------------------------------------

    def traj(self, beta: np.ndarray, b_all: np.ndarray) -> dict:
        """Trajectory-dependent arrays at observation, quadrature, event times."""
        bq = b_all[self.subj_quad]
        bt = b_all
        out = {}
        m_obs = self.x_obs @ beta + np.einsum("ij,ij->i", self.z_obs,
                                              b_all[self.subj_obs])
        out["m_obs"] = m_obs
        out["sse"] = np.bincount(self.subj_obs, weights=(self.y_obs - m_obs) ** 2,
                                 minlength=self.n_subjects)
        if self.kind in ("value", "value_slope"):
            out["vq"] = self.x_quad @ beta + np.einsum("ij,ij->i", self.z_quad, bq)
            out["vt"] = self.x_event @ beta + np.einsum("ij,ij->i", self.z_event, bt)
        if self.kind in ("slope", "value_slope"):
            out["dq"] = self.dx_quad @ beta + np.einsum("ij,ij->i", self.dz_quad, bq)
            out["dt"] = self.dx_event @ beta + np.einsum("ij,ij->i", self.dz_event, bt)
        if self.kind == "cumulative":
            out["iq"] = self.ix_quad @ beta + np.einsum("ij,ij->i", self.iz_quad, bq)
            out["it"] = self.ix_event @ beta + np.einsum("ij,ij->i", self.iz_event, bt)
        return out

    def link(self, alpha: np.ndarray, tr: dict) -> tuple:
        if self.kind == "value":
            return alpha[0] * tr["vq"], alpha[0] * tr["vt"]
        if self.kind == "slope":
            return alpha[0] * tr["dq"], alpha[0] * tr["dt"]
        if self.kind == "value_slope":
            return (alpha[0] * tr["vq"] + alpha[1] * tr["dq"],
                    alpha[0] * tr["vt"] + alpha[1] * tr["dt"])
        return alpha[0] * tr["iq"], alpha[0] * tr["it"]

    def survival_terms(self, link_q, link_t, logh0_q, logh0_t, gxc) -> tuple:
        """(cumulative hazard, delta * log hazard at T) per subject."""
        with np.errstate(over="ignore"):
            haz = self.w_quad * np.exp(logh0_q + gxc[self.subj_quad] + link_q)
        cumhaz = np.bincount(self.subj_quad, weights=haz, minlength=self.n_subjects)
        event = self.delta * (logh0_t + gxc + link_t)
        return cumhaz, event

    def longitudinal(self, sse: np.ndarray, log_sigma: float) -> np.ndarray:
        sigma2 = math.exp(2.0 * log_sigma)
        return (-0.5 * self.n_obs_i * (LOG_2PI + 2.0 * log_sigma)
                - 0.5 * sse / sigma2)

    def re_logpdf(self, pv: ParameterVector, b_all: np.ndarray) -> np.ndarray:
        L = pv.chol()
        q = L.shape[0]
        u = solve_triangular(L, b_all.T, lower=True)
        return (-0.5 * q * LOG_2PI - float(np.sum(pv.chol_log_diag))
                - 0.5 * np.sum(u * u, axis=0))

    def components(self, pv: ParameterVector, b_all: np.ndarray) -> dict:
        """All per-subject likelihood components for one parameter state."""
        tr = self.traj(pv.beta, b_all)
        link_q, link_t = self.link(pv.alpha, tr)
        logh0_q = self.basis_quad @ pv.gamma_h0
        logh0_t = self.basis_event @ pv.gamma_h0
        gxc = self.x_cov @ pv.gamma if pv.gamma.size else np.zeros(self.n_subjects)
        cumhaz, event = self.survival_terms(link_q, link_t, logh0_q, logh0_t, gxc)
        longi = self.longitudinal(tr["sse"], pv.log_sigma)
        ll_i = longi + event - cumhaz
        return {"tr": tr, "link_q": link_q, "link_t": link_t,
                "logh0_q": logh0_q, "logh0_t": logh0_t, "gxc": gxc,
                "cumhaz": cumhaz, "event": event, "longi": longi, "ll_i": ll_i}

    def loglik(self, pv: ParameterVector, b_all: np.ndarray) -> float:
        ll_i = self.components(pv, b_all)["ll_i"]
        total = float(np.sum(ll_i))
        return total if np.isfinite(total) else -np.inf


# ---------------------------------------------------------------------------
# Public likelihood / posterior entry points


def _subjects_of(cohort):
    return cohort.subjects if hasattr(cohort, "subjects") else list(cohort)


def loglik_conditional(cohort, model: ModelSpec, pv: ParameterVector,
                       b_all) -> float:
    """Joint conditional log-likelihood given the random effects."""
    if len(_subjects_of(cohort)) == 0:
        return 0.0
    cache = LikelihoodCache(cohort, model)
    b_all = np.asarray(b_all, dtype=float)
    if b_all.shape[0] != cache.n_subjects:
        raise ValueError("b_all must hold one random-effect vector per subject")
    return cache.loglik(pv, b_all)


def log_posterior(cohort, model: ModelSpec, pv: ParameterVector, b_all,
                  priors: Priors | None = None, prior_power: float = 1.0) -> float:
    """Unnormalized log posterior on the unconstrained scale."""
    priors = priors or Priors()
    if len(_subjects_of(cohort)) == 0:
        return priors.log_prior(pv, power=prior_power)
    cache = LikelihoodCache(cohort, model)
    b_all = np.asarray(b_all, dtype=float)
    ll = cache.loglik(pv, b_all)
    re = float(np.sum(cache.re_logpdf(pv, b_all)))
    out = ll + re + priors.log_prior(pv, power=prior_power)
    return out if np.isfinite(out) else -np.inf


# ---------------------------------------------------------------------------
# Generic Metropolis-Hastings step


def mh_step(x, logp_x: float, log_target, rng, scale: float = 1.0, propose=None):
    """One symmetric-proposal MH step; returns (x, logp, accepted, acc_prob).

    The default proposal is an isotropic Gaussian random walk of the given
    scale; `propose(x, rng)` overrides it (must be symmetric).
    """
    if propose is not None:
        x_new = propose(x, rng)
    else:
        x_arr = np.asarray(x, dtype=float)
        x_new = x_arr + scale * rng.standard_normal(x_arr.shape)
    logp_new = log_target(x_new)
    delta = logp_new - logp_x
    acc_prob = 1.0 if delta >= 0 else (0.0 if not np.isfinite(delta)
                                       else math.exp(delta))
    if acc_prob >= 1.0 or rng.random() < acc_prob:
        return x_new, logp_new, True, min(1.0, acc_prob)
    return x, logp_x, False, min(1.0, acc_prob)


def random_walk_sample(log_target, x0, n_samples: int, rng, scale: float = 1.0,
                       burnin: int = 0):
    """Plain random-walk Metropolis chain returning the post-burnin draws."""
    x = np.asarray(x0, dtype=float)
    logp = log_target(x)
    out = np.empty((n_samples,) + x.shape)
    for i in range(burnin + n_samples):
        x, logp, _, _ = mh_step(x, logp, log_target, rng, scale=scale)
        if i >= burnin:
            out[i - burnin] = x
    return out


# ---------------------------------------------------------------------------
# Adaptive block helpers


class _AdaptiveBlock:
    """Random-walk proposal for one parameter block with covariance adaptation."""

    def __init__(self, dim: int, init_cov=None, target: float = 0.234,
                 adapt_cov_start: int = 200):
        self.dim = dim
        self.target = target
        self.adapt_cov_start = adapt_cov_start
        self.log_s = math.log(2.38 / math.sqrt(dim))
        cov = np.eye(dim) * 0.01 if init_cov is None else np.asarray(init_cov, float)
        self.chol = np.linalg.cholesky(cov + 1e-12 * np.eye(dim))
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))
        self._count = 0

    def propose(self, x: np.ndarray, rng) -> np.ndarray:
        step = self.chol @ rng.standard_normal(self.dim)
        return x + math.exp(self.log_s) * step

    def adapt(self, x: np.ndarray, acc_prob: float):
        self._count += 1
        t = self._count
        self.log_s += min(0.5, 2.0 * t ** -0.6) * (acc_prob - self.target)
        diff = x - self._mean
        self._mean += diff / t
        self._m2 += np.outer(diff, x - self._mean)
        if t >= self.adapt_cov_start and t % 50 == 0:
            cov = self._m2 / (t - 1)
            try:
                self.chol = np.linalg.cholesky(cov + 1e-10 * np.eye(self.dim))
            except np.linalg.LinAlgError:
                pass


# ---------------------------------------------------------------------------
# The joint sampler


@dataclass
class ChainResult:
    draws: np.ndarray          # (n_retained, n_coef)
    deviance: np.ndarray       # (n_retained,)
    b_mean: np.ndarray         # (n_subjects, q)
    b_last: np.ndarray
    accept_rates: dict


class JointSampler:
    """Metropolis-within-Gibbs over (theta, all random effects)."""

    def __init__(self, cohort, model: ModelSpec, priors: Priors | None = None,
                 prior_power: float = 1.0):
        self.model = model
        self.priors = priors or Priors()
        self.prior_power = prior_power
        self.cache = LikelihoodCache(cohort, model)
        self.dims = model.dims
        # per-subject maps X(t) delta = Z(t) (A_i delta), enabling a joint
        # translation of beta and the random effects that leaves every
        # trajectory (and hence the whole likelihood) unchanged
        self.trans_maps = None
        subjects = _subjects_of(cohort)
        if subjects and hasattr(model.design, "translation_map"):
            self.trans_maps = np.stack(
                [model.design.translation_map(s) for s in subjects])

    # -- initial values -------------------------------------------------------

    def initial_values(self, rng=None, jitter: float = 0.0) -> tuple:
        cache = self.cache
        dims = self.dims
        beta0, *_ = np.linalg.lstsq(cache.x_obs, cache.y_obs, rcond=None)
        resid = cache.y_obs - cache.x_obs @ beta0
        sigma0 = max(1e-3, float(np.std(resid)))
        # crude per-subject random-effect estimates for the covariance start
        b_hat = np.zeros((cache.n_subjects, dims.q))
        for i in range(cache.n_subjects):
            rows = cache.subj_obs == i
            z = cache.z_obs[rows]
            r = resid[rows]
            sol, *_ = np.linalg.lstsq(z.T @ z + 1e-6 * np.eye(dims.q),
                                      z.T @ r, rcond=None)
            b_hat[i] = sol
        cov0 = np.cov(b_hat.T) if cache.n_subjects > dims.q else np.eye(dims.q)
        cov0 = np.atleast_2d(cov0) + 1e-3 * np.eye(dims.q)
        L0 = np.linalg.cholesky(cov0)
        person_time = float(np.sum(cache.t_event - cache.t_entry))
        rate = max(float(np.sum(cache.delta)), 0.5) / person_time
        pv = ParameterVector(
            beta=beta0,
            chol_log_diag=np.log(np.diag(L0)),
            chol_lower=L0[np.tril_indices(dims.q, -1)],
            log_sigma=math.log(sigma0),
            gamma=np.zeros(dims.n_gamma),
            alpha=np.zeros(dims.n_alpha),
            gamma_h0=np.full(dims.n_spline, math.log(rate)),
        )
        if jitter > 0 and rng is not None:
            flat = pv.flatten()
            flat = flat + jitter * rng.standard_normal(flat.size)
            pv = ParameterVector.from_flat(flat, dims)
        b0 = np.zeros((cache.n_subjects, dims.q))
        return pv, b0, sigma0, beta0

    # -- chain ----------------------------------------------------------------

    def run_chain(self, seed, config: MCMCConfig, jitter: float = 0.1) -> ChainResult:
        rng = np.random.default_rng(seed)
        cache = self.cache
        dims = self.dims
        priors = self.priors
        pv, b_all, sigma0, beta0 = self.initial_values(rng, jitter=jitter)

        comp = cache.components(pv, b_all)
        re = cache.re_logpdf(pv, b_all)
        prior = priors.log_prior(pv, power=self.prior_power)
        ll_total = float(np.sum(comp["ll_i"]))

        # block definitions over the flattened vector
        xtx = cache.x_obs.T @ cache.x_obs
        beta_cov = sigma0 ** 2 * np.linalg.inv(xtx + 1e-9 * np.eye(dims.p))
        blocks = {
            "beta": _AdaptiveBlock(dims.p, init_cov=beta_cov,
                                   target=config.target_acceptance,
                                   adapt_cov_start=config.adapt_cov_start),
            "sigma": _AdaptiveBlock(1, init_cov=np.eye(1) * 1e-4,
                                    target=config.target_acceptance,
                                    adapt_cov_start=config.adapt_cov_start),
            "chol": _AdaptiveBlock(dims.n_chol, init_cov=np.eye(dims.n_chol) * 0.01,
                                   target=config.target_acceptance,
                                   adapt_cov_start=config.adapt_cov_start),
            "link": _AdaptiveBlock(dims.n_alpha + dims.n_gamma,
                                   init_cov=np.eye(dims.n_alpha + dims.n_gamma) * 0.01,
                                   target=config.target_acceptance,
                                   adapt_cov_start=config.adapt_cov_start),
            "spline": _AdaptiveBlock(dims.n_spline,
                                     init_cov=np.eye(dims.n_spline) * 0.04,
                                     target=config.target_acceptance,
                                     adapt_cov_start=config.adapt_cov_start),
        }
        if self.trans_maps is not None:
            blocks["shift"] = _AdaptiveBlock(
                dims.p, init_cov=beta_cov, target=config.target_acceptance,
                adapt_cov_start=config.adapt_cov_start)
        n_hazard = dims.n_alpha + dims.n_gamma + dims.n_spline
        blocks["hazard"] = _AdaptiveBlock(
            n_hazard, init_cov=np.eye(n_hazard) * 0.01,
            target=config.target_acceptance,
            adapt_cov_start=config.adapt_cov_start)
        log_s_b = np.full(cache.n_subjects, math.log(2.38 / math.sqrt(dims.q)))
        accept_counts = {name: 0 for name in blocks}
        accept_counts["b"] = 0.0
        accept_counts["joint"] = 0

        n_retained = config.n_iter - config.n_warmup
        draws = np.empty((n_retained, dims.total))
        deviance = np.empty(n_retained)
        b_mean = np.zeros_like(b_all)

        def total_of(comp_new, re_new, prior_new):
            t = float(np.sum(comp_new["ll_i"])) + float(np.sum(re_new)) + prior_new
            return t if np.isfinite(t) else -np.inf

        cur_total = total_of(comp, re, prior)

        for it in range(config.n_iter):
            warm = it < config.n_warmup

            # ---- beta block
            blk = blocks["beta"]
            beta_new = blk.propose(pv.beta, rng)
            pv_new = ParameterVector(beta=beta_new, chol_log_diag=pv.chol_log_diag,
                                     chol_lower=pv.chol_lower, log_sigma=pv.log_sigma,
                                     gamma=pv.gamma, alpha=pv.alpha,
                                     gamma_h0=pv.gamma_h0)
            comp_new = cache.components(pv_new, b_all)
            prior_new = priors.log_prior(pv_new, power=self.prior_power)
            new_total = total_of(comp_new, re, prior_new)
            acc_prob = math.exp(min(0.0, new_total - cur_total)) \
                if np.isfinite(new_total) else 0.0
            if rng.random() < acc_prob:
                pv, comp, prior, cur_total = pv_new, comp_new, prior_new, new_total
                accept_counts["beta"] += 1
            if warm:
                blk.adapt(pv.beta, acc_prob)

            # ---- residual sd block (longitudinal term only changes)
            blk = blocks["sigma"]
            ls_new = float(blk.propose(np.array([pv.log_sigma]), rng)[0])
            longi_new = cache.longitudinal(comp["tr"]["sse"], ls_new)
            pv_new = ParameterVector(beta=pv.beta, chol_log_diag=pv.chol_log_diag,
                                     chol_lower=pv.chol_lower, log_sigma=ls_new,
                                     gamma=pv.gamma, alpha=pv.alpha,
                                     gamma_h0=pv.gamma_h0)
            prior_new = priors.log_prior(pv_new, power=self.prior_power)
            delta_ll = float(np.sum(longi_new - comp["longi"]))
            delta = delta_ll + prior_new - prior
            acc_prob = math.exp(min(0.0, delta)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                comp["ll_i"] = comp["ll_i"] + (longi_new - comp["longi"])
                comp["longi"] = longi_new
                pv, prior = pv_new, prior_new
                cur_total += delta
                accept_counts["sigma"] += 1
            if warm:
                blk.adapt(np.array([pv.log_sigma]), acc_prob)

            # ---- random-effects covariance block (prior + RE density only)
            blk = blocks["chol"]
            chol_cur = np.concatenate([pv.chol_log_diag, pv.chol_lower])
            chol_new = blk.propose(chol_cur, rng)
            pv_new = ParameterVector(beta=pv.beta,
                                     chol_log_diag=chol_new[:dims.q],
                                     chol_lower=chol_new[dims.q:],
                                     log_sigma=pv.log_sigma, gamma=pv.gamma,
                                     alpha=pv.alpha, gamma_h0=pv.gamma_h0)
            re_new = cache.re_logpdf(pv_new, b_all)
            prior_new = priors.log_prior(pv_new, power=self.prior_power)
            delta = float(np.sum(re_new - re)) + prior_new - prior
            acc_prob = math.exp(min(0.0, delta)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                pv, re, prior = pv_new, re_new, prior_new
                cur_total += delta
                accept_counts["chol"] += 1
            if warm:
                blk.adapt(np.concatenate([pv.chol_log_diag, pv.chol_lower]), acc_prob)

            # ---- link (+ survival covariate) block
            blk = blocks["link"]
            cur_vec = np.concatenate([pv.alpha, pv.gamma])
            vec_new = blk.propose(cur_vec, rng)
            alpha_new = vec_new[:dims.n_alpha]
            gamma_new = vec_new[dims.n_alpha:]
            link_q, link_t = cache.link(alpha_new, comp["tr"])
            gxc = cache.x_cov @ gamma_new if gamma_new.size else comp["gxc"]
            cumhaz_new, event_new = cache.survival_terms(
                link_q, link_t, comp["logh0_q"], comp["logh0_t"], gxc)
            pv_new = ParameterVector(beta=pv.beta, chol_log_diag=pv.chol_log_diag,
                                     chol_lower=pv.chol_lower, log_sigma=pv.log_sigma,
                                     gamma=gamma_new, alpha=alpha_new,
                                     gamma_h0=pv.gamma_h0)
            prior_new = priors.log_prior(pv_new, power=self.prior_power)
            delta_ll = float(np.sum(event_new - comp["event"])
                             - np.sum(cumhaz_new - comp["cumhaz"]))
            delta = delta_ll + prior_new - prior
            acc_prob = math.exp(min(0.0, delta)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                comp["ll_i"] = comp["ll_i"] + (event_new - comp["event"]) \
                    - (cumhaz_new - comp["cumhaz"])
                comp.update(link_q=link_q, link_t=link_t, gxc=gxc,
                            cumhaz=cumhaz_new, event=event_new)
                pv, prior = pv_new, prior_new
                cur_total += delta
                accept_counts["link"] += 1
            if warm:
                blk.adapt(np.concatenate([pv.alpha, pv.gamma]), acc_prob)

            # ---- baseline spline block
            blk = blocks["spline"]
            gh_new = blk.propose(pv.gamma_h0, rng)
            logh0_q = cache.basis_quad @ gh_new
            logh0_t = cache.basis_event @ gh_new
            cumhaz_new, event_new = cache.survival_terms(
                comp["link_q"], comp["link_t"], logh0_q, logh0_t, comp["gxc"])
            pv_new = ParameterVector(beta=pv.beta, chol_log_diag=pv.chol_log_diag,
                                     chol_lower=pv.chol_lower, log_sigma=pv.log_sigma,
                                     gamma=pv.gamma, alpha=pv.alpha, gamma_h0=gh_new)
            prior_new = priors.log_prior(pv_new, power=self.prior_power)
            delta_ll = float(np.sum(event_new - comp["event"])
                             - np.sum(cumhaz_new - comp["cumhaz"]))
            delta = delta_ll + prior_new - prior
            acc_prob = math.exp(min(0.0, delta)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                comp["ll_i"] = comp["ll_i"] + (event_new - comp["event"]) \
                    - (cumhaz_new - comp["cumhaz"])
                comp.update(logh0_q=logh0_q, logh0_t=logh0_t,
                            cumhaz=cumhaz_new, event=event_new)
                pv, prior = pv_new, prior_new
                cur_total += delta
                accept_counts["spline"] += 1
            if warm:
                blk.adapt(pv.gamma_h0, acc_prob)

            # ---- joint hazard block: link, survival covariates, and spline
            # together, so the adapted covariance can track their shared ridge
            blk = blocks["hazard"]
            cur_vec = np.concatenate([pv.alpha, pv.gamma, pv.gamma_h0])
            vec_new = blk.propose(cur_vec, rng)
            alpha_new = vec_new[:dims.n_alpha]
            gamma_new = vec_new[dims.n_alpha:dims.n_alpha + dims.n_gamma]
            gh_new = vec_new[dims.n_alpha + dims.n_gamma:]
            link_q, link_t = cache.link(alpha_new, comp["tr"])
            gxc = cache.x_cov @ gamma_new if gamma_new.size else comp["gxc"]
            logh0_q = cache.basis_quad @ gh_new
            logh0_t = cache.basis_event @ gh_new
            cumhaz_new, event_new = cache.survival_terms(
                link_q, link_t, logh0_q, logh0_t, gxc)
            pv_new = ParameterVector(beta=pv.beta,
                                     chol_log_diag=pv.chol_log_diag,
                                     chol_lower=pv.chol_lower,
                                     log_sigma=pv.log_sigma, gamma=gamma_new,
                                     alpha=alpha_new, gamma_h0=gh_new)
            prior_new = priors.log_prior(pv_new, power=self.prior_power)
            delta_ll = float(np.sum(event_new - comp["event"])
                             - np.sum(cumhaz_new - comp["cumhaz"]))
            delta = delta_ll + prior_new - prior
            acc_prob = math.exp(min(0.0, delta)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                comp["ll_i"] = comp["ll_i"] + (event_new - comp["event"]) \
                    - (cumhaz_new - comp["cumhaz"])
                comp.update(link_q=link_q, link_t=link_t, gxc=gxc,
                            logh0_q=logh0_q, logh0_t=logh0_t,
                            cumhaz=cumhaz_new, event=event_new)
                pv, prior = pv_new, prior_new
                cur_total += delta
                accept_counts["hazard"] += 1
            if warm:
                blk.adapt(np.concatenate([pv.alpha, pv.gamma, pv.gamma_h0]),
                          acc_prob)

            # ---- all random effects, one vectorized pass; alternate between
            # a preconditioned random walk and an independence proposal from
            # the exact Gaussian conditional given the longitudinal data
            L = pv.chol()
            b_cov_inv = np.linalg.inv(L @ L.T)
            sigma2 = math.exp(2.0 * pv.log_sigma)
            prec = cache.ztz / sigma2 + b_cov_inv[None, :, :]
            prop_cov = np.linalg.inv(prec)
            prop_chol = np.linalg.cholesky(prop_cov)
            noise = rng.standard_normal(b_all.shape)
            independence = it % 2 == 1
            if independence:
                resid = cache.y_obs - cache.x_obs @ pv.beta
                ztr = np.zeros_like(b_all)
                np.add.at(ztr, cache.subj_obs, cache.z_obs * resid[:, None])
                prop_mean = np.einsum("nij,nj->ni", prop_cov, ztr) / sigma2
                b_new = prop_mean + np.einsum("nij,nj->ni", prop_chol, noise)

                def _quad(diff):
                    return 0.5 * np.einsum("ni,nij,nj->n", diff, prec, diff)

                # independence correction: -(log q(new) - log q(old))
                logq_corr = _quad(b_new - prop_mean) - _quad(b_all - prop_mean)
            else:
                step = np.einsum("nij,nj->ni", prop_chol, noise)
                b_new = b_all + np.exp(log_s_b)[:, None] * step
                logq_corr = 0.0
            comp_new = cache.components(pv, b_new)
            re_new = cache.re_logpdf(pv, b_new)
            delta_i = (comp_new["ll_i"] - comp["ll_i"]) + (re_new - re) \
                + logq_corr
            delta_i = np.where(np.isfinite(delta_i), delta_i, -np.inf)
            acc_prob_i = np.exp(np.minimum(0.0, delta_i))
            accept = rng.random(cache.n_subjects) < acc_prob_i
            if np.any(accept):
                b_all = np.where(accept[:, None], b_new, b_all)
                mask_o = accept[cache.subj_obs]
                mask_q = accept[cache.subj_quad]
                for key in comp["tr"]:
                    mask = (mask_o if key == "m_obs"
                            else accept if key in ("sse", "vt", "dt", "it")
                            else mask_q)
                    comp["tr"][key] = np.where(mask, comp_new["tr"][key],
                                               comp["tr"][key])
                for key in ("link_q",):
                    comp[key] = np.where(mask_q, comp_new[key], comp[key])
                for key in ("link_t", "cumhaz", "event", "longi", "ll_i"):
                    comp[key] = np.where(accept, comp_new[key], comp[key])
                re = np.where(accept, re_new, re)
                cur_total = total_of(comp, re, prior)
            accept_counts["b"] += float(np.mean(accept))
            if warm and not independence:
                t = it + 1
                log_s_b += min(0.5, 2.0 * t ** -0.6) * \
                    (acc_prob_i - config.target_acceptance)

            # ---- joint translation of beta and the random effects: moves
            # along the hierarchical ridge without touching the likelihood
            if self.trans_maps is not None:
                blk = blocks["shift"]
                delta_beta = blk.propose(np.zeros(dims.p), rng)
                pv_new = ParameterVector(
                    beta=pv.beta + delta_beta,
                    chol_log_diag=pv.chol_log_diag, chol_lower=pv.chol_lower,
                    log_sigma=pv.log_sigma, gamma=pv.gamma, alpha=pv.alpha,
                    gamma_h0=pv.gamma_h0)
                b_new = b_all - self.trans_maps @ delta_beta
                re_new = cache.re_logpdf(pv_new, b_new)
                prior_new = priors.log_prior(pv_new, power=self.prior_power)
                delta = float(np.sum(re_new - re)) + prior_new - prior
                acc_prob = math.exp(min(0.0, delta)) if np.isfinite(delta) \
                    else 0.0
                if rng.random() < acc_prob:
                    pv, b_all, re, prior = pv_new, b_new, re_new, prior_new
                    cur_total += delta
                    accept_counts["shift"] += 1
                if warm:
                    # feed beta itself so the proposal covariance tracks the
                    # marginal spread of beta, ridge directions included
                    blk.adapt(pv.beta, acc_prob)

            # ---- collapsed refresh of (beta, all random effects): beta from
            # its longitudinal-marginal Gaussian posterior (random effects
            # integrated out), b from its exact conditional given beta. All
            # Gaussian factors cancel in the Metropolis ratio, leaving only
            # the survival factor.
            xzc = np.einsum("npq,nqr->npr", cache.xz, prop_cov)
            p_mat = cache.xtx / sigma2 \
                - np.einsum("npr,nsr->ps", xzc, cache.xz) / sigma2 ** 2 \
                + (self.prior_power / priors.sd_beta ** 2) * np.eye(dims.p)
            rhs = cache.xty / sigma2 \
                - np.einsum("npr,nr->p", xzc, cache.zty) / sigma2 ** 2
            p_chol = np.linalg.cholesky(p_mat)
            beta_star = np.linalg.solve(p_mat, rhs) + np.linalg.solve(
                p_chol.T, rng.standard_normal(dims.p))
            resid_star = cache.y_obs - cache.x_obs @ beta_star
            ztr_star = np.zeros_like(b_all)
            np.add.at(ztr_star, cache.subj_obs,
                      cache.z_obs * resid_star[:, None])
            mean_star = np.einsum("nij,nj->ni", prop_cov, ztr_star) / sigma2
            b_star = mean_star + np.einsum(
                "nij,nj->ni", prop_chol, rng.standard_normal(b_all.shape))
            pv_star = ParameterVector(
                beta=beta_star, chol_log_diag=pv.chol_log_diag,
                chol_lower=pv.chol_lower, log_sigma=pv.log_sigma,
                gamma=pv.gamma, alpha=pv.alpha, gamma_h0=pv.gamma_h0)
            comp_star = cache.components(pv_star, b_star)
            delta = float(np.sum(comp_star["event"] - comp["event"])
                          - np.sum(comp_star["cumhaz"] - comp["cumhaz"]))
            acc_prob = math.exp(min(0.0, delta)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                pv, b_all, comp = pv_star, b_star, comp_star
                re = cache.re_logpdf(pv, b_all)
                prior = priors.log_prior(pv, power=self.prior_power)
                cur_total = total_of(comp, re, prior)
                accept_counts["joint"] += 1

            # ---- conjugate Gibbs refresh of the random-effects covariance:
            # the (possibly tempered) inverse-Wishart prior stays inverse-
            # Wishart given the sampled effects, so this draw is exact
            w = self.prior_power
            nu0 = priors.iw_df if priors.iw_df is not None else dims.q + 2
            psi0 = priors.iw_scale if priors.iw_scale is not None \
                else np.eye(dims.q)
            nu_post = w * (nu0 + dims.q + 1) - dims.q - 1 + cache.n_subjects
            psi_post = w * psi0 + b_all.T @ b_all
            b_cov_draw = np.atleast_2d(invwishart.rvs(
                df=nu_post, scale=psi_post, random_state=rng))
            L_draw = np.linalg.cholesky(b_cov_draw)
            pv = ParameterVector(
                beta=pv.beta, chol_log_diag=np.log(np.diag(L_draw)),
                chol_lower=L_draw[np.tril_indices(dims.q, -1)],
                log_sigma=pv.log_sigma, gamma=pv.gamma, alpha=pv.alpha,
                gamma_h0=pv.gamma_h0)
            re = cache.re_logpdf(pv, b_all)
            prior = priors.log_prior(pv, power=self.prior_power)
            cur_total = total_of(comp, re, prior)

            if not warm:
                k = it - config.n_warmup
                draws[k] = pv.flatten()
                ll = float(np.sum(comp["ll_i"]))
                deviance[k] = -2.0 * ll
                b_mean += (b_all - b_mean) / (k + 1)

        rates = {name: accept_counts[name] / config.n_iter for name in accept_counts}
        return ChainResult(draws=draws, deviance=deviance, b_mean=b_mean,
                           b_last=b_all, accept_rates=rates)


# ---------------------------------------------------------------------------
# Diagnostics


def compute_rhat(chains) -> float:
    """Split-Gelman-Rubin diagnostic for one scalar quantity.

    `chains` is a sequence of equal-length draw sequences, one per chain;
    each is split in half before computing the between/within variances.
    """
    chains = [np.asarray(c, dtype=float) for c in chains]
    if len(chains) < 2:
        raise ValueError("rhat requires at least two chains")
    n = min(c.size for c in chains)
    if n < 4:
        raise ValueError("chains too short for split-rhat")
    halves = []
    for c in chains:
        c = c[:n]
        halves.append(c[: n // 2])
        halves.append(c[n // 2: 2 * (n // 2)])
    arr = np.stack(halves)
    m, n_half = arr.shape
    within = float(np.mean(np.var(arr, axis=1, ddof=1)))
    means = np.mean(arr, axis=1)
    b_over_n = float(np.var(means, ddof=1))
    if within == 0.0:
        warnings.warn("zero within-chain variance; rhat undefined")
        return math.inf
    var_plus = (n_half - 1) / n_half * within + b_over_n
    return math.sqrt(var_plus / within)


def dic_from_deviances(deviances, deviance_at_mean: float) -> tuple:
    """(DIC, p_D) from sampled deviances and the deviance at the posterior mean."""
    d_bar = float(np.mean(deviances))
    p_d = d_bar - deviance_at_mean
    return d_bar + p_d, p_d


def compute_dic(cohort, model: ModelSpec, theta_draws, b_draws) -> float:
    """Conditional DIC from explicit draws of theta and the random effects."""
    theta_draws = np.asarray(theta_draws, dtype=float)
    b_draws = np.asarray(b_draws, dtype=float)
    cache = LikelihoodCache(cohort, model)
    dims = model.dims
    deviances = np.array([
        -2.0 * cache.loglik(ParameterVector.from_flat(theta_draws[r], dims),
                            b_draws[r])
        for r in range(theta_draws.shape[0])
    ])
    pv_hat = ParameterVector.from_flat(theta_draws.mean(axis=0), dims)
    d_hat = -2.0 * cache.loglik(pv_hat, b_draws.mean(axis=0))
    dic, _ = dic_from_deviances(deviances, d_hat)
    return dic


# ---------------------------------------------------------------------------
# Fit driver and results


@dataclass
class FitResult:
    names: list
    draws: np.ndarray            # (n_chains, n_retained, n_coef)
    rhat: np.ndarray             # (n_coef,)
    dic: float
    p_d: float
    model: ModelSpec
    n_subjects: int
    n_events: int
    accept_rates: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def pooled(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def summaries(self) -> dict:
        pooled = self.pooled()
        out = {}
        for k, name in enumerate(self.names):
            col = pooled[:, k]
            out[name] = {
                "mean": float(np.mean(col)),
                "q2.5": float(np.percentile(col, 2.5)),
                "q97.5": float(np.percentile(col, 97.5)),
                "rhat": float(self.rhat[k]),
            }
        # derived residual-sd summary on the natural scale
        k = self.names.index("log_sigma_eps")
        sig = np.exp(pooled[:, k])
        out["sigma_eps"] = {
            "mean": float(np.mean(sig)),
            "q2.5": float(np.percentile(sig, 2.5)),
            "q97.5": float(np.percentile(sig, 97.5)),
            "rhat": float(self.rhat[k]),
        }
        return out

    def max_rhat(self) -> float:
        return float(np.max(self.rhat))

    def to_json_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "names": self.names,
            "n_subjects": self.n_subjects,
            "n_events": self.n_events,
            "dic": self.dic,
            "p_d": self.p_d,
            "rhat": [float(r) for r in self.rhat],
            "summaries": self.summaries(),
            "accept_rates": self.accept_rates,
            "provenance": self.provenance,
        }

    def save(self, json_path, draws_path=None) -> None:
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if draws_path is not None:
            write_draws_csv(self, draws_path)

    @classmethod
    def load(cls, json_path, draws_path=None) -> "FitResult":
        with open(json_path, encoding="utf-8") as fh:
            d = json.load(fh)
        model = ModelSpec.from_dict(d["model"])
        names = d["names"]
        if draws_path is not None:
            draws = read_draws_csv(draws_path, len(names))
        else:
            draws = np.zeros((0, 0, len(names)))
        return cls(names=names, draws=draws, rhat=np.asarray(d["rhat"], dtype=float),
                   dic=d["dic"], p_d=d["p_d"], model=model,
                   n_subjects=d["n_subjects"], n_events=d["n_events"],
                   accept_rates=d.get("accept_rates", []),
                   provenance=d.get("provenance", {}))


def write_draws_csv(result: FitResult, path) -> None:
    """Columnar draws: chain id column plus one column per coefficient."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain"] + list(result.names))
        for c in range(result.draws.shape[0]):
            for row in result.draws[c]:
                writer.writerow([c] + [repr(float(v)) for v in row])


def read_draws_csv(path, n_coef: int) -> np.ndarray:
    chains: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if len(header) != n_coef + 1:
            raise DataError(f"{path}: draw file has {len(header) - 1} coefficient "
                            f"columns, expected {n_coef}")
        for row in reader:
            chains.setdefault(int(row[0]), []).append(
                [float(v) for v in row[1:]])
    keys = sorted(chains)
    return np.stack([np.asarray(chains[k]) for k in keys])


def resolve_basis(cohort, model: ModelSpec) -> ModelSpec:
    """Fill in the baseline basis from observed event ages if unset."""
    if model.basis is not None:
        return model
    event_ages = np.array([s.event_age for s in cohort.subjects
                           if s.event_indicator == 1])
    if event_ages.size == 0:
        raise DataError("cannot place baseline knots: cohort has no events")
    boundary = (min(s.t0 for s in cohort.subjects),
                max(s.event_age for s in cohort.subjects))
    basis = default_knots(event_ages, model.q_basis, degree=model.spline_degree,
                          boundary=boundary)
    return model.with_basis(basis)


def fit(cohort: Cohort, model: ModelSpec, priors: Priors | None = None,
        config: MCMCConfig | None = None, prior_power: float = 1.0) -> FitResult:
    """Run independent chains, pool post-warmup draws, compute rhat and DIC."""
    config = config or MCMCConfig()
    if config.n_chains < 2:
        raise ValueError("at least two chains are required for rhat")
    if len(cohort.subjects) == 0:
        raise DataError("cannot fit an empty cohort")
    if cohort.n_events == 0:
        raise DataError("cannot place baseline knots: cohort has no events")
    model = resolve_basis(cohort, model)
    sampler = JointSampler(cohort, model, priors=priors, prior_power=prior_power)

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    n_jobs = config.n_threads or config.n_chains
    n_jobs = max(1, min(n_jobs, config.n_chains))
    results = Parallel(n_jobs=n_jobs)(
        delayed(sampler.run_chain)(seed, config) for seed in seeds)

    draws = np.stack([r.draws for r in results])
    names = coefficient_names(model)
    rhat = np.array([
        compute_rhat([draws[c, :, k] for c in range(config.n_chains)])
        for k in range(draws.shape[-1])
    ])
    deviances = np.concatenate([r.deviance for r in results])
    theta_hat = ParameterVector.from_flat(draws.reshape(-1, draws.shape[-1])
                                          .mean(axis=0), model.dims)
    b_hat = np.mean(np.stack([r.b_mean for r in results]), axis=0)
    d_hat = -2.0 * sampler.cache.loglik(theta_hat, b_hat)
    dic, p_d = dic_from_deviances(deviances, d_hat)

    return FitResult(
        names=names, draws=draws, rhat=rhat, dic=dic, p_d=p_d, model=model,
        n_subjects=len(cohort.subjects), n_events=cohort.n_events,
        accept_rates=[r.accept_rates for r in results],
    )
