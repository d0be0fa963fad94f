"""IPCW predictive accuracy: censoring Kaplan-Meier, dynamic AUC, Brier score.

The censoring survival function treats censorings as the "event" of the
product-limit estimator (events become censored observations), the standard
inverse-probability-of-censoring construction.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class KaplanMeier:
    """Right-continuous product-limit step function."""

    jump_times: np.ndarray
    surv: np.ndarray

    def at(self, u) -> np.ndarray | float:
        """S(u): value of the step function at u (right-continuous)."""
        idx = np.searchsorted(self.jump_times, u, side="right") - 1
        vals = np.concatenate([[1.0], self.surv])[np.asarray(idx) + 1]
        return float(vals) if np.ndim(u) == 0 else vals

    def conditional(self, u, s: float):
        """S(u | alive at s) = S(u) / S(s) for u > s."""
        g_s = self.at(s)
        if g_s <= 0:
            raise DataError("censoring support exhausted at the landmark")
        return self.at(u) / g_s


def kaplan_meier(times, event_flags) -> KaplanMeier:
    """Product-limit estimator of P(time > u) for the flagged event."""
    times = np.asarray(times, dtype=float)
    flags = np.asarray(event_flags, dtype=int)
    if times.size == 0:
        raise DataError("empty input to the Kaplan-Meier estimator")
    if np.any(times < 0):
        raise DataError("negative times")
    order = np.argsort(times, kind="stable")
    times = times[order]
    flags = flags[order]
    uniq = np.unique(times[flags == 1])
    surv = []
    current = 1.0
    for t in uniq:
        at_risk = int(np.sum(times >= t))
        d = int(np.sum((times == t) & (flags == 1)))
        current *= 1.0 - d / at_risk
        surv.append(current)
    return KaplanMeier(jump_times=uniq, surv=np.asarray(surv))


@dataclass
class RiskScoreSet:
    """Predicted window risks and observed outcomes for subjects at risk at s."""

    subject_ids: list
    pi: np.ndarray
    event_time: np.ndarray
    event_indicator: np.ndarray
    s: float
    w: float

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.event_time = np.asarray(self.event_time, dtype=float)
        self.event_indicator = np.asarray(self.event_indicator, dtype=int)
        if not (len(self.subject_ids) == self.pi.size == self.event_time.size
                == self.event_indicator.size):
            raise DataError("score set arrays must align")
        if np.any(self.event_time <= self.s):
            raise DataError("score set must contain only subjects at risk at s")

    @property
    def d_tilde(self) -> np.ndarray:
        """Observed in-window outcome indicator (1 if event within (s, s+w))."""
        in_window = (self.event_time > self.s) & (self.event_time < self.s + self.w)
        return (in_window & (self.event_indicator == 1)).astype(float)


def ipcw_weights(score_set: RiskScoreSet, censoring_km: KaplanMeier) -> np.ndarray:
    """Per-subject censoring weights; censored-in-window subjects get zero."""
    s, w = score_set.s, score_set.w
    t = score_set.event_time
    delta = score_set.event_indicator
    weights = np.zeros(t.size)
    past = t > s + w
    if np.any(past):
        g = censoring_km.conditional(s + w, s)
        if g <= 0:
            raise DataError("censoring support exhausted at s + w")
        weights[past] = 1.0 / g
    in_window = (t > s) & (t < s + w) & (delta == 1)
    if np.any(in_window):
        g = censoring_km.conditional(t[in_window], s)
        if np.any(g <= 0):
            raise DataError("censoring support exhausted before an event time")
        weights[in_window] = 1.0 / g
    # events exactly at s + w count as in-window outcomes
    at_horizon = (t == s + w) & (delta == 1)
    if np.any(at_horizon):
        g = censoring_km.conditional(t[at_horizon], s)
        if np.any(g <= 0):
            raise DataError("censoring support exhausted at the horizon")
        weights[at_horizon] = 1.0 / g
    return weights


def _outcome_with_horizon(score_set: RiskScoreSet) -> np.ndarray:
    d = score_set.d_tilde.copy()
    at_horizon = (score_set.event_time == score_set.s + score_set.w) \
        & (score_set.event_indicator == 1)
    d[at_horizon] = 1.0
    return d


def dynamic_auc(score_set: RiskScoreSet, weights: np.ndarray) -> float:
    """IPCW pairwise concordance of window risks; ties count one half.

    Returns nan (with a warning) when there is no weighted case or control.
    """
    d = _outcome_with_horizon(score_set)
    w = np.asarray(weights, dtype=float)
    case = (d == 1) & (w > 0)
    ctrl = (d == 0) & (w > 0)
    if not np.any(case) or not np.any(ctrl):
        warnings.warn("AUC undefined: no weighted cases or no weighted controls")
        return math.nan
    pi_case = score_set.pi[case]
    pi_ctrl = score_set.pi[ctrl]
    w_case = w[case]
    w_ctrl = w[ctrl]
    greater = (pi_case[:, None] > pi_ctrl[None, :]).astype(float)
    ties = (pi_case[:, None] == pi_ctrl[None, :])
    greater[ties] = 0.5
    pair_w = w_case[:, None] * w_ctrl[None, :]
    return float(np.sum(greater * pair_w) / np.sum(pair_w))


def brier_score(score_set: RiskScoreSet, weights: np.ndarray) -> float:
    """IPCW mean squared error between window risks and observed outcomes."""
    n_at_risk = score_set.event_time.size
    if n_at_risk == 0:
        raise DataError("no subjects at risk")
    d = _outcome_with_horizon(score_set)
    w = np.asarray(weights, dtype=float)
    return float(np.sum(w * (d - score_set.pi) ** 2) / n_at_risk)


def censoring_km_for(score_set: RiskScoreSet) -> KaplanMeier:
    """Censoring-distribution KM built from the score set itself."""
    return kaplan_meier(score_set.event_time, 1 - score_set.event_indicator)


def auc_and_brier(score_set: RiskScoreSet) -> tuple:
    km = censoring_km_for(score_set)
    w = ipcw_weights(score_set, km)
    return dynamic_auc(score_set, w), brier_score(score_set, w)


@dataclass
class DeltaMetrics:
    delta_auc: float
    delta_auc_ci: tuple
    delta_bs: float
    delta_bs_ci: tuple
    n_bootstrap: int


def delta_metrics(set_a: RiskScoreSet, set_b: RiskScoreSet,
                  n_bootstrap: int = 500, seed: int = 0) -> DeltaMetrics:
    """Paired subject-level bootstrap of AUC and Brier differences (A - B)."""
    if list(set_a.subject_ids) != list(set_b.subject_ids):
        raise DataError("score sets must cover identical subjects in order")
    if set_a.s != set_b.s or set_a.w != set_b.w:
        raise DataError("score sets must share landmark and window")
    auc_a, bs_a = auc_and_brier(set_a)
    auc_b, bs_b = auc_and_brier(set_b)
    n = set_a.pi.size
    rng = np.random.default_rng(seed)
    d_auc = np.empty(n_bootstrap)
    d_bs = np.empty(n_bootstrap)
    for r in range(n_bootstrap):
        idx = rng.integers(n, size=n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ra = _resample(set_a, idx)
            rb = _resample(set_b, idx)
            auc_ra, bs_ra = auc_and_brier(ra)
            auc_rb, bs_rb = auc_and_brier(rb)
        d_auc[r] = auc_ra - auc_rb
        d_bs[r] = bs_ra - bs_rb
    return DeltaMetrics(
        delta_auc=auc_a - auc_b,
        delta_auc_ci=(float(np.nanpercentile(d_auc, 2.5)),
                      float(np.nanpercentile(d_auc, 97.5))),
        delta_bs=bs_a - bs_b,
        delta_bs_ci=(float(np.nanpercentile(d_bs, 2.5)),
                     float(np.nanpercentile(d_bs, 97.5))),
        n_bootstrap=n_bootstrap,
    )


def _resample(score_set: RiskScoreSet, idx: np.ndarray) -> RiskScoreSet:
    return RiskScoreSet(
        subject_ids=[score_set.subject_ids[i] for i in idx],
        pi=score_set.pi[idx],
        event_time=score_set.event_time[idx],
        event_indicator=score_set.event_indicator[idx],
        s=score_set.s, w=score_set.w,
    )


@dataclass
class CVMetrics:
    s: float
    w: float
    auc: float
    bs: float
    n_at_risk: int


def stratified_folds(cohort, k: int, seed: int = 0) -> list:
    """Index folds stratified by event status; every subject appears once."""
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    cases = [i for i, s in enumerate(cohort.subjects) if s.event_indicator == 1]
    controls = [i for i, s in enumerate(cohort.subjects) if s.event_indicator == 0]
    folds = [[] for _ in range(k)]
    for group in (cases, controls):
        order = rng.permutation(len(group))
        for pos, j in enumerate(order):
            folds[pos % k].append(group[j])
    return folds


def kfold_scores(cohort, model, k: int, landmarks, w: float,
                 config=None, priors=None, n_pred_draws: int = 100,
                 seed: int = 0) -> dict:
    """Out-of-fold window risks pooled per landmark.

    Each fold's subjects are scored by a model fitted without them. The fold
    assignment depends only on (cohort, k, seed), so two models evaluated
    with the same arguments produce subject-aligned score sets.
    """
    from .cohort import Cohort
    from .dynpred import predict_risk
    from .inference import MCMCConfig, fit

    config = config or MCMCConfig()
    folds = stratified_folds(cohort, k, seed=seed)
    pooled: dict = {float(s): ([], [], [], []) for s in landmarks}
    for f_idx, fold in enumerate(folds):
        fold_set = set(fold)
        train = [s for i, s in enumerate(cohort.subjects) if i not in fold_set]
        test = [cohort.subjects[i] for i in fold]
        train_cohort = Cohort(subjects=train, biomarker_kind=cohort.biomarker_kind,
                              transform=cohort.transform)
        if train_cohort.n_events == 0:
            raise DataError(f"training fold {f_idx} has no events")
        result = fit(train_cohort, model, priors=priors, config=config)
        draws = result.pooled()
        for s_lm in landmarks:
            ids, pis, ts, ds = pooled[float(s_lm)]
            for subj in test:
                if subj.event_age <= s_lm or subj.times[0] > s_lm:
                    continue
                # hazard integrals need [t0, s + w] inside the fitted support
                lo, hi = result.model.basis.boundary
                if subj.t0 < lo or s_lm + w > hi:
                    continue
                pred_seed = np.random.SeedSequence(
                    (seed, f_idx, zlib.crc32(subj.subject_id.encode())))
                pred = predict_risk(result.model, draws, subj, float(s_lm), w,
                                    n_draws=n_pred_draws,
                                    rng=np.random.default_rng(pred_seed))
                ids.append(subj.subject_id)
                pis.append(pred.mean)
                ts.append(subj.event_age)
                ds.append(subj.event_indicator)
    out = {}
    for s_lm in landmarks:
        ids, pis, ts, ds = pooled[float(s_lm)]
        if len(ids) == 0:
            continue
        out[float(s_lm)] = RiskScoreSet(
            subject_ids=ids, pi=np.array(pis), event_time=np.array(ts),
            event_indicator=np.array(ds), s=float(s_lm), w=w)
    return out


def kfold_cv(cohort, model, k: int, landmarks, w: float,
             config=None, priors=None, n_pred_draws: int = 100,
             seed: int = 0) -> list:
    """Cross-validated AUC/BS per landmark; censoring KM recomputed per
    pooled evaluation set."""
    scores = kfold_scores(cohort, model, k, landmarks, w, config=config,
                          priors=priors, n_pred_draws=n_pred_draws, seed=seed)
    out = []
    for s_lm in sorted(scores):
        score_set = scores[s_lm]
        auc, bs = auc_and_brier(score_set)
        out.append(CVMetrics(s=s_lm, w=w, auc=auc, bs=bs,
                             n_at_risk=len(score_set.subject_ids)))
    return out
