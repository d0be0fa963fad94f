"""Consensus Monte Carlo: split, fit sub-posteriors, combine by precision.

Each split is fitted against the prior raised to 1/n_splits so the product of
sub-posteriors targets the full posterior; draws are then combined per
coefficient with inverse-variance weights, draw index by draw index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort
from .errors import DataError
from .inference import FitResult, MCMCConfig, Priors, compute_rhat, fit, resolve_basis
from .model import ModelSpec, coefficient_names


@dataclass
class SplitPlan:
    """How to partition the cohort for consensus fitting."""

    n_splits: int = 12
    stratify_by_event: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_splits < 2:
            raise ValueError("use plain fit for a single split")


@dataclass
class SubPosterior:
    split_index: int
    draws: np.ndarray          # (n_draws, n_coef), chains pooled in chain order
    rhat: np.ndarray
    n_subjects: int
    n_events: int

    @property
    def variances(self) -> np.ndarray:
        return np.var(self.draws, axis=0, ddof=1)


def split_cohort(cohort: Cohort, plan: SplitPlan, rng=None) -> list:
    """Random stratified partition into disjoint sub-cohorts.

    With stratification, event counts per split differ by at most one; a
    split that would end up with zero events triggers one reshuffle before
    erroring out.
    """
    rng = rng or np.random.default_rng(plan.seed)
    for attempt in range(2):
        cases = [s for s in cohort.subjects if s.event_indicator == 1]
        controls = [s for s in cohort.subjects if s.event_indicator == 0]
        if plan.stratify_by_event:
            groups = [cases, controls]
        else:
            groups = [cohort.subjects[:]]
        assignments = [[] for _ in range(plan.n_splits)]
        for group in groups:
            order = rng.permutation(len(group))
            for pos, idx in enumerate(order):
                assignments[pos % plan.n_splits].append(group[idx])
        ok = all(any(s.event_indicator == 1 for s in a) for a in assignments)
        if ok:
            return [Cohort(subjects=a, biomarker_kind=cohort.biomarker_kind,
                           transform=cohort.transform) for a in assignments]
    raise DataError("a split has no events even after reshuffling; "
                    "reduce n_splits")


def fit_splits(sub_cohorts: list, model: ModelSpec,
               priors: Priors | None = None,
               config: MCMCConfig | None = None) -> list:
    """Fit each split with the prior tempered to 1/n_splits."""
    config = config or MCMCConfig()
    n_splits = len(sub_cohorts)
    out = []
    for idx, sub in enumerate(sub_cohorts):
        sub_config = MCMCConfig(
            n_chains=config.n_chains, n_iter=config.n_iter,
            n_warmup=config.n_warmup, seed=config.seed + 1000 * (idx + 1),
            target_acceptance=config.target_acceptance,
            adapt_cov_start=config.adapt_cov_start, n_threads=config.n_threads)
        result = fit(sub, model, priors=priors, config=sub_config,
                     prior_power=1.0 / n_splits)
        out.append(SubPosterior(
            split_index=idx, draws=result.pooled(), rhat=result.rhat,
            n_subjects=result.n_subjects, n_events=result.n_events))
    return out


def combine_draws(subposteriors: list) -> np.ndarray:
    """Per-coefficient precision-weighted average, aligned by draw index."""
    if not subposteriors:
        raise ValueError("no sub-posteriors to combine")
    counts = {sp.draws.shape[0] for sp in subposteriors}
    if len(counts) != 1:
        raise ValueError("sub-posteriors must hold equal draw counts")
    stack = np.stack([sp.draws for sp in subposteriors])   # (S, G, K)
    variances = np.stack([sp.variances for sp in subposteriors])  # (S, K)
    if np.any(variances <= 0):
        raise DataError("degenerate sub-posterior: zero draw variance")
    weights = 1.0 / variances
    weights = weights / np.sum(weights, axis=0, keepdims=True)
    return np.einsum("sk,sgk->gk", weights, stack)


def consensus_fit(cohort: Cohort, model: ModelSpec, plan: SplitPlan,
                  priors: Priors | None = None,
                  config: MCMCConfig | None = None) -> FitResult:
    """Full consensus pipeline returning a FitResult-shaped combined posterior."""
    config = config or MCMCConfig()
    model = resolve_basis(cohort, model)
    subs = split_cohort(cohort, plan)
    subposteriors = fit_splits(subs, model, priors=priors, config=config)
    combined = combine_draws(subposteriors)
    n_chains = config.n_chains
    per_chain = combined.shape[0] // n_chains
    draws = combined[: per_chain * n_chains].reshape(n_chains, per_chain, -1)
    rhat = np.array([
        compute_rhat([draws[c, :, k] for c in range(n_chains)])
        for k in range(draws.shape[-1])
    ])
    provenance = {
        "consensus": True,
        "n_splits": plan.n_splits,
        "stratify_by_event": plan.stratify_by_event,
        "split_seed": plan.seed,
        "splits": [
            {"index": sp.split_index, "n_subjects": sp.n_subjects,
             "n_events": sp.n_events, "max_rhat": float(np.max(sp.rhat))}
            for sp in subposteriors
        ],
    }
    return FitResult(
        names=coefficient_names(model), draws=draws, rhat=rhat,
        dic=float("nan"), p_d=float("nan"), model=model,
        n_subjects=len(cohort.subjects), n_events=cohort.n_events,
        provenance=provenance,
    )
