"""Command-line front end: simulate, fit, predict, validate.

Every command takes a strict JSON config (unknown keys rejected) and is
deterministic given the config and seed. Exit codes: 0 success, 2 config
error, 3 data error, 4 convergence failure.
"""

from __future__ import annotations

import csv
import json
import sys

import click
import numpy as np

from .accuracy import auc_and_brier, delta_metrics, kfold_scores
from .basis import SplineBasis
from .cohort import read_cohort_csv, write_cohort_csv
from .consensus import SplitPlan, consensus_fit
from .dynpred import predict_risk
from .errors import ConfigError, ConvergenceError, DataError
from .hazard import LINK_KINDS, LinkSpec
from .inference import FitResult, MCMCConfig, Priors, fit, read_draws_csv
from .model import ModelSpec
from .simulate import SimConfig, simulate_cohort, write_truth_csv

RHAT_LIMIT = 1.10

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4

LINK_ALIASES = {
    "value": "value",
    "slope": "slope",
    "value+slope": "value_slope",
    "value_slope": "value_slope",
    "cumulative": "cumulative",
}


def _check_keys(d: dict, allowed, where: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"{where}: missing required key {key!r}")
    return d[key]


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return config


def _parse_link(d, where: str) -> LinkSpec:
    if isinstance(d, str):
        d = {"kind": d}
    _check_keys(d, ("kind", "alpha1", "alpha2", "alpha3"), where)
    kind = LINK_ALIASES.get(_require(d, "kind", where))
    if kind not in LINK_KINDS:
        raise ConfigError(f"{where}: unknown link kind; choose from "
                          f"{', '.join(sorted(LINK_ALIASES))}")
    return LinkSpec(kind, alpha1=float(d.get("alpha1", 0.0)),
                    alpha2=float(d.get("alpha2", 0.0)),
                    alpha3=float(d.get("alpha3", 0.0)))


def _parse_basis(d, where: str) -> SplineBasis:
    _check_keys(d, ("degree", "interior_knots", "boundary"), where)
    try:
        return SplineBasis(
            degree=int(d.get("degree", 3)),
            interior_knots=tuple(d.get("interior_knots", ())),
            boundary=tuple(_require(d, "boundary", where)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_model(d, where: str, link_override: str | None = None) -> ModelSpec:
    _check_keys(d, ("link", "basis", "q_basis", "spline_degree",
                    "survival_covariates"), where)
    link_field = d.get("link", "value_slope")
    if link_override is not None:
        link_field = link_override
    link = _parse_link(link_field, f"{where}.link")
    basis = _parse_basis(d["basis"], f"{where}.basis") if "basis" in d else None
    return ModelSpec(
        link=link, basis=basis,
        q_basis=int(d.get("q_basis", 9)),
        spline_degree=int(d.get("spline_degree", 3)),
        survival_covariates=tuple(d.get("survival_covariates", ())),
    )


def _parse_mcmc(d, where: str, seed: int, threads: int | None) -> MCMCConfig:
    _check_keys(d, ("n_chains", "n_iter", "n_warmup", "target_acceptance",
                    "adapt_cov_start"), where)
    try:
        return MCMCConfig(
            n_chains=int(d.get("n_chains", 3)),
            n_iter=int(d.get("n_iter", 8500)),
            n_warmup=int(d.get("n_warmup", 3500)),
            seed=seed,
            target_acceptance=float(d.get("target_acceptance", 0.234)),
            adapt_cov_start=int(d.get("adapt_cov_start", 200)),
            n_threads=threads,
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_priors(d, where: str) -> Priors:
    _check_keys(d, ("sd_beta", "sd_gamma", "sd_alpha", "sd_spline",
                    "sd_log_sigma", "iw_df"), where)
    kwargs = {k: float(v) for k, v in d.items()}
    return Priors(**kwargs)


def _read_cohort(config: dict):
    path = _require(config, "cohort_csv", "config")
    kind = config.get("biomarker_kind", "DenseArea")
    transform = config.get("transform", "Sqrt")
    try:
        return read_cohort_csv(path, biomarker_kind=kind, transform=transform)
    except OSError as exc:
        raise DataError(f"cannot read cohort {path}: {exc}") from exc


def _run(func):
    """Execute a command body, mapping exceptions to the exit-code contract."""
    try:
        func()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except ConvergenceError as exc:
        click.echo(f"convergence failure: {exc}", err=True)
        sys.exit(EXIT_CONVERGENCE)


@click.group()
def main():
    """Joint longitudinal-survival modeling and dynamic risk prediction."""


# ---------------------------------------------------------------------------
# simulate


_SIM_KEYS = ("n_subjects", "seed", "beta", "b_cov", "sigma_eps", "link",
             "gamma_h0", "basis", "entry_age_range", "visit_interval",
             "visit_jitter", "max_visits", "manuf_prob",
             "target_event_fraction", "cohort_csv", "truth_csv")

_SIM_DEFAULT_BASIS = {"degree": 3, "interior_knots": [55.0, 65.0, 75.0],
                      "boundary": [40.0, 88.0]}


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(), help="Path to a simulation JSON config.")
@click.option("--seed", type=int, default=None,
              help="Override the config's master seed.")
def simulate(config_path, seed):
    """Simulate a synthetic screening cohort and write cohort + truth CSVs."""

    def body():
        config = _load_config(config_path)
        _check_keys(config, _SIM_KEYS, "config")
        cohort_path = _require(config, "cohort_csv", "config")
        truth_path = _require(config, "truth_csv", "config")
        basis = _parse_basis(config.get("basis", _SIM_DEFAULT_BASIS),
                             "config.basis")
        link = _parse_link(config.get("link", {
            "kind": "value_slope", "alpha1": 0.1, "alpha2": 0.5}), "config.link")
        n_spline = basis.size
        gamma_h0 = np.asarray(config.get("gamma_h0", [-4.5] * n_spline), float)
        try:
            sim_config = SimConfig(
                n_subjects=int(_require(config, "n_subjects", "config")),
                beta=np.asarray(config.get("beta", [9.0, -0.1, 0.02, 0.15]), float),
                b_cov=np.asarray(config.get("b_cov",
                                            [[1.0, -0.01], [-0.01, 0.02]]), float),
                sigma_eps=float(config.get("sigma_eps", 0.6)),
                link=link, gamma_h0=gamma_h0, basis=basis,
                entry_age_range=tuple(config.get("entry_age_range", (40.0, 74.0))),
                visit_interval=float(config.get("visit_interval", 1.0)),
                visit_jitter=tuple(config.get("visit_jitter", (-0.1, 0.25))),
                max_visits=int(config.get("max_visits", 13)),
                manuf_prob=float(config.get("manuf_prob", 0.5)),
                target_event_fraction=config.get("target_event_fraction"),
                seed=int(seed if seed is not None else config.get("seed", 0)),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        sim = simulate_cohort(sim_config)
        try:
            write_cohort_csv(sim.cohort, cohort_path)
            write_truth_csv(sim, truth_path)
        except OSError as exc:
            raise DataError(f"cannot write output: {exc}") from exc
        n = len(sim.cohort)
        follow_up = np.array([s.event_age - s.t0 for s in sim.cohort.subjects])
        click.echo(f"subjects: {n}")
        click.echo(f"events: {sim.cohort.n_events} "
                   f"({sim.cohort.n_events / n:.1%})")
        click.echo(f"median follow-up: {np.median(follow_up):.2f} years")
        click.echo(f"wrote {cohort_path} and {truth_path}")

    _run(body)


# ---------------------------------------------------------------------------
# fit


_FIT_KEYS = ("cohort_csv", "biomarker_kind", "transform", "model", "priors",
             "mcmc", "consensus", "output_json", "draws_csv")


@main.command(name="fit")
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Path to a fit JSON config.")
@click.option("--seed", type=int, required=True,
              help="Master seed; required for reproducibility.")
@click.option("--threads", type=int, default=None,
              help="Cap on parallel workers.")
@click.option("--link", "link_override", type=str, default=None,
              help="Override the configured link kind "
                   "(value, slope, value+slope, cumulative).")
@click.option("--allow-nonconverged", is_flag=True,
              help="Exit 0 even when some rhat exceeds the 1.10 threshold.")
def fit_cmd(config_path, seed, threads, link_override, allow_nonconverged):
    """Fit the joint model (plain, or consensus when splits >= 2)."""

    def body():
        config = _load_config(config_path)
        _check_keys(config, _FIT_KEYS, "config")
        output_json = _require(config, "output_json", "config")
        model = _parse_model(config.get("model", {}), "config.model",
                             link_override=link_override)
        mcmc = _parse_mcmc(config.get("mcmc", {}), "config.mcmc", seed, threads)
        priors = _parse_priors(config.get("priors", {}), "config.priors") \
            if "priors" in config else None
        cohort = _read_cohort(config)

        consensus = config.get("consensus")
        if consensus is not None:
            _check_keys(consensus, ("n_splits", "stratify_by_event"),
                        "config.consensus")
            try:
                plan = SplitPlan(
                    n_splits=int(consensus.get("n_splits", 12)),
                    stratify_by_event=bool(consensus.get("stratify_by_event", True)),
                    seed=seed)
            except ValueError as exc:
                raise ConfigError(f"config.consensus: {exc}") from exc
            click.echo(f"consensus fit: {plan.n_splits} splits, "
                       f"{mcmc.n_chains} chains x {mcmc.n_iter} iterations "
                       f"({mcmc.n_warmup} warmup) per split")
            result = consensus_fit(cohort, model, plan, priors=priors, config=mcmc)
        else:
            click.echo(f"fit: {mcmc.n_chains} chains x {mcmc.n_iter} iterations "
                       f"({mcmc.n_warmup} warmup)")
            result = fit(cohort, model, priors=priors, config=mcmc)

        try:
            result.save(output_json, draws_path=config.get("draws_csv"))
        except OSError as exc:
            raise DataError(f"cannot write output: {exc}") from exc
        worst = result.max_rhat()
        click.echo(f"max rhat: {worst:.4f}")
        click.echo(f"wrote {output_json}")
        if worst >= RHAT_LIMIT:
            bad = [n for n, r in zip(result.names, result.rhat) if r >= RHAT_LIMIT]
            message = (f"rhat >= {RHAT_LIMIT} for: {', '.join(bad)}")
            if allow_nonconverged:
                click.echo(f"warning: {message}", err=True)
            else:
                raise ConvergenceError(message)

    _run(body)


# ---------------------------------------------------------------------------
# predict


_PREDICT_KEYS = ("cohort_csv", "biomarker_kind", "transform", "model_json",
                 "draws_csv", "subject_ids", "landmarks", "window", "n_draws",
                 "output_csv")

PREDICTION_CSV_COLUMNS = ["subject_id", "landmark", "window", "pi_mean",
                          "pi_low", "pi_high", "L"]


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Path to a prediction JSON config.")
@click.option("--seed", type=int, required=True,
              help="Master seed; required for reproducibility.")
def predict(config_path, seed):
    """Dynamic window risks per subject and landmark, history truncated."""

    def body():
        config = _load_config(config_path)
        _check_keys(config, _PREDICT_KEYS, "config")
        model_json = _require(config, "model_json", "config")
        draws_csv = _require(config, "draws_csv", "config")
        landmarks = [float(s) for s in _require(config, "landmarks", "config")]
        window = float(_require(config, "window", "config"))
        output_csv = _require(config, "output_csv", "config")
        n_draws = int(config.get("n_draws", 500))
        if window < 0:
            raise ConfigError("window must be nonnegative")
        if not landmarks:
            raise ConfigError("landmarks must be a nonempty list")
        cohort = _read_cohort(config)
        try:
            result = FitResult.load(model_json)
            draws = read_draws_csv(draws_csv, len(result.names))
        except OSError as exc:
            raise DataError(f"cannot read model artifacts: {exc}") from exc
        pooled = draws.reshape(-1, draws.shape[-1])
        subject_ids = config.get("subject_ids") or \
            [s.subject_id for s in cohort.subjects]
        rows = []
        for i, sid in enumerate(subject_ids):
            subject = cohort.subject(sid)
            for j, s_lm in enumerate(landmarks):
                rng = np.random.default_rng(np.random.SeedSequence((seed, i, j)))
                pred = predict_risk(result.model, pooled, subject, s_lm, window,
                                    n_draws=n_draws, rng=rng)
                rows.append([sid, repr(s_lm), repr(window), repr(pred.mean),
                             repr(pred.ci_low), repr(pred.ci_high), n_draws])
        try:
            with open(output_csv, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(PREDICTION_CSV_COLUMNS)
                writer.writerows(rows)
        except OSError as exc:
            raise DataError(f"cannot write output: {exc}") from exc
        click.echo(f"wrote {len(rows)} predictions to {output_csv}")

    _run(body)


# ---------------------------------------------------------------------------
# validate


_VALIDATE_KEYS = ("cohort_csv", "biomarker_kind", "transform", "models", "k",
                  "landmarks", "windows", "mcmc", "priors", "n_pred_draws",
                  "n_bootstrap", "output_csv")

METRICS_CSV_COLUMNS = ["landmark", "window", "model", "auc", "bs"]
DELTA_CSV_COLUMNS = METRICS_CSV_COLUMNS + [
    "delta_auc", "delta_auc_lo", "delta_auc_hi",
    "delta_bs", "delta_bs_lo", "delta_bs_hi"]

DEFAULT_LANDMARKS = [float(s) for s in range(41, 66)]
DEFAULT_WINDOWS = [2.0, 5.0]


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="Path to a validation JSON config.")
@click.option("--seed", type=int, required=True,
              help="Master seed; required for reproducibility.")
@click.option("--threads", type=int, default=None,
              help="Cap on parallel workers.")
def validate(config_path, seed, threads):
    """Cross-validated AUC/Brier per landmark, with model deltas when two
    model specs are given."""

    def body():
        config = _load_config(config_path)
        _check_keys(config, _VALIDATE_KEYS, "config")
        output_csv = _require(config, "output_csv", "config")
        model_dicts = _require(config, "models", "config")
        if not isinstance(model_dicts, list) or not 1 <= len(model_dicts) <= 2:
            raise ConfigError("config.models must list one or two model specs")
        models = [_parse_model(d, f"config.models[{i}]")
                  for i, d in enumerate(model_dicts)]
        k = int(config.get("k", 5))
        if k < 2:
            raise ConfigError("k must be at least 2")
        landmarks = [float(s) for s in config.get("landmarks", DEFAULT_LANDMARKS)]
        windows = [float(w) for w in config.get("windows", DEFAULT_WINDOWS)]
        mcmc = _parse_mcmc(config.get("mcmc", {}), "config.mcmc", seed, threads)
        priors = _parse_priors(config.get("priors", {}), "config.priors") \
            if "priors" in config else None
        n_pred_draws = int(config.get("n_pred_draws", 100))
        n_bootstrap = int(config.get("n_bootstrap", 500))
        cohort = _read_cohort(config)

        paired = len(models) == 2
        rows = []
        for w in windows:
            scores = [kfold_scores(cohort, m, k, landmarks, w, config=mcmc,
                                   priors=priors, n_pred_draws=n_pred_draws,
                                   seed=seed) for m in models]
            for s_lm in landmarks:
                key = float(s_lm)
                present = [key in sc for sc in scores]
                if not all(present):
                    continue
                per_model = []
                for sc in scores:
                    auc, bs = auc_and_brier(sc[key])
                    per_model.append((auc, bs))
                if paired:
                    delta = delta_metrics(scores[0][key], scores[1][key],
                                          n_bootstrap=n_bootstrap, seed=seed)
                for m_idx, (auc, bs) in enumerate(per_model):
                    row = [repr(key), repr(w), m_idx, repr(auc), repr(bs)]
                    if paired:
                        if m_idx == 0:
                            row += [repr(delta.delta_auc),
                                    repr(delta.delta_auc_ci[0]),
                                    repr(delta.delta_auc_ci[1]),
                                    repr(delta.delta_bs),
                                    repr(delta.delta_bs_ci[0]),
                                    repr(delta.delta_bs_ci[1])]
                        else:
                            row += [""] * 6
                    rows.append(row)
        header = DELTA_CSV_COLUMNS if paired else METRICS_CSV_COLUMNS
        try:
            with open(output_csv, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(header)
                writer.writerows(rows)
        except OSError as exc:
            raise DataError(f"cannot write output: {exc}") from exc
        click.echo(f"wrote {len(rows)} metric rows to {output_csv}")

    _run(body)


if __name__ == "__main__":
    main()
