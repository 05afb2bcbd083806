"""Command-line pipelines: ingest, match, epifit, and fixture generation.

Runs are driven by a plain-text ``key = value`` config file plus a few
flags.  Every run writes ``manifest.json`` into the output directory
before any result file, recording the fully-resolved configuration,
SHA-256 digests of the inputs, the package version, and wall-clock; the
manifest is finalized with warnings and a result summary when the run
ends.  Exit codes: 0 success (possibly with warnings), 1 input error,
2 internal error.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

import voteimpact
from voteimpact import matching, panel, plots
from voteimpact.delays import DelayModel, delay_quantile, discretize
from voteimpact.epimodel import state_trajectories
from voteimpact.errors import InputError, VoteImpactError
from voteimpact.fixtures import FIXTURE_KINDS, make_fixture
from voteimpact.panel import PanelConfig
from voteimpact.sampler import SamplerConfig, sample_posterior, unpack_params

__all__ = ["main", "RunConfig", "load_config", "run_match_pipeline", "run_epifit_pipeline"]


@dataclass
class RunConfig:
    """Fully-resolved run configuration; every field lands in the manifest."""

    # input files
    deaths: str | None = None
    covariates: str | None = None
    elections: str | None = None
    turnout: str | None = None
    interventions: str | None = None
    # panel window and exclusions
    study_start: dt.date = panel.DEFAULT_STUDY_START
    study_end: dt.date = panel.DEFAULT_STUDY_END
    excluded_states: tuple = panel.DEFAULT_EXCLUDED_STATES
    # matching estimator
    lag: int = 20
    k: int = 5
    lead_min: int = 10
    lead_max: int = 36
    treatment_lag: int = 10
    window_low: int = 13
    window_high: int = 32
    bootstrap: int = 1000
    level: float = 0.95
    robustness: str | None = None
    # epidemic model
    epi_start: dt.date = dt.date(2020, 3, 1)
    epi_end: dt.date = dt.date(2020, 5, 21)
    chains: int = 4
    iterations: int = 5000
    warmup: int = 2500
    ifr: float = 0.01
    # reproducibility
    seed: int | None = None

    def matching_config(self) -> matching.MatchingConfig:
        return matching.MatchingConfig(
            lag=self.lag,
            k=self.k,
            leads=tuple(range(self.lead_min, self.lead_max + 1)),
            treatment_lag=self.treatment_lag,
            window=(self.window_low, self.window_high),
        )

    def panel_config(self) -> PanelConfig:
        return PanelConfig(
            study_start=self.study_start,
            study_end=self.study_end,
            excluded_states=tuple(self.excluded_states),
        )


_PATH_KEYS = ("deaths", "covariates", "elections", "turnout", "interventions")
_DATE_KEYS = ("study_start", "study_end", "epi_start", "epi_end")
_INT_KEYS = (
    "lag", "k", "lead_min", "lead_max", "treatment_lag", "window_low",
    "window_high", "bootstrap", "chains", "iterations", "warmup", "seed",
)
_FLOAT_KEYS = ("level", "ifr")


def load_config(path) -> RunConfig:
    """Parse the ``key = value`` config file (``#`` starts a comment).

    Relative input paths are resolved against the config file's directory.
    Unknown keys are errors so typos cannot silently fall back to defaults.
    """
    path = Path(path)
    base = path.parent
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values: dict = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from None
    for ln, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise InputError(f"{path}:{ln}: unknown config key {key!r}")
        if key in values:
            raise InputError(f"{path}:{ln}: duplicate config key {key!r}")
        try:
            if key in _PATH_KEYS:
                values[key] = str((base / value).resolve()) if value else None
            elif key in _DATE_KEYS:
                values[key] = dt.date.fromisoformat(value)
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key == "excluded_states":
                values[key] = tuple(s.strip() for s in value.split(",") if s.strip())
            elif key == "robustness":
                values[key] = value or None
            else:
                values[key] = value
        except ValueError:
            raise InputError(f"{path}:{ln}: malformed value for {key!r}: {value!r}") from None
    return RunConfig(**values)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _config_dict(config: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, dt.date):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


class Manifest:
    """manifest.json lifecycle: written first, finalized last."""

    def __init__(self, out_dir: Path, command: str, config: RunConfig):
        self.path = out_dir / "manifest.json"
        self.started = time.time()
        digests = {}
        for key in _PATH_KEYS:
            p = getattr(config, key)
            if p is not None:
                if not Path(p).is_file():
                    raise InputError(f"input file for {key!r} not found: {p}")
                digests[key] = _sha256(p)
        self.data = {
            "command": command,
            "package_version": voteimpact.__version__,
            "resolved_config": _config_dict(config),
            "input_digests": digests,
            "started_at": dt.datetime.fromtimestamp(self.started).isoformat(),
            "warnings": [],
            "results": {},
        }
        self.write()

    def write(self):
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finalize(self, warnings: list, results: dict):
        self.data["warnings"] = list(warnings)
        self.data["results"] = results
        self.data["wall_clock_seconds"] = round(time.time() - self.started, 3)
        self.write()


def _require_inputs(config: RunConfig, keys) -> None:
    missing = [k for k in keys if getattr(config, k) is None]
    if missing:
        raise InputError(f"config is missing required input file keys: {', '.join(missing)}")
    if config.seed is None:
        raise InputError("a seed is required (config key 'seed' or flag --seed)")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return f"{x:.10g}"


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) if isinstance(v, (int, float, np.floating, np.integer)) or v is None else str(v) for v in row) + "\n")


def _build_panel(config: RunConfig):
    parsed = panel.parse_deaths(open(config.deaths))
    cov = panel.parse_covariates(open(config.covariates))
    schedule = panel.parse_schedule(open(config.elections))
    turnout = panel.parse_turnout(open(config.turnout)) if config.turnout else None
    return panel.build_panel(parsed, cov, schedule, config.panel_config(), turnout)


def run_ingest_pipeline(config: RunConfig, out_dir: Path) -> list:
    manifest = Manifest(out_dir, "ingest", config)
    pan = _build_panel(config)
    pan.to_frame().to_csv(out_dir / "panel.csv", index=False, float_format="%.10g")
    manifest.finalize([], {"build_report": pan.build_report})
    return []


def run_match_pipeline(config: RunConfig, out_dir: Path) -> list:
    """att.csv, balance.csv, matches.csv, att_plot.svg."""
    manifest = Manifest(out_dir, "match", config)
    warnings_list: list = []
    pan = _build_panel(config)
    if config.robustness:
        pan = matching.robustness_filter(pan, config.robustness)

    mcfg = config.matching_config()
    result = matching.run_matching(pan, mcfg)
    if result.ridge_events:
        warnings_list.append(
            f"{result.ridge_events} singular matching covariances required a ridge"
        )
    att = matching.att_curve(result, pan)
    boot = matching.bootstrap_ci(
        result, pan, B=config.bootstrap, level=config.level, seed=config.seed
    )
    balance = matching.balance_table(result, pan)

    _write_csv(
        out_dir / "att.csv",
        ["lead", "estimate", "ci_low", "ci_high", "n_treated"],
        zip(att.leads, att.estimate, boot.ci_low, boot.ci_high, att.n_treated),
    )
    _write_csv(
        out_dir / "balance.csv",
        ["covariate", "lag", "smd_before", "smd_after"],
        (
            (cov_name, int(lag), balance.smd_before[j, li], balance.smd_after[j, li])
            for j, cov_name in enumerate(balance.covariates)
            for li, lag in enumerate(balance.lags)
        ),
    )
    _write_csv(
        out_dir / "matches.csv",
        ["treated_fips", "onset_day", "rank", "control_fips", "distance", "weight"],
        (
            (ms.treated_fips, ms.onset, rank + 1, pan.fips[c], ms.distances[rank], ms.weights[rank])
            for ms in result.matched_sets
            for rank, c in enumerate(ms.control_idx)
        ),
    )
    plots.save_att_plot(
        att.leads, att.estimate, boot.ci_low, boot.ci_high, mcfg.window,
        out_dir / "att_plot.svg",
    )
    results = {
        "n_treated": len(result.matched_sets),
        "excluded": result.excluded,
        "window_estimate": boot.window_estimate,
        "window_ci": list(boot.window_ci),
        "mean_abs_smd_before": float(np.nanmean(balance.mean_abs("before"))),
        "mean_abs_smd_after": float(np.nanmean(balance.mean_abs("after"))),
    }
    manifest.finalize(warnings_list, results)
    return warnings_list


def _assemble_states(config: RunConfig) -> tuple:
    """Aggregate county death series to state level for the renewal model."""
    from voteimpact.epimodel import StateData
    from voteimpact.panel import _align_series

    parsed = panel.parse_deaths(open(config.deaths))
    cov = panel.parse_covariates(open(config.covariates))
    interventions = panel.parse_interventions(open(config.interventions))

    start, end = config.epi_start, config.epi_end
    if end <= start:
        raise InputError("epi_end must be after epi_start")
    T = (end - start).days + 1
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(end, "D") + 1)

    by_state: dict = {}
    pops: dict = {}
    skipped = []
    for s in parsed.series:
        rec = cov.get(s.fips)
        if rec is None:
            skipped.append(s.fips)
            continue
        _, daily = _align_series(s, start, end)
        by_state.setdefault(s.state, np.zeros(T, dtype=np.int64))
        by_state[s.state] += daily
        pops[s.state] = pops.get(s.state, 0) + rec.population
    if not by_state:
        raise InputError("no state has both death data and county populations")
    states = [
        StateData(
            state=st,
            dates=dates,
            daily_deaths=by_state[st],
            population=float(pops[st]),
            ifr=config.ifr,
            intervention_dates=dict(interventions.get(st, {})),
        )
        for st in sorted(by_state)
    ]
    return states, skipped


def _quantile_bands(samples: np.ndarray) -> dict:
    """Quantile envelope over axis 0 as the plotting/summary band labels."""
    qs = {"median": 0.5, "lo50": 0.25, "hi50": 0.75, "lo90": 0.05, "hi90": 0.95,
          "lo95": 0.025, "hi95": 0.975}
    return {k: np.quantile(samples, q, axis=0) for k, q in qs.items()}


def run_epifit_pipeline(config: RunConfig, out_dir: Path) -> list:
    """posterior.csv, rt_summary.csv, and one fit plot per state."""
    manifest = Manifest(out_dir, "epifit", config)
    states, skipped = _assemble_states(config)
    warnings_list = [f"counties without covariates skipped: {skipped}"] if skipped else []

    model = DelayModel.default()
    horizon = states[0].n_days
    g_pmf = discretize(model.generation, horizon).probs
    pi_pmf = discretize(model.infection_to_death, horizon).probs

    sampler_config = SamplerConfig(
        iterations=config.iterations, warmup=config.warmup, chains=config.chains
    )
    draws = sample_posterior(
        states, sampler_config, seed=config.seed, g_pmf=g_pmf, pi_pmf=pi_pmf
    )
    warnings_list.extend(draws.warnings)

    C, kept, P = draws.draws.shape
    _write_csv(
        out_dir / "posterior.csv",
        ["parameter", "chain", "iteration", "value"],
        (
            (draws.names[p], c, it, draws.draws[c, it, p])
            for p in range(P)
            for c in range(C)
            for it in range(kept)
        ),
    )

    # thin to a fixed number of draws for trajectory envelopes
    M = len(states)
    flat = draws.flat
    n_keep = min(400, flat.shape[0])
    idx = np.linspace(0, flat.shape[0] - 1, n_keep).astype(int)
    median_death_delay = delay_quantile(model.infection_to_death, 0.5)

    rt_rows = []
    for m, sd in enumerate(states):
        rts = np.empty((n_keep, sd.n_days))
        fits = np.empty((n_keep, sd.n_days))
        for r, i in enumerate(idx):
            params = unpack_params(flat[i], M)
            traj = state_trajectories(params, m, sd, g_pmf, pi_pmf)
            rts[r] = traj.rt
            fits[r] = traj.deaths
        rt_bands = _quantile_bands(rts)
        death_bands = _quantile_bands(fits)
        for t in range(sd.n_days):
            rt_rows.append(
                (sd.state, str(sd.dates[t]))
                + tuple(rt_bands[k][t] for k in ("median", "lo50", "hi50", "lo90", "hi90", "lo95", "hi95"))
            )
        primary = sd.intervention_dates.get("primary")
        markers = {
            "primary": primary,
            "primary_plus_median_death": (
                primary + dt.timedelta(days=round(median_death_delay)) if primary else None
            ),
            "stay_at_home": sd.intervention_dates.get("stay_at_home"),
        }
        plots.save_state_fit_plot(
            sd.state, sd.dates, sd.daily_deaths, death_bands, rt_bands, markers,
            out_dir / f"fit_{sd.state}.svg", converged=not draws.flagged,
        )

    _write_csv(
        out_dir / "rt_summary.csv",
        ["state", "date", "median", "lo50", "hi50", "lo90", "hi90", "lo95", "hi95"],
        rt_rows,
    )
    results = {
        "rhat_max": float(np.max(draws.rhat)),
        "rhat": {name: float(r) for name, r in zip(draws.names, draws.rhat)},
        "flagged": draws.flagged,
        "states": [s.state for s in states],
    }
    manifest.finalize(warnings_list, results)
    return warnings_list


def _execute(fn, *args):
    try:
        warnings_list = fn(*args)
        for w in warnings_list or []:
            click.echo(f"warning: {w}", err=True)
    except VoteImpactError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    except Exception as exc:  # pragma: no cover - defensive
        click.echo(f"internal error: {exc}", err=True)
        sys.exit(2)


def _resolved(config_path, seed, robustness=None) -> RunConfig:
    config = load_config(config_path)
    if seed is not None:
        config.seed = seed
    if robustness is not None:
        config.robustness = robustness
    return config


def _out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
@click.version_option(voteimpact.__version__)
def main():
    """Matched county estimates and state epidemic fits for primary elections."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def ingest(config_path, seed, out):
    """Parse and join the inputs; write the cleaned panel and its report."""
    def run():
        config = _resolved(config_path, seed)
        _require_inputs(config, ("deaths", "covariates", "elections"))
        return run_ingest_pipeline(config, _out_dir(out))

    _execute(run)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--robustness", type=click.Choice(matching.ROBUSTNESS_MODES), default=None)
def match(config_path, seed, out, robustness):
    """Matched difference-in-differences estimate with bootstrap intervals."""
    def run():
        config = _resolved(config_path, seed, robustness)
        _require_inputs(config, ("deaths", "covariates", "elections"))
        return run_match_pipeline(config, _out_dir(out))

    _execute(run)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def epifit(config_path, seed, out):
    """Fit the state-level renewal model and summarize the posterior."""
    def run():
        config = _resolved(config_path, seed)
        _require_inputs(config, ("deaths", "covariates", "interventions"))
        return run_epifit_pipeline(config, _out_dir(out))

    _execute(run)


@main.command()
@click.argument("kind", type=click.Choice(FIXTURE_KINDS))
@click.option("--seed", type=int, required=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--effect", type=float, default=0.005, show_default=True,
              help="Injected effect per 1000 for additive_effect fixtures.")
def fixture(kind, seed, out, effect):
    """Write a synthetic input file set with recorded ground truth."""
    def run():
        paths = make_fixture(kind, seed, out, effect)
        click.echo("\n".join(sorted(paths.values())))
        return []

    _execute(run)


if __name__ == "__main__":
    main()
