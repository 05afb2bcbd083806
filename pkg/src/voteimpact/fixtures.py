"""Synthetic input-file generators with recorded ground truth.

Each fixture writes the documented CSV formats so the full ingestion path
is exercised; the generating parameters land in ``truth.json`` next to
the data.  Kinds:

* ``null_effect``      -- treated and control counties share one DGP.
* ``additive_effect``  -- a known constant death-rate effect injected
                          into treated counties after onset.
* ``confounded_balance`` -- treated counties drawn from a shifted
                          covariate distribution; the control pool mixes
                          similar and dissimilar counties.
* ``epi_recovery``     -- state-level death counts generated by the
                          renewal model with recorded parameters.
"""

from __future__ import annotations

import datetime as dt
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voteimpact.delays import DelayModel, discretize
from voteimpact.epimodel import EpiParams, StateData, simulate_forward
from voteimpact.errors import InputError

__all__ = ["FixtureSet", "generate_fixture", "make_fixture", "FIXTURE_KINDS"]

FIXTURE_KINDS = ("null_effect", "additive_effect", "confounded_balance", "epi_recovery")

START = dt.date(2020, 3, 1)
N_DAYS = 120

# matching fixtures: 20 counties; eight held primaries staggered five days
# apart (one county each) plus twelve counties that vote by mail or cancel.
# Staggering the held primaries keeps treated contributions on distinct
# calendar days, which the resampling interval needs for good calibration.
_HELD_STATES = ("WI", "OH", "GA", "IL", "WA", "CO", "AZ", "NJ")
_PRIMARY = {
    st: (dt.date(2020, 4, 1) + dt.timedelta(days=5 * i), "held")
    for i, st in enumerate(_HELD_STATES)
}
_PRIMARY.update(
    {
        "NY": (dt.date(2020, 6, 23), "mail_in"),
        "PA": (dt.date(2020, 6, 2), "mail_in"),
        "FL": (dt.date(2020, 3, 17), "cancelled"),
    }
)
_COUNTY_STATES = list(_HELD_STATES) + ["NY"] * 4 + ["PA"] * 4 + ["FL"] * 4
_POPULATION = 200_000  # effect * pop / 1000 must be a whole daily count

# epi fixture: one county per state, varying intervention order
_EPI_STATES = ("WA", "OR", "NM", "UT")
_EPI_PRIMARY = (dt.date(2020, 4, 1), dt.date(2020, 3, 18), dt.date(2020, 4, 10), dt.date(2020, 3, 22))
_EPI_SAH = (dt.date(2020, 3, 20), dt.date(2020, 4, 5), dt.date(2020, 3, 25), dt.date(2020, 4, 12))
_EPI_POPULATION = 5_000_000

EPI_TRUE_ALPHA = (0.8, 0.0)
EPI_TRUE_BETA = (0.08, 0.05, -0.08, -0.05)
EPI_TRUE_R0 = (3.2, 3.0, 3.4, 3.1)
EPI_TRUE_PSI = 5.0
EPI_TRUE_SEEDS = (30.0, 20.0, 40.0, 25.0)


@dataclass
class FixtureSet:
    kind: str
    seed: int
    deaths_csv: str
    covariates_csv: str
    elections_csv: str
    truth: dict
    turnout_csv: str | None = None
    interventions_csv: str | None = None

    def files(self) -> dict:
        out = {
            "deaths.csv": self.deaths_csv,
            "covariates.csv": self.covariates_csv,
            "elections.csv": self.elections_csv,
            "truth.json": json.dumps(self.truth, indent=2, sort_keys=True, default=str),
        }
        if self.turnout_csv is not None:
            out["turnout.csv"] = self.turnout_csv
        if self.interventions_csv is not None:
            out["interventions.csv"] = self.interventions_csv
        return out


def _epidemic_curve(rng, scale: float) -> np.ndarray:
    """Smooth per-day expected deaths for one county."""
    t = np.arange(N_DAYS)
    peak = rng.normal(55.0, 8.0)
    width = rng.uniform(18.0, 28.0)
    return scale * np.exp(-((t - peak) / width) ** 2)


def _deaths_csv(fips, states, county_daily) -> str:
    buf = io.StringIO()
    buf.write("date,county,state,fips,cases,deaths\n")
    for i, f in enumerate(fips):
        cum = np.cumsum(county_daily[i])
        for d in range(N_DAYS):
            date = START + dt.timedelta(days=d)
            buf.write(f"{date},County{f},{states[i]},{f},{int(cum[d]) * 10},{int(cum[d])}\n")
    return buf.getvalue()


def _covariates_csv(fips, rows) -> str:
    buf = io.StringIO()
    buf.write(
        "fips,pct_black,median_income,pct_bachelors,pop_density,population,"
        "pct_65_plus,unemployment_rate,trump_share_2016,first_case_date\n"
    )
    for f, r in zip(fips, rows):
        buf.write(
            f"{f},{r['pct_black']:.6f},{r['median_income']:.2f},{r['pct_bachelors']:.6f},"
            f"{r['pop_density']:.4f},{r['population']},{r['pct_65_plus']:.6f},"
            f"{r['unemployment_rate']:.6f},{r['trump_share_2016']:.6f},{r['first_case_date']}\n"
        )
    return buf.getvalue()


def _elections_csv(schedule: dict) -> str:
    buf = io.StringIO()
    buf.write("state,primary_date,status\n")
    for state in sorted(schedule):
        date, status = schedule[state]
        buf.write(f"{state},{date},{status}\n")
    return buf.getvalue()


def _clip01(x, lo=0.005, hi=0.995):
    return float(np.clip(x, lo, hi))


def _covariate_row(rng, latent: float, population: int, first_case: dt.date) -> dict:
    """County covariates driven by one latent confounder plus noise."""
    z = latent
    return {
        "pct_black": _clip01(0.12 + 0.06 * z + rng.normal(0, 0.02)),
        "median_income": float(np.exp(10.8 - 0.15 * z + rng.normal(0, 0.05))),
        "pct_bachelors": _clip01(0.28 - 0.04 * z + rng.normal(0, 0.02)),
        "pop_density": float(np.exp(4.5 + 0.3 * z + rng.normal(0, 0.15))),
        "population": population,
        "pct_65_plus": _clip01(0.17 + 0.02 * z + rng.normal(0, 0.01)),
        "unemployment_rate": _clip01(0.06 + 0.015 * z + rng.normal(0, 0.005)),
        "trump_share_2016": _clip01(0.48 - 0.05 * z + rng.normal(0, 0.03)),
        "first_case_date": first_case,
    }


def _matching_fixture(kind: str, seed: int, effect: float) -> FixtureSet:
    rng = np.random.default_rng(seed)
    fips = [f"1{i:04d}" for i in range(1, 21)]
    states = list(_COUNTY_STATES)
    treated_states = {s for s, (_, stat) in _PRIMARY.items() if stat == "held"}

    confounded = kind == "confounded_balance"
    latent = np.zeros(20)
    cov_rows = []
    daily = np.zeros((20, N_DAYS), dtype=np.int64)
    scale_base = 3.0  # expected deaths/day near the peak

    for i, st in enumerate(states):
        if confounded:
            if st in treated_states:
                z = 1.2 + rng.normal(0, 0.3)
            elif i % 2 == 0:
                z = 1.2 + rng.normal(0, 0.4)  # treated-like controls
            else:
                z = rng.normal(-0.8, 0.5)     # dissimilar controls
        else:
            z = rng.normal(0, 1)
        latent[i] = z
        # the latent factor also moves the epidemic trend and first case
        first_case = START + dt.timedelta(days=int(np.clip(12 - 4 * z + rng.normal(0, 2), 0, 30)))
        cov_rows.append(_covariate_row(rng, z, _POPULATION, first_case))
        scale = scale_base * np.exp(0.35 * z if confounded else 0.0)
        lam = _epidemic_curve(rng, scale)
        daily[i] = rng.poisson(lam)

    truth = {
        "kind": kind,
        "seed": seed,
        "effect_per_1000": 0.0,
        "treated_states": sorted(treated_states),
        "onset_dates": {
            s: str(_PRIMARY[s][0] + dt.timedelta(days=10)) for s in sorted(treated_states)
        },
    }

    if kind == "additive_effect":
        extra = effect * _POPULATION / 1000.0
        if abs(extra - round(extra)) > 1e-9:
            raise InputError(
                f"effect {effect} per 1000 is not a whole daily count at population {_POPULATION}"
            )
        extra = int(round(extra))
        for i, st in enumerate(states):
            if st in treated_states:
                onset = (_PRIMARY[st][0] + dt.timedelta(days=10) - START).days
                daily[i, onset:] += extra
        truth["effect_per_1000"] = effect

    turnout = rng.uniform(0.2, 0.8, size=20)
    buf = io.StringIO()
    buf.write("fips,in_person_turnout\n")
    for f, t in zip(fips, turnout):
        buf.write(f"{f},{t:.6f}\n")

    return FixtureSet(
        kind=kind,
        seed=seed,
        deaths_csv=_deaths_csv(fips, states, daily),
        covariates_csv=_covariates_csv(fips, cov_rows),
        elections_csv=_elections_csv(_PRIMARY),
        turnout_csv=buf.getvalue(),
        truth=truth,
    )


def _epi_fixture(seed: int) -> FixtureSet:
    model = DelayModel.default()
    g = discretize(model.generation, N_DAYS).probs
    pi = discretize(model.infection_to_death, N_DAYS).probs
    dates = np.arange(np.datetime64(START, "D"), np.datetime64(START, "D") + N_DAYS)

    templates = []
    for m, st in enumerate(_EPI_STATES):
        templates.append(
            StateData(
                state=st,
                dates=dates,
                daily_deaths=np.zeros(N_DAYS, dtype=np.int64),
                population=_EPI_POPULATION,
                ifr=0.01,
                intervention_dates={"primary": _EPI_PRIMARY[m], "stay_at_home": _EPI_SAH[m]},
            )
        )
    params = EpiParams(
        r0=np.array(EPI_TRUE_R0),
        kappa=0.4,
        alpha=np.array(EPI_TRUE_ALPHA),
        beta=np.array(EPI_TRUE_BETA),
        gamma=0.15,
        ifr_noise=np.ones(4),
        psi=EPI_TRUE_PSI,
        seeds=np.array(EPI_TRUE_SEEDS),
        seed_scale=30.0,
    )
    simulated = simulate_forward(params, templates, g, pi, seed=seed)

    fips = [f"2{i:04d}" for i in range(1, len(_EPI_STATES) + 1)]
    states = list(_EPI_STATES)
    daily = np.stack([s.daily_deaths for s in simulated])

    rng = np.random.default_rng(seed)
    cov_rows = [
        _covariate_row(rng, 0.0, _EPI_POPULATION, START + dt.timedelta(days=10))
        for _ in fips
    ]

    buf = io.StringIO()
    buf.write("state,intervention,date\n")
    for m, st in enumerate(_EPI_STATES):
        buf.write(f"{st},primary,{_EPI_PRIMARY[m]}\n")
        buf.write(f"{st},stay_at_home,{_EPI_SAH[m]}\n")

    schedule = {st: (_EPI_PRIMARY[m], "held") for m, st in enumerate(_EPI_STATES)}

    truth = {
        "kind": "epi_recovery",
        "seed": seed,
        "alpha": list(EPI_TRUE_ALPHA),
        "beta": list(EPI_TRUE_BETA),
        "r0": list(EPI_TRUE_R0),
        "psi": EPI_TRUE_PSI,
        "seeds": list(EPI_TRUE_SEEDS),
        "kappa": 0.4,
        "gamma": 0.15,
        "ifr": 0.01,
        "population": _EPI_POPULATION,
        "states": list(_EPI_STATES),
    }
    return FixtureSet(
        kind="epi_recovery",
        seed=seed,
        deaths_csv=_deaths_csv(fips, states, daily),
        covariates_csv=_covariates_csv(fips, cov_rows),
        elections_csv=_elections_csv(schedule),
        interventions_csv=buf.getvalue(),
        truth=truth,
    )


def generate_fixture(kind: str, seed: int, effect: float = 0.005) -> FixtureSet:
    """Build a fixture in memory; see module docstring for kinds."""
    if kind not in FIXTURE_KINDS:
        raise InputError(f"unknown fixture kind {kind!r}; choose from {FIXTURE_KINDS}")
    if kind == "epi_recovery":
        return _epi_fixture(seed)
    return _matching_fixture(kind, seed, effect)


def make_fixture(kind: str, seed: int, out_dir, effect: float = 0.005) -> dict:
    """Write a fixture's input files to ``out_dir``; returns path map."""
    fx = generate_fixture(kind, seed, effect)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in fx.files().items():
        path = out / name
        path.write_text(text)
        paths[name] = str(path)
    return paths
