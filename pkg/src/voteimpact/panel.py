"""Ingestion of county death series, covariates, and election schedules.

Parses the documented CSV formats, cleans cumulative death counts into
daily counts, and joins everything into a rectangular analysis panel on a
contiguous daily calendar grid.  State-level aggregation for the epidemic
model also lives here.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from voteimpact.errors import InputError, ParseError

__all__ = [
    "CountySeries",
    "CovariateRecord",
    "TreatmentSchedule",
    "AnalysisPanel",
    "PanelConfig",
    "ParseResult",
    "parse_deaths",
    "parse_covariates",
    "parse_schedule",
    "parse_turnout",
    "parse_interventions",
    "clean_cumulative_to_daily",
    "death_rate_per_1000",
    "build_panel",
    "aggregate_to_state",
    "DEFAULT_EXCLUDED_STATES",
    "STATIC_COVARIATES",
]

# CA, TX, MA held primaries before the epidemic's material impact; the 15
# further states lack death data until after their primaries; CT reported
# incomplete recent data.  All are config defaults, overridable.
DEFAULT_EXCLUDED_STATES = (
    "CA", "TX", "MA",
    "AL", "AR", "ID", "ME", "MI", "MN", "MO", "MS",
    "NC", "ND", "OK", "TN", "VT", "VA",
    "CT",
)

DEFAULT_STUDY_START = dt.date(2020, 3, 1)
DEFAULT_STUDY_END = dt.date(2020, 8, 1)

VALID_STATUSES = ("held", "mail_in", "cancelled", "pre_covid")

# Static matching covariates, in the fixed column order used throughout.
# first_case_day is the first reported infection date as a day offset from
# the study start.  The time-varying cumulative death rate is appended as a
# tenth matching covariate by the matching module.
STATIC_COVARIATES = (
    "pct_black",
    "log_median_income",
    "pct_bachelors",
    "pop_density",
    "log_population",
    "pct_65_plus",
    "unemployment_rate",
    "trump_share_2016",
    "first_case_day",
)


def _parse_date(text: str, line: int | None = None) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise ParseError(f"malformed date {text!r}", line) from None


@dataclass(frozen=True)
class CountySeries:
    """Daily death series for one county on a contiguous calendar grid."""

    fips: str
    state: str
    dates: np.ndarray  # datetime64[D], step 1 day
    cumulative_deaths: np.ndarray
    daily_deaths: np.ndarray
    population: int | None = None

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        cum = np.asarray(self.cumulative_deaths, dtype=np.int64)
        daily = np.asarray(self.daily_deaths, dtype=np.int64)
        if not (len(dates) == len(cum) == len(daily)):
            raise InputError(f"{self.fips}: series lengths differ")
        if len(dates) > 1 and not np.all(np.diff(dates) == np.timedelta64(1, "D")):
            raise InputError(f"{self.fips}: dates are not contiguous daily steps")
        if np.any(daily < 0):
            raise InputError(f"{self.fips}: negative daily death count")
        if self.population is not None and self.population <= 0:
            raise InputError(f"{self.fips}: population must be positive")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "cumulative_deaths", cum)
        object.__setattr__(self, "daily_deaths", daily)


@dataclass(frozen=True)
class CovariateRecord:
    """Time-invariant county covariates; incomes and population are logged."""

    fips: str
    pct_black: float
    log_median_income: float
    pct_bachelors: float
    pop_density: float
    log_population: float
    pct_65_plus: float
    unemployment_rate: float
    trump_share_2016: float
    first_case_date: dt.date | None
    population: int

    def __post_init__(self):
        for name in ("pct_black", "pct_bachelors", "pct_65_plus",
                     "unemployment_rate", "trump_share_2016"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{self.fips}: {name}={v} outside [0, 1]")
        if self.pop_density <= 0:
            raise InputError(f"{self.fips}: pop_density must be positive")
        if self.population <= 0:
            raise InputError(f"{self.fips}: population must be positive")


@dataclass(frozen=True)
class TreatmentSchedule:
    """Primary date and status per state; onset is primary + 10 days."""

    entries: dict  # state -> (primary_date, status)

    def __post_init__(self):
        for state, (date, status) in self.entries.items():
            if status not in VALID_STATUSES:
                raise InputError(f"{state}: unknown primary status {status!r}")
            if not isinstance(date, dt.date):
                raise InputError(f"{state}: primary date must be a date")

    def status(self, state: str) -> str | None:
        entry = self.entries.get(state)
        return entry[1] if entry else None

    def primary_date(self, state: str) -> dt.date | None:
        entry = self.entries.get(state)
        return entry[0] if entry else None


@dataclass
class ParseResult:
    """Parsed county series plus the count of rows without a usable fips."""

    series: list
    dropped_rows: int = 0


def clean_cumulative_to_daily(cumulative) -> np.ndarray:
    """Convert a cumulative count series to daily counts.

    Declines in the cumulative series are reporting corrections and are
    marked as zero daily counts; the input is left unmodified.
    """
    cum = np.asarray(cumulative, dtype=np.int64)
    if cum.size == 0:
        raise InputError("cumulative series is empty")
    if np.any(cum < 0):
        raise InputError("negative cumulative count: corrupt input, not a decline")
    daily = np.diff(cum, prepend=0)
    return np.maximum(daily, 0)


def death_rate_per_1000(daily, population) -> np.ndarray:
    """Daily deaths per 1000 residents."""
    if population <= 0:
        raise InputError(f"population must be positive, got {population}")
    return 1000.0 * np.asarray(daily, dtype=float) / population


def parse_deaths(csv_stream) -> ParseResult:
    """Parse the `date,county,state,fips,cases,deaths` cumulative file.

    Rows without a fips (e.g. "Unknown" geography) are dropped and
    counted.  Gaps in a county's reporting are filled by carrying the
    cumulative count forward.  Duplicate (fips, date) rows are an error.
    """
    if isinstance(csv_stream, (str, bytes)):
        csv_stream = io.StringIO(csv_stream)
    reader = csv.DictReader(csv_stream)
    required = {"date", "county", "state", "fips", "deaths"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ParseError(f"deaths file must have columns {sorted(required)}")

    dropped = 0
    per_county: dict[str, dict] = {}
    for row in reader:
        line = reader.line_num
        fips = (row["fips"] or "").strip()
        if not fips:
            dropped += 1
            continue
        date = _parse_date(row["date"], line)
        try:
            deaths = int(row["deaths"])
        except (TypeError, ValueError):
            raise ParseError(f"non-integer deaths {row['deaths']!r}", line) from None
        if deaths < 0:
            raise ParseError(f"negative cumulative deaths {deaths}", line)
        rec = per_county.setdefault(fips, {"state": row["state"].strip(), "obs": {}})
        if date in rec["obs"]:
            raise ParseError(f"duplicate (fips, date) = ({fips}, {date})", line)
        rec["obs"][date] = deaths

    series = []
    for fips in sorted(per_county):
        rec = per_county[fips]
        obs = rec["obs"]
        first, last = min(obs), max(obs)
        dates = np.arange(np.datetime64(first, "D"), np.datetime64(last, "D") + 1)
        cum = np.empty(dates.size, dtype=np.int64)
        running = 0
        for i, d in enumerate(dates):
            day = d.astype(dt.date)
            if day in obs:
                running = obs[day]
            cum[i] = running
        daily = clean_cumulative_to_daily(cum)
        series.append(
            CountySeries(fips, rec["state"], dates, cum, daily)
        )
    return ParseResult(series=series, dropped_rows=dropped)


def parse_covariates(csv_stream) -> dict:
    """Parse covariates.csv into records keyed by fips.

    Raw median_income and population are logged internally; an empty
    first_case_date marks the covariate as missing (the county is later
    dropped by build_panel).
    """
    if isinstance(csv_stream, (str, bytes)):
        csv_stream = io.StringIO(csv_stream)
    reader = csv.DictReader(csv_stream)
    required = {
        "fips", "pct_black", "median_income", "pct_bachelors", "pop_density",
        "population", "pct_65_plus", "unemployment_rate", "trump_share_2016",
        "first_case_date",
    }
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ParseError(f"covariates file must have columns {sorted(required)}")

    records = {}
    for row in reader:
        line = reader.line_num
        fips = row["fips"].strip()
        if fips in records:
            raise ParseError(f"duplicate covariate row for fips {fips}", line)
        try:
            income = float(row["median_income"])
            population = int(row["population"])
            if income <= 0:
                raise ParseError(f"median_income must be positive", line)
            first_case = row["first_case_date"].strip()
            records[fips] = CovariateRecord(
                fips=fips,
                pct_black=float(row["pct_black"]),
                log_median_income=math.log(income),
                pct_bachelors=float(row["pct_bachelors"]),
                pop_density=float(row["pop_density"]),
                log_population=math.log(population),
                pct_65_plus=float(row["pct_65_plus"]),
                unemployment_rate=float(row["unemployment_rate"]),
                trump_share_2016=float(row["trump_share_2016"]),
                first_case_date=_parse_date(first_case, line) if first_case else None,
                population=population,
            )
        except ValueError:
            raise ParseError("malformed numeric covariate value", line) from None
    return records


def parse_schedule(csv_stream) -> TreatmentSchedule:
    """Parse elections.csv (`state,primary_date,status`)."""
    if isinstance(csv_stream, (str, bytes)):
        csv_stream = io.StringIO(csv_stream)
    reader = csv.DictReader(csv_stream)
    required = {"state", "primary_date", "status"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ParseError(f"elections file must have columns {sorted(required)}")
    entries = {}
    for row in reader:
        line = reader.line_num
        state = row["state"].strip()
        if state in entries:
            raise ParseError(f"state {state} appears more than once", line)
        entries[state] = (_parse_date(row["primary_date"], line), row["status"].strip())
    return TreatmentSchedule(entries)


def parse_turnout(csv_stream) -> dict:
    """Parse optional turnout.csv (`fips,in_person_turnout`)."""
    if isinstance(csv_stream, (str, bytes)):
        csv_stream = io.StringIO(csv_stream)
    reader = csv.DictReader(csv_stream)
    required = {"fips", "in_person_turnout"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ParseError(f"turnout file must have columns {sorted(required)}")
    out = {}
    for row in reader:
        line = reader.line_num
        try:
            out[row["fips"].strip()] = float(row["in_person_turnout"])
        except ValueError:
            raise ParseError("malformed turnout value", line) from None
    return out


VALID_INTERVENTIONS = ("primary", "stay_at_home")


def parse_interventions(csv_stream) -> dict:
    """Parse interventions.csv (`state,intervention,date`).

    Returns state -> {intervention name -> date}.  Unknown intervention
    names and duplicate (state, intervention) pairs are errors.
    """
    if isinstance(csv_stream, (str, bytes)):
        csv_stream = io.StringIO(csv_stream)
    reader = csv.DictReader(csv_stream)
    required = {"state", "intervention", "date"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ParseError(f"interventions file must have columns {sorted(required)}")
    out: dict[str, dict] = {}
    for row in reader:
        line = reader.line_num
        state = row["state"].strip()
        name = row["intervention"].strip()
        if name not in VALID_INTERVENTIONS:
            raise ParseError(
                f"unknown intervention {name!r}; expected one of {VALID_INTERVENTIONS}", line
            )
        per_state = out.setdefault(state, {})
        if name in per_state:
            raise ParseError(f"duplicate intervention ({state}, {name})", line)
        per_state[name] = _parse_date(row["date"], line)
    return out


@dataclass(frozen=True)
class PanelConfig:
    study_start: dt.date = DEFAULT_STUDY_START
    study_end: dt.date = DEFAULT_STUDY_END
    excluded_states: tuple = DEFAULT_EXCLUDED_STATES


@dataclass
class AnalysisPanel:
    """Rectangular county panel over a shared daily grid.

    Row order is fips-ascending.  ``outcome`` is the daily death rate per
    1000; ``cum_rate`` is the cumulative death rate per 1000 (the
    time-varying matching covariate).
    """

    fips: np.ndarray            # (n,) str
    state: np.ndarray           # (n,) str
    dates: np.ndarray           # (T,) datetime64[D]
    daily: np.ndarray           # (n, T) int
    cumulative: np.ndarray      # (n, T) int
    population: np.ndarray      # (n,) int
    outcome: np.ndarray         # (n, T) float, deaths per 1000
    cum_rate: np.ndarray        # (n, T) float, cumulative deaths per 1000
    static_cov: np.ndarray      # (n, len(STATIC_COVARIATES)) float
    schedule: TreatmentSchedule
    study_start: dt.date
    study_end: dt.date
    turnout: np.ndarray | None = None   # (n,) float, NaN when unknown
    build_report: dict = field(default_factory=dict)

    @property
    def n_counties(self) -> int:
        return self.fips.size

    @property
    def n_days(self) -> int:
        return self.dates.size

    def day_index(self, date: dt.date) -> int:
        """Day offset of ``date`` from the study start (may fall outside the grid)."""
        return (date - self.study_start).days

    def subset(self, mask) -> "AnalysisPanel":
        mask = np.asarray(mask)
        return AnalysisPanel(
            fips=self.fips[mask],
            state=self.state[mask],
            dates=self.dates,
            daily=self.daily[mask],
            cumulative=self.cumulative[mask],
            population=self.population[mask],
            outcome=self.outcome[mask],
            cum_rate=self.cum_rate[mask],
            static_cov=self.static_cov[mask],
            schedule=self.schedule,
            study_start=self.study_start,
            study_end=self.study_end,
            turnout=None if self.turnout is None else self.turnout[mask],
            build_report=self.build_report,
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-format serialization; deterministic given identical inputs."""
        n, T = self.daily.shape
        return pd.DataFrame(
            {
                "fips": np.repeat(self.fips, T),
                "state": np.repeat(self.state, T),
                "date": np.tile(self.dates, n),
                "daily_deaths": self.daily.ravel(),
                "cumulative_deaths": self.cumulative.ravel(),
                "death_rate_per_1000": self.outcome.ravel(),
            }
        )


def _align_series(series: CountySeries, start: dt.date, end: dt.date):
    """Clip/extend a county series to the [start, end] grid.

    Days before the first report are zero-filled; days after the last
    report carry the cumulative count forward (zero daily deaths).
    """
    T = (end - start).days + 1
    cum = np.zeros(T, dtype=np.int64)
    first = series.dates[0].astype(dt.date)
    offset = (first - start).days
    src = series.cumulative_deaths
    for j in range(src.size):
        k = offset + j
        if 0 <= k < T:
            cum[k] = src[j]
    # carry forward beyond the last report
    last_k = offset + src.size - 1
    if last_k < 0:
        cum[:] = src[-1]
    elif last_k < T - 1:
        cum[last_k + 1:] = src[-1]
    # zero before the first report is already in place
    daily = clean_cumulative_to_daily(cum)
    return cum, daily


def build_panel(
    parsed: ParseResult | list,
    covariates: dict,
    schedule: TreatmentSchedule,
    config: PanelConfig = PanelConfig(),
    turnout: dict | None = None,
) -> AnalysisPanel:
    """Join deaths, covariates, and the election schedule into a panel.

    Excluded states are removed; counties with any missing covariate are
    dropped and listed in the build report.  Output series are aligned to
    the study window, zero-filled before each county's first report.
    """
    series = parsed.series if isinstance(parsed, ParseResult) else list(parsed)
    excluded = set(config.excluded_states)
    start, end = config.study_start, config.study_end
    if end <= start:
        raise InputError("study_end must be after study_start")

    kept = []
    dropped_missing_cov = []
    excluded_counties = 0
    for s in sorted(series, key=lambda s: s.fips):
        if s.state in excluded:
            excluded_counties += 1
            continue
        cov = covariates.get(s.fips)
        if cov is None or cov.first_case_date is None:
            dropped_missing_cov.append(s.fips)
            continue
        kept.append((s, cov))

    if not kept:
        raise InputError("panel is empty after exclusions and covariate joins")

    n = len(kept)
    T = (end - start).days + 1
    dates = np.arange(np.datetime64(start, "D"), np.datetime64(end, "D") + 1)
    daily = np.zeros((n, T), dtype=np.int64)
    cumulative = np.zeros((n, T), dtype=np.int64)
    population = np.zeros(n, dtype=np.int64)
    static = np.zeros((n, len(STATIC_COVARIATES)), dtype=float)
    fips = np.array([s.fips for s, _ in kept])
    state = np.array([s.state for s, _ in kept])

    for i, (s, cov) in enumerate(kept):
        cumulative[i], daily[i] = _align_series(s, start, end)
        population[i] = cov.population
        static[i] = [
            cov.pct_black,
            cov.log_median_income,
            cov.pct_bachelors,
            cov.pop_density,
            cov.log_population,
            cov.pct_65_plus,
            cov.unemployment_rate,
            cov.trump_share_2016,
            float((cov.first_case_date - start).days),
        ]

    outcome = 1000.0 * daily / population[:, None]
    cum_rate = 1000.0 * np.cumsum(daily, axis=1) / population[:, None]

    turnout_arr = None
    if turnout is not None:
        turnout_arr = np.array([turnout.get(f, np.nan) for f in fips])

    report = {
        "n_counties": n,
        "excluded_state_counties": excluded_counties,
        "dropped_missing_covariates": dropped_missing_cov,
    }
    if isinstance(parsed, ParseResult):
        report["dropped_rows_no_fips"] = parsed.dropped_rows

    return AnalysisPanel(
        fips=fips,
        state=state,
        dates=dates,
        daily=daily,
        cumulative=cumulative,
        population=population,
        outcome=outcome,
        cum_rate=cum_rate,
        static_cov=static,
        schedule=schedule,
        study_start=start,
        study_end=end,
        turnout=turnout_arr,
        build_report=report,
    )


def aggregate_to_state(panel: AnalysisPanel) -> pd.DataFrame:
    """Sum daily county death counts to state level (dates x states)."""
    if panel.n_counties == 0:
        raise InputError("cannot aggregate an empty panel")
    states = sorted(set(panel.state))
    data = {
        st: panel.daily[panel.state == st].sum(axis=0) for st in states
    }
    return pd.DataFrame(data, index=pd.DatetimeIndex(panel.dates, name="date"))
