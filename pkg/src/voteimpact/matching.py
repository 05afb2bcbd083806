"""Matched generalized difference-in-differences ATT estimation.

Pipeline: treatment-onset detection, exact matching on treatment history,
Mahalanobis refinement over a pre-treatment lag window, the ATT curve
over post-election leads, bootstrap intervals, covariate balance
diagnostics, and the robustness filters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from voteimpact.errors import InputError
from voteimpact.panel import AnalysisPanel, STATIC_COVARIATES

__all__ = [
    "MatchingConfig",
    "MatchedSet",
    "MatchingResult",
    "AttCurve",
    "BootstrapResult",
    "BalanceTable",
    "onset_indicators",
    "exact_match_candidates",
    "mahalanobis_refine",
    "run_matching",
    "att_curve",
    "bootstrap_ci",
    "balance_table",
    "robustness_filter",
]

# Sentinel onset for counties that never change treatment status inside or
# after the study window; compares greater than any reachable day index.
NO_ONSET = np.iinfo(np.int64).max // 2

MATCH_COVARIATES = STATIC_COVARIATES + ("cum_death_rate",)

def _nanmean(a, axis=None):
    """np.nanmean without the all-NaN warning; NaN marks an empty slice."""
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Mean of empty slice")
        return np.nanmean(a, axis=axis)


def _nanquantile(a, q, axis=None):
    """np.nanquantile without the all-NaN warning (NaN columns stay NaN)."""
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="All-NaN slice encountered")
        return np.nanquantile(a, q, axis=axis)


ROBUSTNESS_MODES = (
    "exclude_nv_sc",
    "turnout_above_p50",
    "turnout_below_p50",
    "turnout_above_p25",
    "turnout_below_p25",
)


@dataclass(frozen=True)
class MatchingConfig:
    lag: int = 20                      # pre-treatment matching window L
    k: int = 5                         # refined matches per treated unit
    leads: tuple = tuple(range(10, 37))  # days after the primary election
    treatment_lag: int = 10            # primary date -> treatment onset
    window: tuple = (13, 32)           # expected-death window, after primary

    @property
    def max_onset_lead(self) -> int:
        return max(self.leads) - self.treatment_lag


@dataclass
class MatchedSet:
    """One treated (county, onset) with its refined controls."""

    treated_idx: int
    treated_fips: str
    onset: int                 # day index of treatment onset
    control_idx: np.ndarray    # refined matches, distance-ranked
    weights: np.ndarray        # uniform over controls, sums to 1
    distances: np.ndarray      # averaged Mahalanobis distance per control
    candidate_idx: np.ndarray  # full exact-match candidate set


@dataclass
class MatchingResult:
    matched_sets: list
    config: MatchingConfig
    excluded: dict = field(default_factory=dict)
    ridge_events: int = 0


@dataclass
class OnsetIndicators:
    """Treatment onsets per county; NO_ONSET where none occurs."""

    onset: np.ndarray          # (n,) int day index
    treated_idx: np.ndarray    # counties with a usable in-window onset
    excluded: dict = field(default_factory=dict)


def onset_indicators(panel: AnalysisPanel, config: MatchingConfig = MatchingConfig()) -> OnsetIndicators:
    """Locate treatment onsets (primary date + lag) for held primaries.

    Counties whose onset falls outside the study window, or too early to
    leave a full matching history, are excluded from the treated set and
    reported; they remain unusable as controls if already treated.
    """
    n = panel.n_counties
    onset = np.full(n, NO_ONSET, dtype=np.int64)
    treated = []
    excluded = {"onset_outside_window": [], "insufficient_history": []}
    for i in range(n):
        status = panel.schedule.status(panel.state[i])
        if status != "held":
            continue
        primary = panel.schedule.primary_date(panel.state[i])
        t = panel.day_index(primary) + config.treatment_lag
        onset[i] = t
        if t < 0 or t >= panel.n_days:
            excluded["onset_outside_window"].append(panel.fips[i])
            continue
        if t - config.lag < 0:
            excluded["insufficient_history"].append(panel.fips[i])
            continue
        treated.append(i)
    return OnsetIndicators(onset=onset, treated_idx=np.array(treated, dtype=np.int64), excluded=excluded)


def exact_match_candidates(
    treated_idx: int,
    onset_t: int,
    onsets: np.ndarray,
    config: MatchingConfig = MatchingConfig(),
) -> np.ndarray:
    """Counties whose treatment history is all-zero through the last lead.

    A candidate's own onset (if any) must occur strictly after
    ``onset_t + F_max``; never-treated counties always qualify.
    """
    cutoff = onset_t + config.max_onset_lead
    mask = onsets > cutoff
    mask[treated_idx] = False
    return np.flatnonzero(mask)


def _covariate_matrix(panel: AnalysisPanel, day: int) -> np.ndarray:
    """Static covariates plus the cumulative death rate at ``day``."""
    return np.column_stack([panel.static_cov, panel.cum_rate[:, day]])


def _pool_inverse_factor(values: np.ndarray):
    """Cholesky factor of the candidate-pool covariance (ridged if singular)."""
    ridged = False
    if values.shape[0] < 2:
        # degenerate pool: covariance undefined, fall back to identity
        return np.eye(values.shape[1]), True
    sigma = np.cov(values, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        dim = sigma.shape[0]
        ridge = 1e-8 * np.trace(sigma) / dim
        if ridge <= 0:
            ridge = 1e-8
        sigma = sigma + ridge * np.eye(dim)
        chol = np.linalg.cholesky(sigma)
        ridged = True
    return chol, ridged


def mahalanobis_refine(
    treated_idx: int,
    onset_t: int,
    candidates: np.ndarray,
    panel: AnalysisPanel,
    config: MatchingConfig = MatchingConfig(),
):
    """Keep the k candidates closest in lag-averaged Mahalanobis distance.

    The scale at each lag day is the sample covariance of the candidate
    pool's covariates on that day; singular covariances receive a ridge of
    1e-8 * trace / dim.  Ties are broken by fips ascending.  Returns the
    matched set and the number of ridge fallbacks.
    """
    if candidates.size == 0:
        raise InputError("mahalanobis_refine requires at least one candidate")
    L = config.lag
    dists = np.zeros(candidates.size)
    ridge_events = 0
    for l in range(1, L + 1):
        day = onset_t - l
        V = _covariate_matrix(panel, day)
        pool = V[candidates]
        chol, ridged = _pool_inverse_factor(pool)
        ridge_events += ridged
        diff = pool - V[treated_idx]
        # solve chol z = diff^T; distance = ||z||_2 per candidate
        zz = solve_triangular(chol, diff.T, lower=True)
        dists += np.sqrt(np.sum(zz**2, axis=0))
    dists /= L

    order = np.lexsort((panel.fips[candidates], dists))
    keep = order[: config.k]
    controls = candidates[keep]
    w = np.full(controls.size, 1.0 / controls.size)
    matched = MatchedSet(
        treated_idx=treated_idx,
        treated_fips=panel.fips[treated_idx],
        onset=onset_t,
        control_idx=controls,
        weights=w,
        distances=dists[keep],
        candidate_idx=candidates,
    )
    return matched, ridge_events


def run_matching(panel: AnalysisPanel, config: MatchingConfig = MatchingConfig()) -> MatchingResult:
    """Full matching pass: onsets, exact candidates, refinement."""
    ind = onset_indicators(panel, config)
    sets = []
    excluded = dict(ind.excluded)
    excluded["no_candidates"] = []
    ridge_events = 0
    for i in ind.treated_idx:
        cands = exact_match_candidates(i, ind.onset[i], ind.onset, config)
        if cands.size == 0:
            excluded["no_candidates"].append(panel.fips[i])
            continue
        matched, ridged = mahalanobis_refine(i, ind.onset[i], cands, panel, config)
        ridge_events += ridged
        sets.append(matched)
    return MatchingResult(matched_sets=sets, config=config, excluded=excluded, ridge_events=ridge_events)


@dataclass
class AttCurve:
    """ATT estimates per lead day after the primary election."""

    leads: np.ndarray
    estimate: np.ndarray
    n_treated: np.ndarray
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None


def _contributions(matched_sets, panel: AnalysisPanel, config: MatchingConfig) -> np.ndarray:
    """Per-(treated, lead) DiD contributions; NaN where the lead leaves the grid."""
    leads = np.asarray(config.leads)
    C = np.full((len(matched_sets), leads.size), np.nan)
    Y = panel.outcome
    for s_idx, ms in enumerate(matched_sets):
        t = ms.onset
        base_t = Y[ms.treated_idx, t - 1]
        base_c = Y[ms.control_idx, t - 1]
        for j, f in enumerate(leads):
            day = t + (f - config.treatment_lag)
            if day >= panel.n_days:
                continue
            treated_diff = Y[ms.treated_idx, day] - base_t
            control_diff = ms.weights @ (Y[ms.control_idx, day] - base_c)
            C[s_idx, j] = treated_diff - control_diff
    return C


def att_curve(result: MatchingResult, panel: AnalysisPanel) -> AttCurve:
    """Average DiD contributions across treated units, per lead day."""
    if not result.matched_sets:
        raise InputError("no matched sets: cannot estimate the ATT")
    C = _contributions(result.matched_sets, panel, result.config)
    n_treated = np.sum(~np.isnan(C), axis=0)
    est = _nanmean(C, axis=0)
    return AttCurve(
        leads=np.asarray(result.config.leads),
        estimate=est,
        n_treated=n_treated,
    )


@dataclass
class BootstrapResult:
    leads: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    window_estimate: float
    window_ci: tuple
    level: float
    n_replicates: int


def bootstrap_ci(
    result: MatchingResult,
    panel: AnalysisPanel,
    B: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapResult:
    """Percentile bootstrap over treated units (with their matched sets).

    A single seed expands into one substream per replicate, so the result
    does not depend on evaluation order.  Also reports the interval for
    the ATT averaged over the expected-death window.
    """
    if B < 100:
        raise InputError("bootstrap requires B >= 100 replicates")
    if not result.matched_sets:
        raise InputError("no matched sets: cannot bootstrap")
    config = result.config
    C = _contributions(result.matched_sets, panel, config)
    n = C.shape[0]
    leads = np.asarray(config.leads)
    in_window = (leads >= config.window[0]) & (leads <= config.window[1])

    children = np.random.SeedSequence(seed).spawn(B)
    est = np.full((B, leads.size), np.nan)
    win = np.full(B, np.nan)
    for b in range(B):
        rng = np.random.default_rng(children[b])
        idx = rng.integers(0, n, size=n)
        sample = C[idx]
        per_lead = _nanmean(sample, axis=0)
        est[b] = per_lead
        win[b] = _nanmean(per_lead[in_window])

    alpha = 1.0 - level
    lo = _nanquantile(est, alpha / 2, axis=0)
    hi = _nanquantile(est, 1 - alpha / 2, axis=0)
    point = _nanmean(C, axis=0)
    window_est = float(_nanmean(point[in_window]))
    window_ci = (
        float(_nanquantile(win, alpha / 2)),
        float(_nanquantile(win, 1 - alpha / 2)),
    )
    return BootstrapResult(
        leads=leads,
        ci_low=lo,
        ci_high=hi,
        window_estimate=window_est,
        window_ci=window_ci,
        level=level,
        n_replicates=B,
    )


@dataclass
class BalanceTable:
    """Standardized mean differences per covariate and lag day."""

    covariates: tuple
    lags: np.ndarray
    smd_before: np.ndarray  # (n_cov, L), candidate sets with uniform weights
    smd_after: np.ndarray   # (n_cov, L), refined sets
    flagged: list = field(default_factory=list)

    def mean_abs(self, which: str = "after") -> np.ndarray:
        """Mean |SMD| over lags, per covariate."""
        table = self.smd_after if which == "after" else self.smd_before
        return _nanmean(np.abs(table), axis=1)


def _balance_side(matched_sets, panel, L, refined: bool) -> np.ndarray:
    n_cov = len(MATCH_COVARIATES)
    out = np.full((n_cov, L), np.nan)
    n1 = len(matched_sets)
    for l in range(1, L + 1):
        V = {}
        treated_vals = np.empty((n1, n_cov))
        diffs = np.empty((n1, n_cov))
        for s_idx, ms in enumerate(matched_sets):
            day = ms.onset - l
            if day not in V:
                V[day] = _covariate_matrix(panel, day)
            Vd = V[day]
            treated_vals[s_idx] = Vd[ms.treated_idx]
            if refined:
                ctrl = ms.weights @ Vd[ms.control_idx]
            else:
                ctrl = Vd[ms.candidate_idx].mean(axis=0)
            diffs[s_idx] = Vd[ms.treated_idx] - ctrl
        sd = np.std(treated_vals, axis=0, ddof=1) if n1 > 1 else np.zeros(n_cov)
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.where(sd > 0, diffs.mean(axis=0) / sd, np.nan)
        out[:, l - 1] = b
    return out


def balance_table(result: MatchingResult, panel: AnalysisPanel, L: int | None = None) -> BalanceTable:
    """Average SMDs before (all candidates) and after refinement.

    The denominator is the standard deviation of the covariate over
    treated observations at the same lag; zero denominators flag the
    covariate and leave the entry undefined.
    """
    if not result.matched_sets:
        raise InputError("no matched sets: cannot compute balance")
    L = L if L is not None else result.config.lag
    before = _balance_side(result.matched_sets, panel, L, refined=False)
    after = _balance_side(result.matched_sets, panel, L, refined=True)
    flagged = [
        MATCH_COVARIATES[j]
        for j in range(len(MATCH_COVARIATES))
        if np.any(np.isnan(before[j])) or np.any(np.isnan(after[j]))
    ]
    return BalanceTable(
        covariates=MATCH_COVARIATES,
        lags=np.arange(1, L + 1),
        smd_before=before,
        smd_after=after,
        flagged=flagged,
    )


def robustness_filter(panel: AnalysisPanel, mode: str) -> AnalysisPanel:
    """Apply one of the sensitivity filters and return the reduced panel.

    Turnout modes drop treated counties on the stated side of the
    percentile threshold, computed over the aggregate turnout distribution
    of all counties in the input panel.  Reapplying the same mode is a
    no-op (recorded in the build report).
    """
    if mode not in ROBUSTNESS_MODES:
        raise InputError(f"unknown robustness mode {mode!r}")
    applied = panel.build_report.get("robustness_modes", ())
    if mode in applied:
        return panel

    if mode == "exclude_nv_sc":
        mask = ~np.isin(panel.state, ("NV", "SC"))
    else:
        if panel.turnout is None:
            raise InputError(f"mode {mode!r} requires turnout data")
        turnout = panel.turnout
        known = np.isfinite(turnout)
        if not np.any(known):
            raise InputError("no county has turnout data")
        pct = 50 if mode.endswith("p50") else 25
        threshold = np.percentile(turnout[known], pct)
        held = np.array(
            [panel.schedule.status(st) == "held" for st in panel.state]
        )
        if mode.startswith("turnout_above"):
            keep_treated = known & (turnout >= threshold)
        else:
            keep_treated = known & (turnout < threshold)
        mask = ~held | keep_treated

    out = panel.subset(mask)
    if not np.any(mask):
        raise InputError(f"robustness filter {mode!r} removed every county")
    out.build_report = dict(panel.build_report)
    out.build_report["robustness_modes"] = tuple(applied) + (mode,)
    return out
