"""Semi-mechanistic renewal-equation model of state-level transmissibility.

Reproduction rate regressed on binary interventions, infections from the
renewal recursion with susceptible depletion, deaths by convolution with
the infection-to-death distribution, and a negative-binomial observation
model.  This module holds the reference (numpy/scipy) implementations;
the MCMC sampler has a compiled fast path in :mod:`voteimpact.sampler`
checked against these.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from voteimpact.errors import InputError

__all__ = [
    "StateData",
    "EpiParams",
    "LatentTrajectories",
    "N_SEED_DAYS",
    "N_INTERVENTIONS",
    "rt_series",
    "expected_infections",
    "expected_deaths",
    "nb_loglik",
    "log_prior",
    "simulate_forward",
    "build_indicators",
]

N_SEED_DAYS = 6
N_INTERVENTIONS = 2  # primary election, stay-at-home order
INTERVENTION_NAMES = ("primary", "stay_at_home")

# Prior hyperparameters
R0_PRIOR_MEAN = 3.28
KAPPA_SD = 0.5
ALPHA_SHAPE = 1.0 / N_INTERVENTIONS
ALPHA_RATE = 1.0
ALPHA_SHIFT = -np.log(1.05) / N_INTERVENTIONS
GAMMA_SD = 0.2
IFR_NOISE_MEAN = 1.0
IFR_NOISE_SD = 0.1
PSI_SD = 5.0
SEED_HYPER_MEAN = 30.0  # mean of the exponential prior on the seed scale


@dataclass
class StateData:
    """Observed inputs for one state."""

    state: str
    dates: np.ndarray            # (T,) datetime64[D]
    daily_deaths: np.ndarray     # (T,) int
    population: float
    ifr: float
    intervention_dates: dict     # name -> date or None

    def __post_init__(self):
        self.daily_deaths = np.asarray(self.daily_deaths, dtype=np.int64)
        if np.any(self.daily_deaths < 0):
            raise InputError(f"{self.state}: negative daily death count")
        if self.population <= 0:
            raise InputError(f"{self.state}: population must be positive")
        if not 0 <= self.ifr <= 1:
            raise InputError(f"{self.state}: ifr must lie in [0, 1]")

    @property
    def n_days(self) -> int:
        return self.daily_deaths.size


def build_indicators(data: StateData) -> tuple[np.ndarray, np.ndarray]:
    """Intervention indicator matrix I (K, T) and the last-intervention flag.

    Indicators switch on at the intervention date and persist.  The
    state-specific effect attaches to whichever present intervention was
    implemented later (ties go to the later name in the fixed ordering).
    """
    T = data.n_days
    start = data.dates[0].astype(dt.date)
    I = np.zeros((N_INTERVENTIONS, T), dtype=np.float64)
    onsets = {}
    for k, name in enumerate(INTERVENTION_NAMES):
        date = data.intervention_dates.get(name)
        if date is None:
            continue
        offset = (date - start).days
        if offset < T:
            I[k, max(offset, 0):] = 1.0
        onsets[k] = offset
    i_star = np.zeros(T, dtype=np.float64)
    if onsets:
        last_k = max(onsets, key=lambda k: (onsets[k], k))
        i_star[:] = I[last_k]
    return I, i_star


@dataclass
class EpiParams:
    """All latent quantities of the renewal model, for M states."""

    r0: np.ndarray          # (M,)
    kappa: float
    alpha: np.ndarray       # (K,)
    beta: np.ndarray        # (M,)
    gamma: float
    ifr_noise: np.ndarray   # (M,)
    psi: float
    seeds: np.ndarray       # (M,) initial daily infections, first 6 days
    seed_scale: float       # mean of the exponential seed prior

    def __post_init__(self):
        self.r0 = np.atleast_1d(np.asarray(self.r0, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.ifr_noise = np.atleast_1d(np.asarray(self.ifr_noise, dtype=float))
        self.seeds = np.atleast_1d(np.asarray(self.seeds, dtype=float))

    @property
    def n_states(self) -> int:
        return self.r0.size


@dataclass
class LatentTrajectories:
    rt: np.ndarray          # (T,)
    infections: np.ndarray  # (T,)
    deaths: np.ndarray      # (T,)


def rt_series(r0: float, alpha: np.ndarray, beta: float, indicators: np.ndarray, i_star: np.ndarray) -> np.ndarray:
    """Reproduction rate under active interventions (closed form)."""
    alpha = np.asarray(alpha, dtype=float)
    exponent = alpha @ indicators + beta * i_star
    return r0 * np.exp(-exponent)


def expected_infections(
    rt: np.ndarray,
    g_pmf: np.ndarray,
    seed_infections: float,
    population: float,
    n_seed_days: int = N_SEED_DAYS,
) -> np.ndarray:
    """Renewal recursion with susceptible depletion.

    The first ``n_seed_days`` days are pinned at ``seed_infections``; each
    later day is (susceptible fraction) * R_t * sum of past infections
    weighted by the generation-interval pmf.  The depletion factor is
    clamped at zero once cumulative infections reach the population.
    """
    T = rt.size
    g = np.asarray(g_pmf, dtype=float)
    c = np.zeros(T)
    c[: min(n_seed_days, T)] = seed_infections
    cum = float(c[: min(n_seed_days, T)].sum())
    for t in range(n_seed_days, T):
        lag = min(t, g.size - 1)
        # force = sum_{tau < t} c_tau * g_{t - tau}
        force = float(c[t - lag : t] @ g[lag:0:-1]) if lag > 0 else 0.0
        depletion = max(0.0, 1.0 - cum / population)
        # cap at the remaining susceptibles so cumulative infections can
        # never exceed the population
        c[t] = max(0.0, min(depletion * rt[t] * force, population - cum))
        cum += c[t]
    return c


def expected_deaths(infections: np.ndarray, ifr_star: float, pi_pmf: np.ndarray) -> np.ndarray:
    """Convolve past infections with the infection-to-death distribution."""
    T = infections.size
    pi = np.asarray(pi_pmf, dtype=float).copy()
    if pi.size:
        pi[0] = 0.0  # deaths occur strictly after the day of infection
    full = np.convolve(infections, pi)[:T]
    return ifr_star * full


def nb_loglik(observed: np.ndarray, expected: np.ndarray, psi: float) -> float:
    """Negative-binomial log-likelihood with mean d and variance d + d^2/psi."""
    obs = np.asarray(observed)
    if np.any(obs < 0):
        raise InputError("negative observed death count")
    if psi <= 0:
        raise InputError("dispersion psi must be positive")
    d = np.maximum(np.asarray(expected, dtype=float), 1e-10)
    p = psi / (psi + d)
    return float(stats.nbinom.logpmf(obs, psi, p).sum())


def _halfnorm_logpdf(x: float, sd: float) -> float:
    if x < 0:
        return -np.inf
    return float(np.log(2.0) + stats.norm.logpdf(x, 0.0, sd))


def _truncnorm_pos_logpdf(x, mean, sd) -> float:
    """Normal(mean, sd) truncated to x > 0, including the normalizer."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if sd <= 0 or np.any(x <= 0):
        return -np.inf
    log_z = stats.norm.logsf(0.0, mean, sd)
    return float(np.sum(stats.norm.logpdf(x, mean, sd) - log_z))


def log_prior(params: EpiParams) -> float:
    """Joint log prior density over all model parameters."""
    p = params
    out = float(stats.norm.logpdf(p.kappa, 0.0, KAPPA_SD))

    kappa_abs = abs(p.kappa)
    out += _truncnorm_pos_logpdf(p.r0, R0_PRIOR_MEAN, kappa_abs)

    shifted = p.alpha - ALPHA_SHIFT
    if np.any(shifted <= 0):
        return -np.inf
    out += float(
        np.sum(stats.gamma.logpdf(shifted, ALPHA_SHAPE, scale=1.0 / ALPHA_RATE))
    )

    out += _halfnorm_logpdf(p.gamma, GAMMA_SD)
    if p.gamma <= 0:
        return -np.inf
    out += float(np.sum(stats.norm.logpdf(p.beta, 0.0, p.gamma)))

    out += _truncnorm_pos_logpdf(p.ifr_noise, IFR_NOISE_MEAN, IFR_NOISE_SD) if p.ifr_noise.size else 0.0
    out += _halfnorm_logpdf(p.psi, PSI_SD)

    if p.seed_scale <= 0 or np.any(p.seeds <= 0):
        return -np.inf
    out += float(np.sum(stats.expon.logpdf(p.seeds, scale=p.seed_scale)))
    out += float(stats.expon.logpdf(p.seed_scale, scale=SEED_HYPER_MEAN))
    return out


def state_trajectories(
    params: EpiParams,
    m: int,
    data: StateData,
    g_pmf: np.ndarray,
    pi_pmf: np.ndarray,
) -> LatentTrajectories:
    """Latent Rt, infections, and expected deaths for state index m."""
    I, i_star = build_indicators(data)
    rt = rt_series(params.r0[m], params.alpha, params.beta[m], I, i_star)
    c = expected_infections(rt, g_pmf, params.seeds[m], data.population)
    ifr_star = data.ifr * params.ifr_noise[m]
    d = expected_deaths(c, ifr_star, pi_pmf)
    return LatentTrajectories(rt=rt, infections=c, deaths=d)


def simulate_forward(
    params: EpiParams,
    states: list,
    g_pmf: np.ndarray,
    pi_pmf: np.ndarray,
    seed: int = 0,
) -> list:
    """Generate synthetic StateData from the model equations.

    Latent infections and expected deaths are deterministic given the
    parameters; observed deaths are negative-binomial draws around the
    expectation.  ``states`` carries the per-state configuration (dates,
    population, ifr, intervention dates); its death counts are ignored.
    """
    rng = np.random.default_rng(seed)
    out = []
    for m, template in enumerate(states):
        traj = state_trajectories(params, m, template, g_pmf, pi_pmf)
        d = np.maximum(traj.deaths, 1e-10)
        p = params.psi / (params.psi + d)
        observed = rng.negative_binomial(params.psi, p)
        out.append(
            StateData(
                state=template.state,
                dates=template.dates,
                daily_deaths=observed,
                population=template.population,
                ifr=template.ifr,
                intervention_dates=dict(template.intervention_dates),
            )
        )
    return out
