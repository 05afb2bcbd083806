"""Adaptive random-walk Metropolis sampler for the renewal model.

Parameters are sampled on log/identity transformed scales with
per-parameter proposal widths tuned during warmup toward a 20-40%
acceptance window.  The log-posterior is compiled with numba; its
agreement with the reference implementations in
:mod:`voteimpact.epimodel` is covered by tests.

Chains draw their seeds from independent substreams of one master seed,
so runs are reproducible and chain order is immaterial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from voteimpact import epimodel
from voteimpact.epimodel import (
    ALPHA_RATE,
    ALPHA_SHAPE,
    ALPHA_SHIFT,
    GAMMA_SD,
    IFR_NOISE_MEAN,
    IFR_NOISE_SD,
    KAPPA_SD,
    N_INTERVENTIONS,
    N_SEED_DAYS,
    PSI_SD,
    R0_PRIOR_MEAN,
    SEED_HYPER_MEAN,
    EpiParams,
    StateData,
    build_indicators,
)
from voteimpact.errors import InputError

__all__ = [
    "SamplerConfig",
    "PosteriorDraws",
    "sample_posterior",
    "param_names",
    "pack_params",
    "unpack_params",
    "log_posterior",
]

_SQRT2 = math.sqrt(2.0)
_LOG2 = math.log(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 5000
    warmup: int = 2500
    chains: int = 4
    adapt_interval: int = 50
    rhat_threshold: float = 1.1


@dataclass
class PosteriorDraws:
    """Posterior draws on the constrained scale, with diagnostics."""

    draws: np.ndarray        # (chains, kept, P)
    names: list
    acceptance: np.ndarray   # (chains, P) post-warmup acceptance rates
    rhat: np.ndarray         # (P,)
    flagged: bool
    warnings: list = field(default_factory=list)

    @property
    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])

    def to_params(self, chain: int, iteration: int, n_states: int) -> EpiParams:
        return unpack_params(
            _constrain_inverse(self.draws[chain, iteration], n_states), n_states
        )


def param_names(states: list) -> list:
    codes = [s.state for s in states]
    names = [f"r0[{c}]" for c in codes]
    names += ["kappa", "alpha_primary", "alpha_stay_at_home"]
    names += [f"beta[{c}]" for c in codes]
    names += ["gamma"]
    names += [f"ifr_noise[{c}]" for c in codes]
    names += ["psi"]
    names += [f"seeds[{c}]" for c in codes]
    names += ["seed_scale"]
    return names


def pack_params(params: EpiParams) -> np.ndarray:
    """EpiParams -> unconstrained parameter vector."""
    M = params.n_states
    theta = np.empty(4 * M + 6)
    theta[0:M] = np.log(params.r0)
    theta[M] = params.kappa
    theta[M + 1 : M + 3] = np.log(params.alpha - ALPHA_SHIFT)
    theta[M + 3 : 2 * M + 3] = params.beta
    theta[2 * M + 3] = np.log(params.gamma)
    theta[2 * M + 4 : 3 * M + 4] = np.log(params.ifr_noise)
    theta[3 * M + 4] = np.log(params.psi)
    theta[3 * M + 5 : 4 * M + 5] = np.log(params.seeds)
    theta[4 * M + 5] = np.log(params.seed_scale)
    return theta


def unpack_params(constrained: np.ndarray, M: int) -> EpiParams:
    """Constrained parameter vector -> EpiParams."""
    v = constrained
    return EpiParams(
        r0=v[0:M],
        kappa=float(v[M]),
        alpha=v[M + 1 : M + 3],
        beta=v[M + 3 : 2 * M + 3],
        gamma=float(v[2 * M + 3]),
        ifr_noise=v[2 * M + 4 : 3 * M + 4],
        psi=float(v[3 * M + 4]),
        seeds=v[3 * M + 5 : 4 * M + 5],
        seed_scale=float(v[4 * M + 5]),
    )


def _constrain(theta: np.ndarray, M: int) -> np.ndarray:
    """Unconstrained vector -> constrained values (same layout)."""
    out = theta.copy()
    out[0:M] = np.exp(theta[0:M])
    out[M + 1 : M + 3] = ALPHA_SHIFT + np.exp(theta[M + 1 : M + 3])
    out[2 * M + 3] = np.exp(theta[2 * M + 3])
    out[2 * M + 4 : 3 * M + 4] = np.exp(theta[2 * M + 4 : 3 * M + 4])
    out[3 * M + 4] = np.exp(theta[3 * M + 4])
    out[3 * M + 5 : 4 * M + 5] = np.exp(theta[3 * M + 5 : 4 * M + 5])
    out[4 * M + 5] = np.exp(theta[4 * M + 5])
    return out


def _constrain_inverse(constrained: np.ndarray, M: int) -> np.ndarray:
    return constrained  # draws are stored constrained; kept for symmetry


@njit(cache=True)
def _norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - math.log(sd) - _LOG_SQRT_2PI


@njit(cache=True)
def _log_sf_zero(mean, sd):
    # log P(X > 0) for X ~ Normal(mean, sd)
    return math.log(0.5 * math.erfc(-mean / (sd * _SQRT2)))


@njit(cache=True)
def _nb_logpmf(x, psi, d):
    # mean d, variance d + d^2/psi
    p = psi / (psi + d)
    return (
        math.lgamma(x + psi)
        - math.lgamma(psi)
        - math.lgamma(x + 1.0)
        + psi * math.log(p)
        + x * math.log(1.0 - p)
    )


@njit(cache=True)
def _log_posterior_nb(theta, M, deaths, I, istar, pops, ifr, g, pi, n_seed_days):
    P = theta.shape[0]
    kappa = theta[M]
    kappa_abs = abs(kappa)
    if kappa_abs <= 0.0:
        return -np.inf

    lp = _norm_logpdf(kappa, 0.0, KAPPA_SD)

    # r0: positive-truncated normal, log-transformed
    log_z = _log_sf_zero(R0_PRIOR_MEAN, kappa_abs)
    for m in range(M):
        r0 = math.exp(theta[m])
        lp += _norm_logpdf(r0, R0_PRIOR_MEAN, kappa_abs) - log_z + theta[m]

    # intervention effects: shifted gamma, log-transformed excess
    for k in range(2):
        u = theta[M + 1 + k]
        x = math.exp(u)
        lp += (
            (ALPHA_SHAPE - 1.0) * math.log(x)
            - ALPHA_RATE * x
            + ALPHA_SHAPE * math.log(ALPHA_RATE)
            - math.lgamma(ALPHA_SHAPE)
            + u
        )

    # gamma scale: half-normal, log-transformed
    lg = theta[2 * M + 3]
    gam = math.exp(lg)
    lp += _LOG2 + _norm_logpdf(gam, 0.0, GAMMA_SD) + lg

    for m in range(M):
        lp += _norm_logpdf(theta[M + 3 + m], 0.0, gam)

    # ifr noise: positive-truncated normal, log-transformed
    log_z_ifr = _log_sf_zero(IFR_NOISE_MEAN, IFR_NOISE_SD)
    for m in range(M):
        u = theta[2 * M + 4 + m]
        x = math.exp(u)
        lp += _norm_logpdf(x, IFR_NOISE_MEAN, IFR_NOISE_SD) - log_z_ifr + u

    # dispersion: half-normal, log-transformed
    lpsi = theta[3 * M + 4]
    psi = math.exp(lpsi)
    lp += _LOG2 + _norm_logpdf(psi, 0.0, PSI_SD) + lpsi

    # seeds: exponential with fitted scale; scale: exponential hyperprior
    ltau = theta[4 * M + 5]
    tau = math.exp(ltau)
    for m in range(M):
        u = theta[3 * M + 5 + m]
        s = math.exp(u)
        lp += -math.log(tau) - s / tau + u
    lp += -math.log(SEED_HYPER_MEAN) - tau / SEED_HYPER_MEAN + ltau

    if M == 0 or not math.isfinite(lp):
        return lp

    # likelihood
    T = deaths.shape[1]
    H = g.shape[0] - 1
    alpha0 = ALPHA_SHIFT + math.exp(theta[M + 1])
    alpha1 = ALPHA_SHIFT + math.exp(theta[M + 2])
    c = np.empty(T)
    for m in range(M):
        r0 = math.exp(theta[m])
        beta = theta[M + 3 + m]
        seeds = math.exp(theta[3 * M + 5 + m])
        ifr_star = ifr[m] * math.exp(theta[2 * M + 4 + m])
        pop = pops[m]

        cum = 0.0
        for t in range(T):
            if t < n_seed_days:
                c[t] = seeds
            else:
                force = 0.0
                lo = t - H
                if lo < 0:
                    lo = 0
                for tau_i in range(lo, t):
                    force += c[tau_i] * g[t - tau_i]
                depletion = 1.0 - cum / pop
                if depletion < 0.0:
                    depletion = 0.0
                rt = r0 * math.exp(
                    -(alpha0 * I[m, 0, t] + alpha1 * I[m, 1, t] + beta * istar[m, t])
                )
                val = depletion * rt * force
                remaining = pop - cum
                if val > remaining:
                    val = remaining
                if val < 0.0:
                    val = 0.0
                c[t] = val
            cum += c[t]

        for t in range(T):
            d = 0.0
            lo = t - (pi.shape[0] - 1)
            if lo < 0:
                lo = 0
            for tau_i in range(lo, t):
                d += c[tau_i] * pi[t - tau_i]
            d *= ifr_star
            if d < 1e-10:
                d = 1e-10
            lp += _nb_logpmf(float(deaths[m, t]), psi, d)

    return lp


@njit(cache=True)
def _run_chain(theta0, scales0, n_iter, warmup, adapt_interval, seed,
               M, deaths, I, istar, pops, ifr, g, pi, n_seed_days):
    np.random.seed(seed)
    P = theta0.shape[0]
    theta = theta0.copy()
    scales = scales0.copy()
    lp = _log_posterior_nb(theta, M, deaths, I, istar, pops, ifr, g, pi, n_seed_days)

    # Greedy coordinate hill-climb so every chain reaches the posterior
    # ridge before stochastic warmup begins; keeps adaptation effective.
    for _climb in range(300):
        improved = False
        for j in range(P):
            old = theta[j]
            theta[j] = old + 0.1 * np.random.normal()
            lp_new = _log_posterior_nb(
                theta, M, deaths, I, istar, pops, ifr, g, pi, n_seed_days
            )
            if lp_new > lp:
                lp = lp_new
                improved = True
            else:
                theta[j] = old
        if not improved and _climb > 50:
            break

    kept = np.empty((n_iter - warmup, P))
    accepted = np.zeros(P)
    win_acc = np.zeros(P)
    win_try = np.zeros(P)

    # Joint-move machinery: a multivariate proposal along the empirical
    # covariance of warmup draws handles correlated directions that
    # component-wise moves traverse slowly.
    half_warmup = warmup // 4
    n_hist = warmup - half_warmup
    history = np.empty((max(n_hist, 1), P))
    chol = np.eye(P)
    have_chol = False
    joint_moves = 8
    joint_scale = 2.38 / math.sqrt(P)
    joint_acc = 0.0
    joint_try = 0.0
    joint_accepted = 0.0
    joint_total = 0.0
    refresh = max(adapt_interval * 2, 100)

    for it in range(n_iter):
        for j in range(P):
            old = theta[j]
            theta[j] = old + scales[j] * np.random.normal()
            lp_new = _log_posterior_nb(
                theta, M, deaths, I, istar, pops, ifr, g, pi, n_seed_days
            )
            if math.log(np.random.random()) < lp_new - lp:
                lp = lp_new
                win_acc[j] += 1.0
                if it >= warmup:
                    accepted[j] += 1.0
            else:
                theta[j] = old
            win_try[j] += 1.0

        if have_chol:
            for _move in range(joint_moves):
                z = np.empty(P)
                for j in range(P):
                    z[j] = np.random.normal()
                prop = theta + joint_scale * (chol @ z)
                lp_new = _log_posterior_nb(
                    prop, M, deaths, I, istar, pops, ifr, g, pi, n_seed_days
                )
                if math.log(np.random.random()) < lp_new - lp:
                    theta = prop
                    lp = lp_new
                    joint_acc += 1.0
                    if it >= warmup:
                        joint_accepted += 1.0
                joint_try += 1.0
                if it >= warmup:
                    joint_total += 1.0

        if it < warmup:
            if it >= half_warmup:
                history[it - half_warmup] = theta
            if (it + 1) % adapt_interval == 0:
                for j in range(P):
                    rate = win_acc[j] / win_try[j]
                    if rate > 0.4:
                        scales[j] *= 1.5
                    elif rate < 0.2:
                        scales[j] /= 1.5
                    win_acc[j] = 0.0
                    win_try[j] = 0.0
            # periodically refresh the joint proposal covariance from the
            # accumulated warmup history
            seen = it - half_warmup + 1
            if seen >= 2 * P and (it + 1) % refresh == 0:
                sub = history[:seen]
                mean = np.zeros(P)
                for r in range(seen):
                    mean += sub[r]
                mean /= seen
                cov = np.zeros((P, P))
                for r in range(seen):
                    dev = sub[r] - mean
                    cov += np.outer(dev, dev)
                cov /= seen - 1
                tr = 0.0
                for j in range(P):
                    tr += cov[j, j]
                ridge = 1e-8 * tr / P + 1e-12
                for j in range(P):
                    cov[j, j] += ridge
                chol = np.linalg.cholesky(cov)
                have_chol = True
                if joint_try > 0:
                    rate = joint_acc / joint_try
                    if rate > 0.4:
                        joint_scale *= 1.5
                    elif rate < 0.2:
                        joint_scale /= 1.5
                joint_acc = 0.0
                joint_try = 0.0
        else:
            kept[it - warmup] = theta

    acc_rate = accepted / float(n_iter - warmup)
    joint_rate = joint_accepted / joint_total if joint_total > 0 else 0.0
    return kept, acc_rate, scales, joint_rate


def log_posterior(theta: np.ndarray, states: list, g_pmf: np.ndarray, pi_pmf: np.ndarray) -> float:
    """Unconstrained-space log posterior (prior + Jacobian + likelihood)."""
    packed = _pack_data(states, g_pmf, pi_pmf)
    return float(_log_posterior_nb(np.asarray(theta, dtype=float), *packed))


def _pack_data(states: list, g_pmf: np.ndarray, pi_pmf: np.ndarray):
    M = len(states)
    if M == 0:
        return (
            0,
            np.zeros((0, 1), dtype=np.float64),
            np.zeros((0, 2, 1)),
            np.zeros((0, 1)),
            np.zeros(0),
            np.zeros(0),
            np.asarray(g_pmf, dtype=float),
            _pi_for_convolution(pi_pmf),
            N_SEED_DAYS,
        )
    T = states[0].n_days
    deaths = np.zeros((M, T), dtype=np.float64)
    I = np.zeros((M, N_INTERVENTIONS, T))
    istar = np.zeros((M, T))
    pops = np.zeros(M)
    ifr = np.zeros(M)
    for m, s in enumerate(states):
        if s.n_days != T:
            raise InputError("all states must share one calendar grid")
        deaths[m] = s.daily_deaths
        I[m], istar[m] = build_indicators(s)
        pops[m] = s.population
        ifr[m] = s.ifr
    return (
        M, deaths, I, istar, pops, ifr,
        np.asarray(g_pmf, dtype=float),
        _pi_for_convolution(pi_pmf),
        N_SEED_DAYS,
    )


def _pi_for_convolution(pi_pmf: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi_pmf, dtype=float).copy()
    if pi.size:
        pi[0] = 0.0
    return pi


def _initial_theta(M: int, rng: np.random.Generator) -> np.ndarray:
    start = EpiParams(
        r0=np.full(max(M, 1), 3.0)[:M] if M else np.zeros(0),
        kappa=0.5,
        alpha=np.array([0.2, 0.2]),
        beta=np.zeros(M),
        gamma=0.15,
        ifr_noise=np.ones(M),
        psi=5.0,
        seeds=np.full(M, 20.0),
        seed_scale=30.0,
    )
    theta = pack_params(start)
    return theta + rng.normal(0.0, 0.1, size=theta.size)


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-chain convergence statistic per parameter.

    ``chains`` has shape (n_chains, n_draws, P); each chain is split in
    half before computing the between/within variance ratio.
    """
    C, n, P = chains.shape
    half = n // 2
    seqs = np.concatenate(
        [chains[:, :half, :], chains[:, half : 2 * half, :]], axis=0
    )  # (2C, half, P)
    means = seqs.mean(axis=1)          # (2C, P)
    variances = seqs.var(axis=1, ddof=1)
    W = variances.mean(axis=0)
    B = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * W + B / half
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / W)
    return np.where(W > 0, rhat, 1.0)


def sample_posterior(
    states: list,
    config: SamplerConfig = SamplerConfig(),
    seed: int = 0,
    g_pmf: np.ndarray | None = None,
    pi_pmf: np.ndarray | None = None,
) -> PosteriorDraws:
    """Run adaptive random-walk Metropolis chains and diagnose convergence.

    With an empty state list the run is prior-only.  An R-hat above the
    threshold flags the run (warning recorded) without suppressing output.
    """
    if config.warmup >= config.iterations:
        raise InputError("warmup must be smaller than iterations")
    if g_pmf is None or pi_pmf is None:
        from voteimpact.delays import DelayModel, discretize

        model = DelayModel.default()
        horizon = max(states[0].n_days if states else 60, 60)
        if g_pmf is None:
            g_pmf = discretize(model.generation, horizon).probs
        if pi_pmf is None:
            pi_pmf = discretize(model.infection_to_death, horizon).probs

    packed = _pack_data(states, g_pmf, pi_pmf)
    M = packed[0]
    P = 4 * M + 6
    names = param_names(states)

    seeds = np.random.SeedSequence(seed).spawn(config.chains)
    all_kept = np.empty((config.chains, config.iterations - config.warmup, P))
    acceptance = np.empty((config.chains, P))
    for ci in range(config.chains):
        rng = np.random.default_rng(seeds[ci])
        theta0 = _initial_theta(M, rng)
        chain_seed = int(rng.integers(0, 2**31 - 1))
        kept, acc, _, _joint_rate = _run_chain(
            theta0,
            np.full(P, 0.1),
            config.iterations,
            config.warmup,
            config.adapt_interval,
            chain_seed,
            *packed,
        )
        all_kept[ci] = kept
        acceptance[ci] = acc

    rhat = split_rhat(all_kept)
    flagged = bool(np.any(rhat > config.rhat_threshold))
    warnings_list = []
    if flagged:
        bad = [names[j] for j in np.flatnonzero(rhat > config.rhat_threshold)]
        warnings_list.append(
            f"convergence statistic above {config.rhat_threshold} for: {', '.join(bad)}"
        )

    constrained = np.empty_like(all_kept)
    for ci in range(config.chains):
        for it in range(all_kept.shape[1]):
            constrained[ci, it] = _constrain(all_kept[ci, it], M)

    return PosteriorDraws(
        draws=constrained,
        names=names,
        acceptance=acceptance,
        rhat=rhat,
        flagged=flagged,
        warnings=warnings_list,
    )
