"""Renewal-model identities, priors, and the observation model."""

import datetime as dt

import numpy as np
import pytest
from scipy import stats

from voteimpact.delays import DelayModel, GammaSpec, discretize
from voteimpact.epimodel import (
    ALPHA_SHIFT,
    EpiParams,
    StateData,
    build_indicators,
    expected_deaths,
    expected_infections,
    log_prior,
    nb_loglik,
    rt_series,
    simulate_forward,
    state_trajectories,
)
from voteimpact.errors import InputError

START = dt.date(2020, 3, 1)


def _state(n_days=60, primary=20, sah=None, deaths=None, pop=1e6, ifr=0.01):
    dates = np.arange(np.datetime64(START, "D"), np.datetime64(START, "D") + n_days)
    interventions = {}
    if primary is not None:
        interventions["primary"] = START + dt.timedelta(days=primary)
    if sah is not None:
        interventions["stay_at_home"] = START + dt.timedelta(days=sah)
    return StateData(
        state="WI",
        dates=dates,
        daily_deaths=np.zeros(n_days, dtype=int) if deaths is None else deaths,
        population=pop,
        ifr=ifr,
        intervention_dates=interventions,
    )


def _params(M=1, **kw):
    base = dict(
        r0=np.full(M, 3.0),
        kappa=0.4,
        alpha=np.array([0.3, 0.1]),
        beta=np.zeros(M),
        gamma=0.15,
        ifr_noise=np.ones(M),
        psi=5.0,
        seeds=np.full(M, 20.0),
        seed_scale=30.0,
    )
    base.update(kw)
    return EpiParams(**base)


class TestIndicators:
    def test_persisting_switch_on(self):
        I, istar = build_indicators(_state(primary=20, sah=10))
        assert I[0, 19] == 0 and I[0, 20] == 1 and I[0, -1] == 1
        assert I[1, 9] == 0 and I[1, 10] == 1
        # the primary came later, so the state-specific effect attaches to it
        assert np.array_equal(istar, I[0])

    def test_later_intervention_gets_istar(self):
        I, istar = build_indicators(_state(primary=10, sah=30))
        assert np.array_equal(istar, I[1])

    def test_absent_interventions(self):
        I, istar = build_indicators(_state(primary=None))
        assert not I.any() and not istar.any()


class TestRtSeries:
    def test_no_active_interventions_gives_r0(self):
        T = 30
        rt = rt_series(3.28, np.zeros(2), 0.0, np.zeros((2, T)), np.zeros(T))
        assert np.all(rt == 3.28)

    def test_closed_form_value(self):
        T = 5
        I = np.ones((2, T))
        rt = rt_series(3.28, np.array([0.1, 0.2]), 0.05, I, I[1])
        assert rt[0] == pytest.approx(3.28 * np.exp(-0.35), rel=1e-12)

    def test_matches_independent_reevaluation_to_machine_precision(self):
        rng = np.random.default_rng(5)
        T = 50
        for _ in range(20):
            r0 = rng.uniform(1, 5)
            alpha = rng.normal(0, 0.5, 2)
            beta = rng.normal(0, 0.2)
            I = (rng.random((2, T)) < 0.5).astype(float)
            istar = I[1]
            rt = rt_series(r0, alpha, beta, I, istar)
            manual = np.array(
                [
                    r0 * np.exp(-(alpha[0] * I[0, t] + alpha[1] * I[1, t] + beta * istar[t]))
                    for t in range(T)
                ]
            )
            assert np.array_equal(rt, manual) or np.allclose(rt, manual, rtol=1e-15, atol=0)


class TestExpectedInfections:
    def test_hand_recursion_one_lag(self):
        # seeds 10/day for 6 days; g concentrated at lag 1; R = 2
        g = np.array([0.0, 1.0])
        rt = np.full(8, 2.0)
        c = expected_infections(rt, g, 10.0, 1000.0)
        cum6 = 60.0
        assert c[6] == pytest.approx((1 - cum6 / 1000) * 2 * 10)

    def test_spec_example_single_seed_day(self):
        g = np.array([0.0, 1.0])
        c = expected_infections(np.full(3, 2.0), g, 10.0, 1000.0, n_seed_days=1)
        assert c[1] == pytest.approx(0.99 * 2 * 10)

    def test_zero_rt_extinguishes(self):
        g = discretize(GammaSpec(6.5, 0.62), 30).probs
        rt = np.zeros(40)
        c = expected_infections(rt, g, 15.0, 1e6)
        assert np.all(c[6:] == 0)

    def test_susceptible_conservation(self):
        g = discretize(GammaSpec(6.5, 0.62), 30).probs
        rt = np.full(200, 8.0)  # explosive growth against a small population
        c = expected_infections(rt, g, 50.0, 10_000.0)
        assert c.sum() <= 10_000.0 + 1e-9
        assert np.all(c >= 0)

    def test_monotone_in_alpha(self):
        # larger intervention effect never increases post-intervention infections
        g = discretize(GammaSpec(6.5, 0.62), 30).probs
        # population large enough that depletion feedback stays negligible
        state = _state(n_days=60, primary=20)
        I, istar = build_indicators(state)
        base = None
        for a in (0.0, 0.4, 0.8):
            rt = rt_series(3.0, np.array([a, 0.0]), 0.0, I, istar)
            c = expected_infections(rt, g, 20.0, 1e9)
            if base is not None:
                assert np.all(c <= base * (1 + 1e-9) + 1e-9)
            base = c

    def test_doubling_population_barely_changes_early_curve(self):
        g = discretize(GammaSpec(6.5, 0.62), 30).probs
        rt = np.full(40, 2.0)
        c1 = expected_infections(rt, g, 10.0, 1e6)
        c2 = expected_infections(rt, g, 10.0, 2e6)
        assert np.all(np.abs(c2[:30] - c1[:30]) <= 0.01 * np.abs(c1[:30]) + 1e-12)


class TestExpectedDeaths:
    def test_hand_convolution(self):
        c = np.zeros(10)
        c[0] = 100.0
        pi = np.zeros(6)
        pi[5] = 1.0
        d = expected_deaths(c, 0.01, pi)
        assert d[5] == pytest.approx(1.0)
        assert d.sum() == pytest.approx(1.0)

    def test_day_zero_mass_is_dropped(self):
        c = np.zeros(5)
        c[0] = 100.0
        pi = np.array([1.0])
        assert expected_deaths(c, 0.01, pi).sum() == 0.0

    def test_mass_bound(self):
        rng = np.random.default_rng(0)
        c = rng.uniform(0, 50, 40)
        pi = discretize((GammaSpec(5.1, 0.86), GammaSpec(17.8, 0.45)), 60).probs
        d = expected_deaths(c, 0.02, pi)
        assert d.sum() <= 0.02 * c.sum() + 1e-9


class TestNbLoglik:
    def test_poisson_limit(self):
        val = nb_loglik(np.array([4]), np.array([4.0]), 1e9)
        assert val == pytest.approx(stats.poisson.logpmf(4, 4), abs=1e-3)

    def test_certain_zero(self):
        assert nb_loglik(np.array([0]), np.array([1e-12]), 5.0) == pytest.approx(0.0, abs=1e-8)

    def test_mode_near_mean(self):
        d, psi = 10.0, 2.0
        vals = [nb_loglik(np.array([k]), np.array([d]), psi) for k in range(101)]
        assert 0 < int(np.argmax(vals)) < 15

    def test_variance_parameterization(self):
        # mean d, variance d + d^2/psi
        d, psi = 10.0, 2.0
        rng = np.random.default_rng(1)
        draws = rng.negative_binomial(psi, psi / (psi + d), size=100_000)
        assert draws.var() == pytest.approx(d + d * d / psi, rel=0.05)

    def test_input_validation(self):
        with pytest.raises(InputError):
            nb_loglik(np.array([-1]), np.array([1.0]), 1.0)
        with pytest.raises(InputError):
            nb_loglik(np.array([1]), np.array([1.0]), 0.0)


class TestLogPrior:
    def test_finite_at_alpha_zero(self):
        assert np.isfinite(log_prior(_params(alpha=np.array([0.0, 0.0]))))

    def test_alpha_below_shift_is_minus_inf(self):
        assert log_prior(_params(alpha=np.array([ALPHA_SHIFT - 1e-6, 0.1]))) == -np.inf

    def test_negative_r0_is_minus_inf(self):
        assert log_prior(_params(r0=np.array([-0.5]))) == -np.inf

    def test_negative_seed_or_scale_is_minus_inf(self):
        assert log_prior(_params(seeds=np.array([-1.0]))) == -np.inf
        assert log_prior(_params(seed_scale=-2.0)) == -np.inf

    def test_alpha_prior_mean(self):
        # Gamma(1/2, 1) shifted by -log(1.05)/2 has mean 1/2 - log(1.05)/2
        rng = np.random.default_rng(2)
        draws = rng.gamma(0.5, 1.0, 500_000) + ALPHA_SHIFT
        assert draws.mean() == pytest.approx(0.5 - np.log(1.05) / 2, abs=2e-3)
        assert 0.5 + ALPHA_SHIFT == pytest.approx(0.4756, abs=1e-4)

    def test_density_composition_against_scipy(self):
        p = _params()
        expected = (
            stats.norm.logpdf(p.kappa, 0, 0.5)
            + stats.norm.logpdf(p.r0[0], 3.28, abs(p.kappa))
            - stats.norm.logsf(0, 3.28, abs(p.kappa))
            + stats.gamma.logpdf(p.alpha - ALPHA_SHIFT, 0.5).sum()
            + np.log(2) + stats.norm.logpdf(p.gamma, 0, 0.2)
            + stats.norm.logpdf(p.beta[0], 0, p.gamma)
            + stats.norm.logpdf(p.ifr_noise[0], 1.0, 0.1)
            - stats.norm.logsf(0, 1.0, 0.1)
            + np.log(2) + stats.norm.logpdf(p.psi, 0, 5.0)
            + stats.expon.logpdf(p.seeds[0], scale=p.seed_scale)
            + stats.expon.logpdf(p.seed_scale, scale=30.0)
        )
        assert log_prior(p) == pytest.approx(float(expected), rel=1e-12)


class TestSimulateForward:
    def test_deterministic_given_seed(self):
        model = DelayModel.default()
        g = discretize(model.generation, 60).probs
        pi = discretize(model.infection_to_death, 60).probs
        a = simulate_forward(_params(), [_state()], g, pi, seed=7)
        b = simulate_forward(_params(), [_state()], g, pi, seed=7)
        assert np.array_equal(a[0].daily_deaths, b[0].daily_deaths)

    def test_zero_ifr_means_zero_deaths(self):
        model = DelayModel.default()
        g = discretize(model.generation, 60).probs
        pi = discretize(model.infection_to_death, 60).probs
        out = simulate_forward(_params(), [_state(ifr=0.0)], g, pi, seed=1)
        assert not out[0].daily_deaths.any()

    def test_poisson_limit_variance(self):
        # huge dispersion: sample variance approaches the sample mean
        model = DelayModel.default()
        g = discretize(model.generation, 60).probs
        pi = discretize(model.infection_to_death, 60).probs
        params = _params(psi=1e9, r0=np.array([3.5]))
        template = _state(n_days=60, pop=1e7)
        counts = np.array(
            [
                simulate_forward(params, [template], g, pi, seed=s)[0].daily_deaths[-1]
                for s in range(200)
            ]
        )
        traj = state_trajectories(params, 0, template, g, pi)
        mean_d = traj.deaths[-1]
        assert counts.mean() == pytest.approx(mean_d, rel=0.1)
        # dispersion -> infinity: variance collapses to the mean (Poisson limit)
        assert counts.var() == pytest.approx(mean_d, rel=0.35)

    def test_trajectories_conserve_population(self):
        model = DelayModel.default()
        g = discretize(model.generation, 90).probs
        pi = discretize(model.infection_to_death, 90).probs
        params = _params(r0=np.array([6.0]), seeds=np.array([500.0]))
        traj = state_trajectories(params, 0, _state(n_days=150, pop=50_000.0), g, pi)
        assert traj.infections.sum() <= 50_000.0 + 1e-6


class TestStateDataValidation:
    def test_negative_deaths_rejected(self):
        with pytest.raises(InputError):
            _state(deaths=np.array([-1] * 60))

    def test_bad_ifr_rejected(self):
        with pytest.raises(InputError):
            _state(ifr=1.5)
