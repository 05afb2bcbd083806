"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Every test computes its result, prints ``ACCEPTANCE <n>: PASS|FAIL (...)``
with the measured values, and only then asserts, so the per-criterion
outcome is visible in the captured output of a failing run as well.
"""

import datetime as dt
import json
import time

import numpy as np
import pytest
from click.testing import CliRunner

from voteimpact.cli import main
from voteimpact.delays import DelayModel, GammaSpec, discretize, sample_delay
from voteimpact.epimodel import (
    EpiParams,
    expected_infections,
    nb_loglik,
    rt_series,
    simulate_forward,
    state_trajectories,
)
from voteimpact.fixtures import generate_fixture, make_fixture
from voteimpact.matching import (
    MatchingConfig,
    att_curve,
    balance_table,
    bootstrap_ci,
    run_matching,
)
from voteimpact.panel import (
    PanelConfig,
    build_panel,
    parse_covariates,
    parse_deaths,
    parse_schedule,
    parse_turnout,
)
from voteimpact.sampler import SamplerConfig, sample_posterior

from _bruteforce import brute_force_att, brute_force_balance, brute_force_match
from _panels import random_panel

WINDOW = PanelConfig(dt.date(2020, 3, 1), dt.date(2020, 6, 28), ())


def _report(n: int, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)


def _fixture_panel(kind: str, seed: int, effect: float = 0.005):
    fx = generate_fixture(kind, seed, effect)
    return build_panel(
        parse_deaths(fx.deaths_csv),
        parse_covariates(fx.covariates_csv),
        parse_schedule(fx.elections_csv),
        WINDOW,
        parse_turnout(fx.turnout_csv),
    )


def test_criterion_1_delay_window_percentiles():
    """20th/80th percentiles of the infection-to-death delay vs 13/32 days.

    The mean reproduces exactly; the quantiles of the stated mean/CV
    parameterization land near 15 and 30 days, not 13 and 32 (see the
    decisions ledger). The window constants used by the estimator are
    therefore pinned rather than derived, and this criterion records the
    discrepancy as an honest failure of its percentile clause.
    """
    start = time.time()
    model = DelayModel.default()
    draws = sample_delay(model.infection_to_death, 1_000_000, np.random.default_rng(0))
    mean = float(draws.mean())
    p20 = float(np.quantile(draws, 0.2))
    p80 = float(np.quantile(draws, 0.8))
    elapsed = time.time() - start

    mean_ok = abs(mean - 22.9) <= 0.1
    p20_ok = abs(p20 - 13.0) <= 1.0
    p80_ok = abs(p80 - 32.0) <= 1.0
    time_ok = elapsed < 5.0
    ok = mean_ok and p20_ok and p80_ok and time_ok
    _report(
        1,
        ok,
        f"mean={mean:.3f} (target 22.9±0.1), p20={p20:.2f} (target 13±1), "
        f"p80={p80:.2f} (target 32±1), {elapsed:.1f}s",
    )
    assert mean_ok, f"mean {mean} outside 22.9±0.1"
    assert time_ok, f"runtime {elapsed:.1f}s exceeds 5s"
    assert p20_ok and p80_ok, (
        f"quantiles ({p20:.2f}, {p80:.2f}) do not reproduce (13, 32); "
        "no (mean, cv) reading of the stated delay parameters does -- "
        "see the decisions ledger entry on the delay window"
    )


def test_criterion_2_estimator_oracle_equivalence():
    """Pipeline vs brute-force enumeration on 50 random panels, 1e-12."""
    start = time.time()
    config = MatchingConfig()
    checked = 0
    max_err = 0.0
    for seed in range(1000, 1050):
        panel = random_panel(seed, max_counties=12, n_days=60)
        result = run_matching(panel, config)
        oracle = brute_force_match(panel, config)
        assert len(result.matched_sets) == len(oracle)
        for ms, om in zip(result.matched_sets, oracle):
            assert ms.treated_idx == om["treated"]
            assert list(ms.candidate_idx) == om["candidates"]
            assert list(ms.control_idx) == om["controls"]
            assert np.allclose(ms.weights, om["weights"], rtol=0, atol=1e-12)
        if not oracle:
            continue
        att = att_curve(result, panel).estimate
        expected = brute_force_att(panel, oracle, config)
        mask = ~(np.isnan(att) & np.isnan(expected))
        err = float(np.nanmax(np.abs(att[mask] - expected[mask]))) if mask.any() else 0.0
        before, after = brute_force_balance(panel, oracle, config)
        table = balance_table(result, panel)
        for ours, theirs in ((table.smd_before, before), (table.smd_after, after)):
            m = ~(np.isnan(ours) & np.isnan(theirs))
            if m.any():
                err = max(err, float(np.nanmax(np.abs(ours[m] - theirs[m]))))
        max_err = max(max_err, err)
        checked += 1
    elapsed = time.time() - start
    ok = max_err <= 1e-12 and elapsed < 60
    _report(2, ok, f"{checked} panels with matches, max |diff|={max_err:.2e}, {elapsed:.1f}s")
    assert max_err <= 1e-12
    assert elapsed < 60


def test_criterion_3_null_calibration():
    """95% bootstrap interval covers 0 on >=88 of 100 null fixtures."""
    start = time.time()
    covered = 0
    for seed in range(100):
        panel = _fixture_panel("null_effect", seed)
        result = run_matching(panel)
        boot = bootstrap_ci(result, panel, B=1000, level=0.95, seed=seed)
        lo, hi = boot.window_ci
        covered += lo <= 0.0 <= hi
    elapsed = time.time() - start
    ok = covered >= 88 and elapsed < 600
    _report(3, ok, f"interval covered 0 in {covered}/100 runs (need >=88), {elapsed:.0f}s")
    assert covered >= 88
    assert elapsed < 600


def test_criterion_4_effect_recovery():
    """additive_effect(0.005): interval contains 0.005 in >=80/100; mean within 20%."""
    truth = 0.005
    contained = 0
    estimates = []
    for seed in range(100):
        panel = _fixture_panel("additive_effect", seed, effect=truth)
        result = run_matching(panel)
        boot = bootstrap_ci(result, panel, B=1000, level=0.95, seed=seed)
        lo, hi = boot.window_ci
        contained += lo <= truth <= hi
        estimates.append(boot.window_estimate)
    mean_est = float(np.mean(estimates))
    mean_ok = abs(mean_est - truth) <= 0.2 * truth
    ok = contained >= 80 and mean_ok
    _report(
        4,
        ok,
        f"interval contained 0.005 in {contained}/100 runs (need >=80), "
        f"mean estimate {mean_est:.5f} (need within [0.004, 0.006])",
    )
    assert contained >= 80
    assert mean_ok


def test_criterion_5_balance_improvement():
    """Refinement reduces mean |SMD| for >=7 of 10 covariates."""
    n_fixtures = 10
    before_acc = []
    after_acc = []
    for seed in range(n_fixtures):
        panel = _fixture_panel("confounded_balance", seed)
        result = run_matching(panel)
        table = balance_table(result, panel)
        before_acc.append(table.mean_abs("before"))
        after_acc.append(table.mean_abs("after"))
    before = np.nanmean(before_acc, axis=0)
    after = np.nanmean(after_acc, axis=0)
    improved = int(np.sum(after <= before))
    ok = improved >= 7
    _report(
        5,
        ok,
        f"{improved}/10 covariates improved; mean |SMD| "
        f"before={float(np.nanmean(before)):.3f} after={float(np.nanmean(after)):.3f}",
    )
    assert improved >= 7


def test_criterion_6_epi_parameter_recovery(tmp_path):
    """90% credible intervals cover alpha=(0.8, 0.0) in >=16 of 20 fits."""
    from voteimpact.cli import RunConfig, _assemble_states

    n_fixtures = 20
    true_alpha = (0.8, 0.0)
    config = SamplerConfig(iterations=5000, warmup=2500, chains=4)
    covered = [0, 0]
    rhat_ok_total = 0
    rhat_total = 0
    worst_fixture_time = 0.0
    for seed in range(n_fixtures):
        fx_dir = tmp_path / f"fx{seed}"
        make_fixture("epi_recovery", seed, fx_dir)
        run_config = RunConfig(
            deaths=str(fx_dir / "deaths.csv"),
            covariates=str(fx_dir / "covariates.csv"),
            interventions=str(fx_dir / "interventions.csv"),
            epi_start=dt.date(2020, 3, 1),
            epi_end=dt.date(2020, 6, 28),
            ifr=0.01,
            seed=seed,
        )
        states, _ = _assemble_states(run_config)
        start = time.time()
        draws = sample_posterior(states, config, seed=1000 + seed)
        worst_fixture_time = max(worst_fixture_time, time.time() - start)
        flat = draws.flat
        for k, name in enumerate(("alpha_primary", "alpha_stay_at_home")):
            col = flat[:, draws.names.index(name)]
            lo, hi = np.quantile(col, [0.05, 0.95])
            covered[k] += lo <= true_alpha[k] <= hi
        rhat_ok_total += int(np.sum(draws.rhat < 1.1))
        rhat_total += draws.rhat.size
    rhat_frac = rhat_ok_total / rhat_total
    ok = (
        covered[0] >= 16
        and covered[1] >= 16
        and rhat_frac >= 0.9
        and worst_fixture_time < 600
    )
    _report(
        6,
        ok,
        f"coverage alpha_1={covered[0]}/20, alpha_2={covered[1]}/20 (need >=16), "
        f"rhat<1.1 on {rhat_frac:.1%} of parameters (need >=90%), "
        f"slowest fixture {worst_fixture_time:.0f}s (limit 600s)",
    )
    assert covered[0] >= 16 and covered[1] >= 16
    assert rhat_frac >= 0.9
    assert worst_fixture_time < 600


def test_criterion_7_model_identities():
    """Closed-form Rt, susceptible conservation, NB variance, Poisson limit."""
    # Rt closed form to machine precision on random draws
    rng = np.random.default_rng(0)
    rt_err = 0.0
    for _ in range(20):
        T = 60
        r0 = rng.uniform(1, 5)
        alpha = rng.normal(0, 0.5, 2)
        beta = rng.normal(0, 0.2)
        indicators = (rng.random((2, T)) < 0.5).astype(float)
        istar = indicators[1]
        rt = rt_series(r0, alpha, beta, indicators, istar)
        manual = r0 * np.exp(-(alpha[0] * indicators[0] + alpha[1] * indicators[1] + beta * istar))
        rt_err = max(rt_err, float(np.max(np.abs(rt - manual) / manual)))
    rt_ok = rt_err < 1e-14

    # susceptible conservation under explosive growth
    g = discretize(GammaSpec(6.5, 0.62), 30).probs
    conservation_ok = True
    for pop in (1e3, 1e5, 1e7):
        c = expected_infections(np.full(300, rng.uniform(2, 9)), g, 50.0, pop)
        conservation_ok &= c.sum() <= pop + 1e-6 and np.all(c >= 0)

    # NB variance parameterization at (d=10, psi=2): variance 60 +- 5%
    d, psi = 10.0, 2.0
    counts = np.random.default_rng(1).negative_binomial(psi, psi / (psi + d), 100_000)
    var = float(counts.var())
    var_ok = abs(var - 60.0) <= 0.05 * 60.0

    # Poisson limit of the likelihood at psi = 1e9
    from scipy import stats

    nb = nb_loglik(np.array([4]), np.array([4.0]), 1e9)
    pois = float(stats.poisson.logpmf(4, 4))
    pois_ok = abs(nb - pois) < 1e-3

    ok = rt_ok and conservation_ok and var_ok and pois_ok
    _report(
        7,
        ok,
        f"rt max rel err={rt_err:.1e}, conservation={conservation_ok}, "
        f"NB var={var:.1f} (target 60±3), Poisson-limit err={abs(nb - pois):.1e}",
    )
    assert rt_ok
    assert conservation_ok
    assert var_ok
    assert pois_ok


def test_criterion_8_end_to_end_determinism(tmp_path):
    """Repeated seeded CLI runs produce byte-identical result tables."""
    fx = tmp_path / "fx"
    make_fixture("null_effect", 7, fx)
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"""deaths = {fx}/deaths.csv
covariates = {fx}/covariates.csv
elections = {fx}/elections.csv
turnout = {fx}/turnout.csv
study_start = 2020-03-01
study_end = 2020-06-28
bootstrap = 1000
seed = 7
"""
    )
    runner = CliRunner()
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(main, ["match", "--config", str(cfg), "--out", str(out)])
        assert result.exit_code == 0, result.output
        outs.append(out)
    identical = {
        name: (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
        for name in ("att.csv", "balance.csv", "matches.csv", "att_plot.svg")
    }
    manifests = [json.loads((o / "manifest.json").read_text()) for o in outs]
    for m in manifests:
        m.pop("wall_clock_seconds", None)
        m.pop("started_at", None)
    manifest_ok = manifests[0] == manifests[1]
    ok = all(identical.values()) and manifest_ok
    _report(
        8,
        ok,
        "byte-identical: "
        + ", ".join(f"{k}={v}" for k, v in identical.items())
        + f", manifest-identical-up-to-clock={manifest_ok}",
    )
    assert all(identical.values())
    assert manifest_ok
