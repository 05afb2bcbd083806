"""Pipeline-versus-brute-force equivalence on random panels."""

import numpy as np
import pytest

from voteimpact.matching import (
    MatchingConfig,
    att_curve,
    balance_table,
    run_matching,
)

from _bruteforce import brute_force_att, brute_force_balance, brute_force_match
from _panels import random_panel

TOL = 1e-12


def _compare(panel, config):
    result = run_matching(panel, config)
    oracle = brute_force_match(panel, config)

    assert len(result.matched_sets) == len(oracle)
    for ms, om in zip(result.matched_sets, oracle):
        assert ms.treated_idx == om["treated"]
        assert ms.onset == om["onset"]
        assert list(ms.candidate_idx) == om["candidates"]
        assert list(ms.control_idx) == om["controls"]
        assert np.allclose(ms.weights, om["weights"], rtol=0, atol=TOL)

    if oracle:
        att = att_curve(result, panel)
        expected = brute_force_att(panel, oracle, config)
        both_nan = np.isnan(att.estimate) & np.isnan(expected)
        close = np.abs(att.estimate - expected) <= TOL
        assert np.all(both_nan | close)

        balance = balance_table(result, panel)
        before, after = brute_force_balance(panel, oracle, config)
        for ours, theirs in ((balance.smd_before, before), (balance.smd_after, after)):
            both_nan = np.isnan(ours) & np.isnan(theirs)
            close = np.abs(ours - theirs) <= TOL
            assert np.all(both_nan | close)


@pytest.mark.parametrize("seed", range(50))
def test_oracle_equivalence_random_panels(seed):
    panel = random_panel(seed)
    _compare(panel, MatchingConfig())


def test_oracle_equivalence_small_k():
    panel = random_panel(123)
    _compare(panel, MatchingConfig(k=2))
