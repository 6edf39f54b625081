"""Tests for the synthetic benchmark generator.

The generator's contract: schema-valid output, exact counterfactual
bookkeeping, named-stream isolation between components, and calibration
hooks (cell rates, analytic bias of the unadjusted regression) that do what
they claim.
"""
from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from ettkit import rng, schema, scm
from ettkit.errors import PositivityViolation


@pytest.fixture(scope="module")
def default_draw():
    cfg = scm.ScmConfig(seed=11, n_units=6000)
    return cfg, *scm.generate(cfg)


def test_dataset_passes_schema_validation(default_draw):
    _, dataset, truth = default_draw
    schema.validate_dataset(dataset)
    assert len(truth) == len(dataset)


def test_outcome_is_consistent_with_potential_outcomes(default_draw):
    """The observed outcome is exactly the selected potential outcome."""
    _, dataset, truth = default_draw
    t = dataset[schema.TREATMENT].to_numpy()
    expected = np.where(t == 1, truth["y1"], truth["y0"])
    assert np.array_equal(dataset[schema.OUTCOME].to_numpy(), expected)


def test_unit_effect_is_the_potential_outcome_gap(default_draw):
    cfg, _, truth = default_draw
    gap = truth["y1"] - truth["y0"]
    assert np.allclose(gap, truth["tau"], atol=1e-12)
    assert np.allclose(truth["tau"], cfg.effect.constant)


def test_true_ett_is_exact_for_constant_effect():
    cfg = scm.ScmConfig(seed=0, effect=scm.EffectSpec(constant=-0.03))
    assert scm.true_ett(cfg) == (-0.03, 0.0)


def test_true_ett_monte_carlo_for_side_specific_effect():
    cfg = scm.ScmConfig(
        seed=3, n_units=20000,
        effect=scm.EffectSpec(by_side={"L": -0.05, "R": -0.01}),
    )
    value, se = scm.true_ett(cfg)
    assert 0.0 < se <= 1e-3
    assert -0.05 < value < -0.01
    # left-handed batters are shifted more, so the treated mix holds more
    # lefties than the population does and the ETT beats the population mix
    population_mix = -0.05 * 0.37 - 0.01 * 0.63
    assert value < population_mix - 0.002


def test_generate_is_reproducible_and_seed_sensitive():
    cfg = scm.ScmConfig(seed=5, n_units=500)
    a, ta = scm.generate(cfg)
    b, tb = scm.generate(cfg)
    pd.testing.assert_frame_equal(a, b)
    pd.testing.assert_frame_equal(ta, tb)
    c, _ = scm.generate(scm.ScmConfig(seed=6, n_units=500))
    assert not a[schema.OUTCOME].equals(c[schema.OUTCOME])


def test_component_streams_are_isolated():
    """Changing the outcome noise must not touch treatment assignment, and
    changing the effect must not touch the untreated potential outcome."""
    base = scm.ScmConfig(seed=7, n_units=2000)
    ds0, tr0 = scm.generate(base)

    louder = scm.ScmConfig(seed=7, n_units=2000, outcome=scm.OutcomeSpec(noise_sd=0.9))
    ds1, _ = scm.generate(louder)
    assert np.array_equal(
        ds0[schema.TREATMENT].to_numpy(), ds1[schema.TREATMENT].to_numpy()
    )

    shifted = scm.ScmConfig(seed=7, n_units=2000, effect=scm.EffectSpec(constant=-0.5))
    ds2, tr2 = scm.generate(shifted)
    assert np.array_equal(tr0["y0"].to_numpy(), tr2["y0"].to_numpy())
    assert np.array_equal(
        ds0[schema.TREATMENT].to_numpy(), ds2[schema.TREATMENT].to_numpy()
    )


def test_instrument_is_a_team_year_level_variable(default_draw):
    _, dataset, _ = default_draw
    z = dataset[schema.INSTRUMENT]
    assert ((z > 0) & (z < 1)).all()
    nunique = dataset.groupby(["fielding_team", "game_year"])[schema.INSTRUMENT].nunique()
    assert (nunique == 1).all()
    expected_se = np.sqrt(z * (1 - z) / 500)
    assert np.allclose(dataset[schema.INSTRUMENT_SE], expected_se, rtol=1e-12)


def test_positivity_guard_raises_when_probabilities_leave_the_band():
    cfg = scm.ScmConfig(seed=0, n_units=2000, positivity_eps=0.2)
    with pytest.raises(PositivityViolation):
        scm.generate(cfg)


def test_assignment_probabilities_respect_default_band(default_draw):
    cfg, _, truth = default_draw
    p = truth["p_treat"].to_numpy()
    assert p.min() > cfg.positivity_eps
    assert p.max() < 1 - cfg.positivity_eps


def test_exclusion_violation_adds_exactly_the_configured_leak():
    """With everything else held fixed, the violation switch moves y0 by
    violation * standardized instrument and nothing else."""
    clean = scm.ScmConfig(seed=9, n_units=3000)
    leaky = scm.ScmConfig(seed=9, n_units=3000, exclusion_violation=0.3)
    ds0, tr0 = scm.generate(clean)
    ds1, tr1 = scm.generate(leaky)
    a, b = clean.instrument_beta
    z_mean = a / (a + b)
    z_sd = np.sqrt(a * b / ((a + b) ** 2 * (a + b + 1.0)))
    z_std = (ds0[schema.INSTRUMENT].to_numpy() - z_mean) / z_sd
    assert np.allclose(tr1["y0"] - tr0["y0"], 0.3 * z_std, atol=1e-12)
    assert np.array_equal(
        ds0[schema.TREATMENT].to_numpy(), ds1[schema.TREATMENT].to_numpy()
    )


def test_cell_rate_targets_are_hit():
    rates = {
        (2020, "L"): 0.55, (2020, "R"): 0.26,
        (2021, "L"): 0.55, (2021, "R"): 0.26,
    }
    cfg = scm.ScmConfig(
        seed=21, n_units=80000,
        treatment=scm.TreatmentSpec(year_side_rates=rates),
    )
    dataset, _ = scm.generate(cfg)
    for (year, side), target in rates.items():
        cell = dataset[(dataset["game_year"] == year) & (dataset["stand"] == side)]
        assert abs(cell[schema.TREATMENT].mean() - target) < 0.015


def test_config_round_trips_through_dict():
    cfg = scm.confounded_config(n_units=1234, seed=8)
    assert scm.ScmConfig.from_dict(cfg.to_dict()) == cfg
    league = scm.league_config(n_units=999, seed=2)
    assert scm.ScmConfig.from_dict(league.to_dict()) == league


def test_year_shares_must_sum_to_one():
    with pytest.raises(ValueError):
        scm.ScmConfig(years=(2020, 2021), year_shares=(0.7, 0.7)).shares()


def test_naive_ols_is_unbiased_without_the_hidden_confounder():
    report = scm.naive_ols_bias(scm.ScmConfig(seed=0, u_strength=0.0), n_rows=200000)
    assert abs(report["bias"]) < 3 * report["ols_se"]
    assert abs(report["bias"]) < 0.005


def test_confounded_config_biases_the_naive_regression_upward():
    report = scm.naive_ols_bias(scm.confounded_config(seed=0))
    assert 0.016 <= report["bias"] <= 0.024
    assert report["true_ett"] == -0.03


def test_league_config_marginals_roughly_match_targets():
    # the strict calibration check runs at 400k rows in the acceptance suite
    dataset, _ = scm.generate(scm.league_config(n_units=100000, seed=1))
    report = scm.marginals_report(dataset)
    grand = sum(c[0] for c in scm.LEAGUE_CELL_COUNTS.values())
    shifted = sum(c[1] for c in scm.LEAGUE_CELL_COUNTS.values())
    assert abs(report["treated_share"] - shifted / grand) < 0.02
    assert abs(report["outcome_mean"]) < 0.02
    assert abs(report["outcome_sd"] - 0.48) < 0.03
    assert len(report["shift_rates"]) == 16


def test_simulated_innings_are_chained_and_terminate():
    innings = scm.simulate_innings(40, seed=4)
    assert len(innings) == 40
    for plays in innings:
        assert plays[0].initial == scm.BaseOutState(False, False, False, 0)
        for prev, cur in zip(plays, plays[1:]):
            assert cur.initial == prev.final
        assert plays[-1].final is None
        assert all(p.delta_score >= 0 for p in plays)
        pairs = scm.plays_from_transitions(plays)
        assert pairs[0] == (plays[0].initial, plays[0].delta_score)
