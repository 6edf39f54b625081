"""Ingestion tests: plate-appearance aggregation, strictly lagged
covariates, the exclusion cascade, and end-to-end determinism.

The lagged statistics have recount oracles (tiny frames recomputed by hand)
plus one property that pins the whole point: a plate appearance's covariates
never depend on anything from that plate appearance or later.
"""
from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from _pitchdata import league_pitches, pitch_row as _pitch

from ettkit import ingest, schema
from ettkit.errors import EmptyAfterExclusion, EmptyInput, MissingCoordinates


# ---------------------------------------------------------------- spray angle


def test_spray_angle_up_the_middle_is_zero():
    assert ingest.spray_angle(ingest.FIELD_X_CENTER, 100.0, "R") == 0.0


def test_spray_angle_pull_side_is_negative_for_both_hands():
    # right-handed pull is toward left field (small x)
    assert ingest.spray_angle(80.0, 120.0, "R") < 0
    # left-handed pull is toward right field (large x); the flip keeps it negative
    assert ingest.spray_angle(170.0, 120.0, "L") < 0


def test_spray_angle_flips_sign_with_batter_hand():
    r = ingest.spray_angle(150.0, 120.0, "R")
    l = ingest.spray_angle(150.0, 120.0, "L")
    assert l == -r != 0


def test_spray_angle_known_diagonal():
    # 45 degrees off the home-to-second line, scaled onto field degrees
    x = ingest.FIELD_X_CENTER + 30.0
    y = ingest.FIELD_Y_HOME - 30.0
    assert ingest.spray_angle(x, y, "R") == pytest.approx(45.0 * ingest.SPRAY_SCALE)


def test_spray_angle_requires_coordinates():
    with pytest.raises(MissingCoordinates):
        ingest.spray_angle(np.nan, 100.0, "R")
    with pytest.raises(MissingCoordinates):
        ingest.spray_angle(None, None, "L")


# ------------------------------------------------------------- PA aggregation


def test_aggregate_to_pa_happy_path_sums_outcome_and_counts_pitches():
    pa = pd.DataFrame([
        _pitch(pitch_number=1, delta_run_exp=0.02),
        _pitch(pitch_number=2, delta_run_exp=-0.05),
        _pitch(pitch_number=3, delta_run_exp=0.10, launch_speed=95.0,
               launch_angle=12.0, hc_x=150.0, hc_y=120.0,
               events="single", woba_value=0.9, woba_denom=1),
    ])
    row = ingest.aggregate_to_pa(pa)
    assert not isinstance(row, ingest.Excluded)
    assert row[schema.TREATMENT] == 0
    assert row[schema.OUTCOME] == pytest.approx(0.07)
    assert row["n_pitches"] == 3
    assert row["launch_speed"] == 95.0
    assert row["events"] == "single"


def test_any_shifted_pitch_marks_the_whole_pa_treated():
    pa = pd.DataFrame([
        _pitch(pitch_number=1, if_fielding_alignment="Infield shift"),
        _pitch(pitch_number=2, if_fielding_alignment="Standard"),
    ])
    assert ingest.aggregate_to_pa(pa)[schema.TREATMENT] == 1


def test_strategic_alignment_counts_as_control():
    pa = pd.DataFrame([_pitch(if_fielding_alignment="Strategic")])
    assert ingest.aggregate_to_pa(pa)[schema.TREATMENT] == 0


def test_trajectory_comes_from_the_last_contact_pitch():
    pa = pd.DataFrame([
        _pitch(pitch_number=1, launch_speed=88.0, hc_x=100.0, hc_y=140.0),
        _pitch(pitch_number=2),
    ])
    row = ingest.aggregate_to_pa(pa)
    assert row["launch_speed"] == 88.0
    assert row["hc_x"] == 100.0


def test_pitch_order_in_the_frame_does_not_matter():
    shuffled = pd.DataFrame([
        _pitch(pitch_number=2, delta_run_exp=0.2),
        _pitch(pitch_number=1, delta_run_exp=0.1),
        _pitch(pitch_number=3, delta_run_exp=0.3),
    ])
    row = ingest.aggregate_to_pa(shuffled)
    assert row[schema.OUTCOME] == pytest.approx(0.6)


@pytest.mark.parametrize(
    ("mutate", "reason"),
    [
        (lambda rows: rows[2].update(pitch_number=4), "missing_pitches"),
        (lambda rows: rows[1].update(batter=999), "identity_change"),
        (lambda rows: rows[0].update(if_fielding_alignment=np.nan), "missing_alignment"),
        (lambda rows: rows[0].update(if_fielding_alignment="Four outfielders"), "unknown_alignment"),
        (lambda rows: rows[2].update(delta_run_exp=np.nan), "missing_delta_run_exp"),
    ],
)
def test_aggregation_drop_reasons(mutate, reason):
    rows = [_pitch(pitch_number=k) for k in (1, 2, 3)]
    mutate(rows)
    result = ingest.aggregate_to_pa(pd.DataFrame(rows))
    assert isinstance(result, ingest.Excluded)
    assert result.reason == reason


def test_fielding_team_falls_back_to_inning_half():
    top = pd.DataFrame([_pitch()]).drop(columns=["fielding_team"])
    assert ingest.aggregate_to_pa(top)["fielding_team"] == "AAA"
    bot = pd.DataFrame([_pitch(inning_topbot="Bot")]).drop(columns=["fielding_team"])
    assert ingest.aggregate_to_pa(bot)["fielding_team"] == "BBB"


def test_aggregate_pitches_tallies_drops_and_sorts():
    frame = pd.DataFrame(
        [_pitch(game_pk=2, delta_run_exp=0.3)]
        + [_pitch(game_pk=1, pitch_number=k) for k in (1, 3)]  # gap: dropped
        + [_pitch(game_pk=3, delta_run_exp=-0.1)]
    )
    pa, dropped = ingest.aggregate_pitches(frame)
    assert dropped == {"missing_pitches": 1}
    assert list(pa["game_pk"]) == [2, 3]
    assert "spray_angle" in pa.columns


def test_aggregate_pitches_rejects_empty_and_all_broken():
    with pytest.raises(EmptyInput):
        ingest.aggregate_pitches(pd.DataFrame())
    broken = pd.DataFrame([_pitch(if_fielding_alignment=np.nan)])
    with pytest.raises(EmptyAfterExclusion):
        ingest.aggregate_pitches(broken)


# --------------------------------------------------------- lagged covariates


def _pa_frame(launch, shifted, batter=7, team="S01"):
    n = len(launch)
    return pd.DataFrame({
        "game_year": 2021,
        "game_pk": np.arange(1, n + 1, dtype=np.int64),
        "at_bat_number": np.ones(n, dtype=np.int64),
        "batter": batter, "pitcher": 9,
        "fielding_team": team, "stand": "R", "p_throws": "L",
        schema.TREATMENT: shifted,
        schema.OUTCOME: 0.0,
        "launch_speed": launch, "launch_angle": 10.0, "spray_angle": 0.0,
        "events": np.nan, "woba_value": np.nan, "woba_denom": np.nan,
        "babip_value": np.nan,
    })


def test_lagged_batter_stats_match_a_recount():
    launch = [90.0, np.nan, 94.0, 88.0, np.nan, 100.0]
    out = ingest.cumulative_covariates(_pa_frame(launch, [0, 1, 0, 0, 1, 0]))
    for i in range(len(launch)):
        prior = [v for v in launch[:i] if not np.isnan(v)]
        mean = out.loc[i, "bat_launch_speed_avg"]
        sd = out.loc[i, "bat_launch_speed_sd"]
        if len(prior) >= 1:
            assert mean == pytest.approx(float(np.mean(prior)), abs=1e-12)
        else:
            assert np.isnan(mean)
        if len(prior) >= 2:
            assert sd == pytest.approx(float(np.std(prior, ddof=1)), abs=1e-12)
        else:
            assert np.isnan(sd)
    assert list(out["bat_pa_before"]) == list(range(6))


def test_lagged_team_rate_matches_a_recount():
    shifted = [0, 1, 0, 0, 1, 0]
    out = ingest.cumulative_covariates(_pa_frame([90.0] * 6, shifted))
    for i in range(6):
        prior = shifted[:i]
        z = out.loc[i, schema.INSTRUMENT]
        if prior:
            rate = float(np.mean(prior))
            assert z == pytest.approx(rate, abs=1e-12)
            assert out.loc[i, schema.INSTRUMENT_SE] == pytest.approx(
                np.sqrt(rate * (1 - rate) / len(prior)), abs=1e-12
            )
        else:
            assert np.isnan(z)


def test_woba_rate_uses_value_over_denom():
    pa = _pa_frame([90.0] * 4, [0, 0, 0, 0])
    pa["woba_value"] = [0.9, 0.0, np.nan, 0.0]
    pa["woba_denom"] = [1.0, 1.0, 0.0, 1.0]
    out = ingest.cumulative_covariates(pa)
    # denom 0 contributes nothing; last row lags rows 0, 1, 3 -> skip row 2
    assert out.loc[2, "bat_woba_avg"] == pytest.approx(0.45)
    assert out.loc[3, "bat_woba_avg"] == pytest.approx(0.45)


def test_strikeout_and_walk_rates_come_from_events():
    pa = _pa_frame([90.0] * 5, [0] * 5)
    pa["events"] = ["strikeout", "walk", "field_out", "strikeout_double_play", "single"]
    out = ingest.cumulative_covariates(pa)
    assert out.loc[4, "bat_strikeout_avg"] == pytest.approx(0.5)
    assert out.loc[4, "bat_walk_avg"] == pytest.approx(0.25)


def test_covariates_never_use_the_current_or_later_rows():
    """Bumping one plate appearance's inputs must leave every covariate at
    that row and before unchanged, and must propagate afterwards."""
    gen = np.random.default_rng(5)
    n = 40
    launch = np.where(gen.random(n) < 0.8, gen.normal(90, 6, n), np.nan)
    shifted = (gen.random(n) < 0.4).astype(np.int64)
    base = _pa_frame(list(launch), list(shifted))
    out0 = ingest.cumulative_covariates(base)

    k = 17
    bumped = base.copy()
    bumped.loc[k, "launch_speed"] = 130.0
    bumped.loc[k, schema.TREATMENT] = 1 - bumped.loc[k, schema.TREATMENT]
    out1 = ingest.cumulative_covariates(bumped)

    cols = [c for c in out0.columns if c.startswith(("bat_", "pit_"))]
    cols += [schema.INSTRUMENT, schema.INSTRUMENT_SE]
    pd.testing.assert_frame_equal(out0.loc[:k, cols], out1.loc[:k, cols])
    assert not out0.loc[k + 1:, cols].equals(out1.loc[k + 1:, cols])


def test_pitcher_trajectory_is_pitch_weighted():
    pitches = pd.DataFrame([
        _pitch(game_pk=1, pitch_number=1, release_speed=90.0),
        _pitch(game_pk=1, pitch_number=2, release_speed=94.0),
        _pitch(game_pk=2, pitch_number=1, release_speed=80.0),
        _pitch(game_pk=3, pitch_number=1, release_speed=86.0),
    ])
    pa, _ = ingest.aggregate_pitches(pitches)
    out = ingest.cumulative_covariates(pa, pitches)
    assert np.isnan(out.loc[0, "pit_release_speed_avg"])
    assert out.loc[1, "pit_release_speed_avg"] == pytest.approx(92.0)
    # three prior pitches, not two prior plate appearances
    assert out.loc[2, "pit_release_speed_avg"] == pytest.approx(88.0)
    assert out.loc[2, "pit_release_speed_sd"] == pytest.approx(
        float(np.std([90.0, 94.0, 80.0], ddof=1))
    )


def test_team_shift_propensity_summary():
    rate, se = ingest.team_shift_propensity([1, 0, 1, 0])
    assert rate == 0.5
    assert se == pytest.approx(0.25)
    rate, se = ingest.team_shift_propensity([])
    assert np.isnan(rate) and np.isnan(se)


# ----------------------------------------------------------------- exclusions


def test_ledger_validates_and_round_trips():
    ledger = ingest.ExclusionLedger(initial_rows=10, stages=[("a", 8), ("b", 8), ("c", 3)])
    ledger.validate()
    again = ingest.ExclusionLedger.from_json(ledger.to_json())
    assert again == ledger
    bad = ingest.ExclusionLedger(initial_rows=5, stages=[("a", 7)])
    with pytest.raises(ValueError):
        bad.validate()


@pytest.fixture(scope="module")
def ingested():
    pitches = league_pitches()
    dataset, ledger = ingest.ingest_pitch_csv(pitches)
    return pitches, dataset, ledger


def test_ingest_emits_a_valid_dataset(ingested):
    _, dataset, _ = ingested
    schema.validate_dataset(dataset)
    covs = schema.covariate_columns(dataset)
    assert dataset[covs].notna().all().all()
    assert dataset[schema.INSTRUMENT].between(0, 1).all()


def test_ingest_ledger_counts_every_plate_appearance(ingested):
    pitches, dataset, ledger = ingested
    total = pitches.groupby(["game_year", "game_pk", "at_bat_number"]).ngroups
    assert ledger.initial_rows == total
    counts = [ledger.initial_rows] + [n for _, n in ledger.stages]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert counts[-1] == len(dataset)
    names = [rule for rule, _ in ledger.stages]
    assert names[:2] == ["aggregation:missing_pitches", "aggregation:unknown_alignment"]
    assert names[2:] == [
        "switch_hitters", "ambidextrous_pitchers", "batter_without_trajectory",
        "pitcher_without_trajectory", "min_prior_history", "missing_covariates",
    ]


def test_ingest_drops_the_switch_hitter_and_short_histories(ingested):
    _, dataset, _ = ingested
    assert 104 not in set(dataset["batter"])
    assert set(dataset["batter"]) <= {101, 102, 103}


def test_ingest_outcome_is_conserved_from_pitches(ingested):
    pitches, dataset, _ = ingested
    sums = pitches.groupby(["game_year", "game_pk", "at_bat_number"])["delta_run_exp"].sum()
    for _, row in dataset.head(50).iterrows():
        key = (row["game_year"], row["game_pk"], row["at_bat_number"])
        assert row[schema.OUTCOME] == pytest.approx(sums.loc[key], abs=1e-12)


def test_ingest_is_thread_count_invariant(ingested):
    pitches, dataset, ledger = ingested
    again, ledger4 = ingest.ingest_pitch_csv(pitches, threads=4)
    pd.testing.assert_frame_equal(dataset, again)
    assert ledger4 == ledger


def test_ingest_reads_a_csv_file(tmp_path, ingested):
    pitches, dataset, _ = ingested
    path = tmp_path / "pitches.csv"
    pitches.to_csv(path, index=False)
    from_file, _ = ingest.ingest_pitch_csv(path)
    pd.testing.assert_frame_equal(from_file, dataset)


def test_ingest_rejects_empty_input():
    with pytest.raises(EmptyInput):
        ingest.ingest_pitch_csv(pd.DataFrame())
