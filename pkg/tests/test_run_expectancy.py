"""Run-expectancy matrix estimation and per-play deltas.

The estimation oracle here is a deliberately naive reimplementation: walk
every inning, collect runs-to-inning-end per state visit into Python lists,
and average.  The product code uses suffix sums; the two must agree.
"""
import math

import numpy as np
import pytest

from ettkit import scm
from ettkit.errors import EmptyInput, SeasonMismatch, UnvisitedState
from ettkit.run_expectancy import (
    BaseOutState,
    PlayTransition,
    RunExpectancyMatrix,
    build_re_matrix,
    bundled_matrix,
    delta_run_expectancy,
    read_re_matrix,
    telescoping_residual,
    write_re_matrix,
)

EMPTY = BaseOutState(False, False, False, 0)


def oracle_matrix(innings, season):
    """Per-visit averaging with no shared passes over the data."""
    visits = {}
    for log in innings:
        log = list(log)
        for i, (state, _) in enumerate(log):
            to_end = sum(r for _, r in log[i:])
            visits.setdefault(state, []).append(to_end)
    values = {s: sum(v) / len(v) for s, v in visits.items()}
    return RunExpectancyMatrix(season, values)


@pytest.fixture(scope="module")
def sim_innings():
    return scm.simulate_innings(3000, seed=20, season=2018)


@pytest.fixture(scope="module")
def sim_logs(sim_innings):
    return [scm.plays_from_transitions(tr) for tr in sim_innings]


def test_state_space_has_24_members():
    states = BaseOutState.all_states()
    assert len(states) == 24
    assert len(set(states)) == 24


def test_state_validation():
    with pytest.raises(ValueError):
        BaseOutState(False, False, False, 3)
    with pytest.raises(TypeError):
        BaseOutState(1, False, False, 0)


def test_build_matches_naive_oracle(sim_innings, sim_logs):
    built = build_re_matrix(sim_logs, season=2018)
    oracle = oracle_matrix(sim_logs, season=2018)
    for state in BaseOutState.all_states():
        assert built[state] == pytest.approx(oracle[state], abs=1e-12)


def test_build_is_inning_order_invariant(sim_logs):
    forward = build_re_matrix(sim_logs, season=2018)
    backward = build_re_matrix(list(reversed(sim_logs)), season=2018)
    for state in BaseOutState.all_states():
        assert forward[state] == pytest.approx(backward[state], abs=1e-12)


def test_empty_state_expectation_is_sane(sim_logs):
    # League-average innings score ~0.5 runs; the simulator is in that range.
    matrix = build_re_matrix(sim_logs, season=2018)
    assert 0.2 < matrix[EMPTY] < 0.9
    assert matrix.outs_monotone_violations() == []


def test_unvisited_state_raises():
    one_inning = [[(EMPTY, 0), (BaseOutState(False, False, False, 1), 0),
                   (BaseOutState(False, False, False, 2), 0)]]
    with pytest.raises(UnvisitedState):
        build_re_matrix(one_inning, season=2018)


def test_no_plays_raises():
    with pytest.raises(EmptyInput):
        build_re_matrix([], season=2018)
    with pytest.raises(EmptyInput):
        build_re_matrix([[]], season=2018)


def test_delta_is_antisymmetric_between_states():
    m = bundled_matrix(2018)
    a = BaseOutState(True, False, False, 0)
    b = BaseOutState(False, True, False, 0)
    fwd = delta_run_expectancy(PlayTransition(a, b, 0), m)
    back = delta_run_expectancy(PlayTransition(b, a, 0), m)
    assert fwd == -back


def test_delta_counts_runs():
    m = bundled_matrix(2018)
    stay = PlayTransition(EMPTY, EMPTY, 1)
    assert delta_run_expectancy(stay, m) == pytest.approx(1.0)


def test_season_mismatch_rejected():
    m = bundled_matrix(2018)
    with pytest.raises(SeasonMismatch):
        delta_run_expectancy(PlayTransition(EMPTY, None, 0, season=2017), m)


def test_bundled_2018_strikeout_examples():
    """Two published 2018 reference deltas, at the matrix's 2-dp precision."""
    m = bundled_matrix(2018)
    empty_k = PlayTransition(EMPTY, BaseOutState(False, False, False, 1), 0, season=2018)
    assert delta_run_expectancy(empty_k, m) == pytest.approx(-0.24, abs=5e-3)
    loaded = BaseOutState(True, True, True, 1)
    loaded_k = PlayTransition(loaded, BaseOutState(True, True, True, 2), 0, season=2018)
    assert delta_run_expectancy(loaded_k, m) == pytest.approx(-0.81, abs=5e-3)


def test_telescoping_exact_on_simulated_innings(sim_innings, sim_logs):
    matrix = build_re_matrix(sim_logs, season=2018)
    for transitions in sim_innings:
        assert telescoping_residual(transitions, matrix) == 0.0


def test_telescoping_rounded_path_is_tiny(sim_innings, sim_logs):
    # Summing the individually rounded deltas cannot be bitwise zero, but it
    # must stay within a few ulps of the identity.
    matrix = build_re_matrix(sim_logs, season=2018)
    for transitions in sim_innings[:500]:
        total = math.fsum(delta_run_expectancy(t, matrix) for t in transitions)
        runs = sum(t.delta_score for t in transitions)
        start = matrix.expected_runs(transitions[0].initial)
        assert abs(total + start - runs) < 1e-12


def test_telescoping_flags_broken_chain():
    m = bundled_matrix(2018)
    s1 = BaseOutState(False, False, False, 1)
    broken = [
        PlayTransition(EMPTY, s1, 0, season=2018),
        # chain skips a state on purpose
        PlayTransition(BaseOutState(True, False, False, 1), None, 0, season=2018),
    ]
    assert telescoping_residual(broken, m) != 0.0


def test_matrix_csv_round_trip(tmp_path, sim_logs):
    matrix = build_re_matrix(sim_logs, season=2018)
    path = write_re_matrix(matrix, tmp_path)
    again = read_re_matrix(path)
    assert again == matrix
    assert again.season == 2018


def test_read_infers_season_from_name(tmp_path):
    m = bundled_matrix(2018)
    path = write_re_matrix(m, tmp_path)
    assert read_re_matrix(path).season == 2018
    assert read_re_matrix(path, season=1999).season == 1999


def test_simulated_runs_per_inning_reasonable(sim_innings):
    per_inning = [sum(t.delta_score for t in tr) for tr in sim_innings]
    mean = np.mean(per_inning)
    assert 0.3 < mean < 0.8
