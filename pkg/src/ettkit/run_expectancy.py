"""Base-out states, run-expectancy matrices, and per-play run-value deltas.

A plate appearance is valued by how it moves the expected number of runs an
average team scores in the remainder of the inning.  The state space is the
24 combinations of runner occupancy (first, second, third) and outs (0..2);
the three-out endpoint is not a state, it is the aggregation boundary and
carries expectation zero.  Ball-strike count is deliberately not part of the
state: appearances are valued from their base-out context only.
"""
from __future__ import annotations

import csv
import math
import re
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import EmptyInput, SeasonMismatch, UnvisitedState

__all__ = [
    "BaseOutState",
    "PlayTransition",
    "RunExpectancyMatrix",
    "build_re_matrix",
    "delta_run_expectancy",
    "telescoping_residual",
    "read_re_matrix",
    "write_re_matrix",
    "bundled_matrix",
]


@dataclass(frozen=True, order=True)
class BaseOutState:
    """Runner occupancy plus outs. Exactly 24 distinct values exist."""

    first: bool
    second: bool
    third: bool
    outs: int

    def __post_init__(self):
        for name in ("first", "second", "third"):
            if not isinstance(getattr(self, name), bool):
                raise TypeError(f"{name} must be bool, got {getattr(self, name)!r}")
        if self.outs not in (0, 1, 2):
            raise ValueError(f"outs must be 0, 1 or 2, got {self.outs!r}")

    @classmethod
    def all_states(cls) -> tuple["BaseOutState", ...]:
        return tuple(
            cls(bool(f), bool(s), bool(t), outs)
            for f in (0, 1)
            for s in (0, 1)
            for t in (0, 1)
            for outs in (0, 1, 2)
        )

    @property
    def runners(self) -> tuple[bool, bool, bool]:
        return (self.first, self.second, self.third)

    def __str__(self) -> str:
        bases = "".join("1" if r else "-" for r in self.runners)
        return f"{bases}/{self.outs}"


@dataclass(frozen=True)
class PlayTransition:
    """One play: starting state, resulting state (None once the third out
    is recorded), and runs scored on the play."""

    initial: BaseOutState
    final: BaseOutState | None
    delta_score: int
    season: int | None = None

    def __post_init__(self):
        if self.delta_score < 0:
            raise ValueError(f"delta_score must be >= 0, got {self.delta_score}")


class RunExpectancyMatrix:
    """Expected runs to the end of the inning for each of the 24 states.

    Parameters
    ----------
    season : int
        Season the matrix was estimated from.  Deltas may only be computed
        against transitions from the same season.
    values : mapping of BaseOutState to float
        Must cover all 24 states; every expectation must be nonnegative.
    """

    def __init__(self, season: int, values: Mapping[BaseOutState, float]):
        missing = [s for s in BaseOutState.all_states() if s not in values]
        if missing:
            raise UnvisitedState(f"matrix is missing {len(missing)} states, e.g. {missing[0]}")
        negative = {s: v for s, v in values.items() if v < 0}
        if negative:
            state, value = next(iter(negative.items()))
            raise ValueError(f"run expectancy must be >= 0; {state} has {value}")
        self.season = int(season)
        self._values = {s: float(values[s]) for s in BaseOutState.all_states()}

    def __getitem__(self, state: BaseOutState) -> float:
        return self._values[state]

    def expected_runs(self, state: BaseOutState | None) -> float:
        """Expectation for a state, with the three-out endpoint valued at 0."""
        return 0.0 if state is None else self._values[state]

    def outs_monotone_violations(self) -> list[tuple[BaseOutState, BaseOutState]]:
        """Pairs (earlier, later) where adding an out raised the expectation."""
        violations = []
        for state in BaseOutState.all_states():
            if state.outs == 2:
                continue
            later = BaseOutState(*state.runners, state.outs + 1)
            if self._values[later] > self._values[state]:
                violations.append((state, later))
        return violations

    def as_dict(self) -> dict[BaseOutState, float]:
        return dict(self._values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RunExpectancyMatrix):
            return NotImplemented
        return self.season == other.season and self._values == other._values

    def __repr__(self) -> str:
        return f"RunExpectancyMatrix(season={self.season}, 24 states)"


InningLog = Sequence[tuple[BaseOutState, int]]


def build_re_matrix(
    innings: Iterable[InningLog],
    season: int,
    monotonicity: str = "warn",
) -> RunExpectancyMatrix:
    """Estimate a run-expectancy matrix from complete-inning play logs.

    Parameters
    ----------
    innings : iterable of inning logs
        Each log is the sequence of (state before the play, runs scored on
        the play) for one inning, in order, for an inning that reached three
        outs.
    season : int
        Season tag attached to the matrix.
    monotonicity : {"warn", "raise"}
        Expectations should weakly decrease as outs increase for fixed
        runners.  Empirically built matrices may violate this by sampling
        noise, so the default only warns; simulator-built matrices should
        pass "raise".

    Returns
    -------
    RunExpectancyMatrix
        values[s] is the mean, over every visit to s, of the runs scored
        from that play to the end of the inning.

    Raises
    ------
    EmptyInput
        No innings, or no plays in any inning.
    UnvisitedState
        Some state never appears, leaving its expectation undefined.
    """
    if monotonicity not in ("warn", "raise"):
        raise ValueError(f"monotonicity must be 'warn' or 'raise', got {monotonicity!r}")
    totals: dict[BaseOutState, float] = {s: 0.0 for s in BaseOutState.all_states()}
    counts: dict[BaseOutState, int] = {s: 0 for s in BaseOutState.all_states()}
    n_plays = 0
    for log in innings:
        log = list(log)
        # Runs to the end of the inning from each play is a suffix sum.
        remaining = 0
        suffix = []
        for _, runs in reversed(log):
            remaining += runs
            suffix.append(remaining)
        suffix.reverse()
        for (state, _), to_end in zip(log, suffix):
            totals[state] += to_end
            counts[state] += 1
            n_plays += 1
    if n_plays == 0:
        raise EmptyInput("no plays supplied; cannot estimate a matrix")
    unvisited = [s for s, c in counts.items() if c == 0]
    if unvisited:
        raise UnvisitedState(
            f"{len(unvisited)} states never visited, e.g. {unvisited[0]}"
        )
    matrix = RunExpectancyMatrix(season, {s: totals[s] / counts[s] for s in totals})
    violations = matrix.outs_monotone_violations()
    if violations:
        msg = f"run expectancy rose with outs in {len(violations)} place(s), e.g. {violations[0]}"
        if monotonicity == "raise":
            raise ValueError(msg)
        warnings.warn(msg)
    return matrix


def delta_run_expectancy(transition: PlayTransition, matrix: RunExpectancyMatrix) -> float:
    """Run value of one play: RE(final) - RE(initial) + runs scored on the play."""
    if transition.season is not None and transition.season != matrix.season:
        raise SeasonMismatch(
            f"transition is from season {transition.season}, matrix from {matrix.season}"
        )
    return (
        matrix.expected_runs(transition.final)
        - matrix.expected_runs(transition.initial)
        + transition.delta_score
    )


def telescoping_residual(
    transitions: Sequence[PlayTransition], matrix: RunExpectancyMatrix
) -> float:
    """Exact check of the inning accounting identity sum(dRE) = runs - RE(start).

    Per-play deltas each round once, so adding them up only lands near zero.
    This evaluates sum(dRE) + RE(start) - runs with fsum over the unrounded
    pieces; on a correctly chained inning every expectation appears once with
    each sign and cancels bitwise, so the return value is exactly 0.0.  A
    broken chain (skipped or inconsistent states, miscounted runs) leaves a
    nonzero residual.
    """
    pieces: list[float] = []
    for tr in transitions:
        if tr.season is not None and tr.season != matrix.season:
            raise SeasonMismatch(
                f"transition is from season {tr.season}, matrix from {matrix.season}"
            )
        pieces.append(matrix.expected_runs(tr.final))
        pieces.append(-matrix.expected_runs(tr.initial))
        pieces.append(float(tr.delta_score))
    if not pieces:
        raise EmptyInput("no transitions supplied")
    pieces.append(matrix.expected_runs(transitions[0].initial))
    pieces.append(-float(sum(tr.delta_score for tr in transitions)))
    return math.fsum(pieces)


_CSV_COLUMNS = ["run1", "run2", "run3", "outs", "re_value"]


def write_re_matrix(matrix: RunExpectancyMatrix, directory: str | Path) -> Path:
    """Write the 24-row CSV; the season lives in the filename."""
    path = Path(directory) / f"re_matrix_{matrix.season}.csv"
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_CSV_COLUMNS)
        for state in BaseOutState.all_states():
            writer.writerow(
                [int(state.first), int(state.second), int(state.third), state.outs,
                 repr(matrix[state])]
            )
    return path


def read_re_matrix(path: str | Path, season: int | None = None) -> RunExpectancyMatrix:
    """Read a matrix CSV written by `write_re_matrix`.

    Lines starting with '#' are comments.  If `season` is not given it is
    parsed from the filename.
    """
    path = Path(path)
    if season is None:
        found = re.search(r"(\d{4})", path.stem)
        if not found:
            raise ValueError(f"cannot infer season from filename {path.name!r}")
        season = int(found.group(1))
    values: dict[BaseOutState, float] = {}
    with open(path, newline="") as handle:
        rows = csv.reader(line for line in handle if not line.startswith("#"))
        header = next(rows)
        if header != _CSV_COLUMNS:
            raise ValueError(f"unexpected columns {header!r}, want {_CSV_COLUMNS}")
        for row in rows:
            if not row:
                continue
            state = BaseOutState(bool(int(row[0])), bool(int(row[1])), bool(int(row[2])), int(row[3]))
            values[state] = float(row[4])
    return RunExpectancyMatrix(season, values)


def bundled_matrix(season: int) -> RunExpectancyMatrix:
    """Load a matrix shipped with the package (raises FileNotFoundError if absent)."""
    ref = resources.files("ettkit.data") / f"re_matrix_{season}.csv"
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled run-expectancy matrix for {season}")
    with resources.as_file(ref) as path:
        return read_re_matrix(path, season=season)
