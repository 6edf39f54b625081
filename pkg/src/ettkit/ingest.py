"""Pitch-level ingestion: aggregate to plate appearances, build lagged
within-season covariates, and apply the exclusion cascade.

Input is a pitch-level CSV using public tracking-data field names
(if_fielding_alignment, delta_run_exp, stand, p_throws, launch_speed,
launch_angle, hc_x, hc_y, plate_x, plate_z, release_speed,
release_spin_rate, events, woba_value, woba_denom, babip_value), with
missing values as empty fields.  Output is an analysis dataset in the shared
schema plus an ordered exclusion ledger.

Rows are ordered chronologically within a season by (game_pk,
at_bat_number); all cumulative statistics are strictly lagged, never
touching the current plate appearance.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import schema
from .errors import EmptyAfterExclusion, EmptyInput, MissingCoordinates

__all__ = [
    "spray_angle",
    "Excluded",
    "aggregate_to_pa",
    "aggregate_pitches",
    "cumulative_covariates",
    "team_shift_propensity",
    "ExclusionLedger",
    "apply_exclusions",
    "ingest_pitch_csv",
]

# Hit-coordinate calibration.  The tracking feed reports landing positions
# in a screen-style frame: x grows toward right field, y grows toward home
# plate.  These constants place home plate and the home-to-second line in
# that frame; the scale maps the raw arctangent onto field degrees.
FIELD_X_CENTER = 125.42
FIELD_Y_HOME = 198.27
SPRAY_SCALE = 0.75

SHIFT_LABEL = "Infield shift"
CONTROL_LABELS = ("Standard", "Strategic")

_WALK_EVENTS = frozenset({"walk"})
_STRIKEOUT_EVENTS = frozenset({"strikeout", "strikeout_double_play"})

MIN_PRIOR_PA = 10


def spray_angle(hc_x: float, hc_y: float, stand: str) -> float:
    """Horizontal angle of a batted ball, in degrees.

    Zero points at second base; the sign is flipped for left-handed batters
    so that negative always means the pull side.
    """
    if hc_x is None or hc_y is None or np.isnan(hc_x) or np.isnan(hc_y):
        raise MissingCoordinates("hit coordinates are missing")
    angle = np.degrees(np.arctan2(hc_x - FIELD_X_CENTER, FIELD_Y_HOME - hc_y)) * SPRAY_SCALE
    if stand == "L":
        angle = -angle
    return float(angle)


def _spray_angle_column(df: pd.DataFrame) -> np.ndarray:
    """Vectorized spray angle; missing coordinates yield NaN."""
    hc_x = df["hc_x"].to_numpy(dtype=float)
    hc_y = df["hc_y"].to_numpy(dtype=float)
    angle = np.degrees(np.arctan2(hc_x - FIELD_X_CENTER, FIELD_Y_HOME - hc_y)) * SPRAY_SCALE
    return np.where(df["stand"].to_numpy() == "L", -angle, angle)


@dataclass(frozen=True)
class Excluded:
    """A plate appearance dropped during aggregation, with the reason."""

    reason: str


def _fielding_team(pitch: pd.Series) -> object:
    if "fielding_team" in pitch.index and not pd.isna(pitch["fielding_team"]):
        return pitch["fielding_team"]
    # Top half: the home side is in the field; bottom half: the visitors.
    if str(pitch.get("inning_topbot")) == "Top":
        return pitch["home_team"]
    return pitch["away_team"]


def aggregate_to_pa(pitches: pd.DataFrame) -> dict | Excluded:
    """Collapse the pitches of one plate appearance to a single record.

    Treatment is 1 if any pitch was thrown with a shifted infield; strategic
    alignments count as unshifted.  The outcome is the summed per-pitch
    change in run expectancy.  Returns Excluded instead of raising: dropped
    plate appearances are data, not faults.
    """
    pitches = pitches.sort_values("pitch_number")
    for col in ("batter", "pitcher", "stand", "p_throws"):
        if pitches[col].nunique(dropna=False) > 1:
            return Excluded("identity_change")
    numbers = pitches["pitch_number"].to_numpy()
    if not np.array_equal(numbers, np.arange(1, len(numbers) + 1)):
        return Excluded("missing_pitches")
    alignment = pitches["if_fielding_alignment"]
    if alignment.isna().any():
        return Excluded("missing_alignment")
    if not alignment.isin((SHIFT_LABEL,) + CONTROL_LABELS).all():
        return Excluded("unknown_alignment")
    if pitches["delta_run_exp"].isna().any():
        return Excluded("missing_delta_run_exp")

    last = pitches.iloc[-1]
    contact = pitches[pitches["launch_speed"].notna()]
    row = {
        "game_pk": last["game_pk"],
        "at_bat_number": last["at_bat_number"],
        "game_year": last["game_year"],
        "batter": last["batter"],
        "pitcher": last["pitcher"],
        "fielding_team": _fielding_team(last),
        "stand": last["stand"],
        "p_throws": last["p_throws"],
        schema.TREATMENT: int((alignment == SHIFT_LABEL).any()),
        schema.OUTCOME: float(pitches["delta_run_exp"].sum()),
        "n_pitches": len(pitches),
        "events": last.get("events", np.nan),
        "woba_value": last.get("woba_value", np.nan),
        "woba_denom": last.get("woba_denom", np.nan),
        "babip_value": last.get("babip_value", np.nan),
        "launch_speed": np.nan,
        "launch_angle": np.nan,
        "hc_x": np.nan,
        "hc_y": np.nan,
    }
    if len(contact):
        hit = contact.iloc[-1]
        for col in ("launch_speed", "launch_angle", "hc_x", "hc_y"):
            row[col] = hit.get(col, np.nan)
    return row


def aggregate_pitches(pitches: pd.DataFrame) -> tuple[pd.DataFrame, dict[str, int]]:
    """Aggregate every plate appearance in a pitch frame.

    Returns the plate-appearance frame, sorted by (game_year, game_pk,
    at_bat_number), and a tally of exclusion reasons.
    """
    if pitches.empty:
        raise EmptyInput("pitch frame is empty")
    rows = []
    dropped: dict[str, int] = {}
    for _, group in pitches.groupby(["game_year", "game_pk", "at_bat_number"], sort=True):
        result = aggregate_to_pa(group)
        if isinstance(result, Excluded):
            dropped[result.reason] = dropped.get(result.reason, 0) + 1
        else:
            rows.append(result)
    if not rows:
        raise EmptyAfterExclusion("no complete plate appearances after aggregation")
    pa = pd.DataFrame(rows)
    pa = pa.sort_values(["game_year", "game_pk", "at_bat_number"], kind="stable")
    pa = pa.reset_index(drop=True)
    spray = np.full(len(pa), np.nan)
    has_hit = pa["hc_x"].notna() & pa["hc_y"].notna()
    if has_hit.any():
        spray[has_hit.to_numpy()] = _spray_angle_column(pa.loc[has_hit])
    pa["spray_angle"] = spray
    return pa, dropped


def _lagged_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Running mean and sample SD of the strictly-prior non-missing values.

    Returns (mean, sd, prior_count) aligned to the input; mean needs one
    prior observation, sd needs two.
    """
    x = np.asarray(values, dtype=float)
    present = ~np.isnan(x)
    filled = np.where(present, x, 0.0)
    cnt = np.concatenate(([0], np.cumsum(present)))[:-1].astype(float)
    s = np.concatenate(([0.0], np.cumsum(filled)))[:-1]
    ss = np.concatenate(([0.0], np.cumsum(filled * filled)))[:-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(cnt >= 1, s / np.maximum(cnt, 1), np.nan)
        var = (ss - cnt * mean * mean) / np.maximum(cnt - 1, 1)
        sd = np.where(cnt >= 2, np.sqrt(np.maximum(var, 0.0)), np.nan)
        mean = np.where(cnt >= 1, mean, np.nan)
    return mean, sd, cnt


def team_shift_propensity(history) -> tuple[float, float]:
    """Shift rate over a team's prior plate appearances, with its binomial
    standard error.  Empty history returns (nan, nan)."""
    t = np.asarray(history, dtype=float)
    if t.size == 0:
        return float("nan"), float("nan")
    rate = float(t.mean())
    se = float(np.sqrt(rate * (1.0 - rate) / t.size))
    return rate, se


# (statistic source column, output stem) pairs computed per plate appearance.
_PA_STATS = (
    ("launch_speed", "launch_speed"),
    ("launch_angle", "launch_angle"),
    ("spray_angle", "spray_angle"),
    ("_woba", "woba"),
    ("babip_value", "babip"),
    ("_walk", "walk"),
    ("_strikeout", "strikeout"),
)

# Per-pitch trajectory statistics for pitchers.
_PITCH_STATS = ("release_speed", "release_spin_rate", "plate_x", "plate_z")


def _maybe(frame: pd.DataFrame, name: str) -> pd.Series:
    if name in frame.columns:
        return frame[name]
    return pd.Series(np.nan, index=frame.index)


def _event_columns(pa: pd.DataFrame) -> pd.DataFrame:
    out = pa.copy()
    denom = pd.to_numeric(_maybe(out, "woba_denom"), errors="coerce")
    value = pd.to_numeric(_maybe(out, "woba_value"), errors="coerce")
    out["_woba"] = np.where(denom.fillna(0) > 0, value / denom.replace(0, np.nan), np.nan)
    events = _maybe(out, "events")
    out["_walk"] = events.isin(_WALK_EVENTS).astype(float)
    out["_strikeout"] = events.isin(_STRIKEOUT_EVENTS).astype(float)
    if "babip_value" not in out.columns:
        out["babip_value"] = np.nan
    return out


def _player_lags(pa: pd.DataFrame, player_col: str, prefix: str, stems) -> pd.DataFrame:
    """Lagged per-PA statistics for one player role within one season."""
    result = pd.DataFrame(index=pa.index)
    for _, group in pa.groupby(player_col, sort=False):
        for source, stem in stems:
            mean, sd, cnt = _lagged_stats(group[source].to_numpy(dtype=float))
            result.loc[group.index, f"{prefix}_{stem}_avg"] = mean
            result.loc[group.index, f"{prefix}_{stem}_sd"] = sd
        result.loc[group.index, f"{prefix}_pa_before"] = np.arange(len(group), dtype=float)
    return result


def _pitcher_pitch_lags(pa: pd.DataFrame, pitches: pd.DataFrame) -> pd.DataFrame:
    """Pitch-weighted lagged trajectory statistics per pitcher, aligned to
    plate appearances.  Prior pitches are all pitches of strictly earlier
    plate appearances within the season."""
    keyed = pitches.sort_values(
        ["game_year", "pitcher", "game_pk", "at_bat_number", "pitch_number"], kind="stable"
    )
    frames = []
    for _, group in keyed.groupby(["game_year", "pitcher"], sort=False):
        pa_key = group["game_pk"].astype(str) + ":" + group["at_bat_number"].astype(str)
        starts = (pa_key != pa_key.shift()).to_numpy()
        start_idx = np.flatnonzero(starts)
        rows = {
            "game_year": group["game_year"].to_numpy()[start_idx],
            "game_pk": group["game_pk"].to_numpy()[start_idx],
            "at_bat_number": group["at_bat_number"].to_numpy()[start_idx],
            "pitcher": group["pitcher"].to_numpy()[start_idx],
        }
        for stat in _PITCH_STATS:
            x = group[stat].to_numpy(dtype=float)
            present = ~np.isnan(x)
            filled = np.where(present, x, 0.0)
            cnt = np.concatenate(([0.0], np.cumsum(present)))
            s = np.concatenate(([0.0], np.cumsum(filled)))
            ss = np.concatenate(([0.0], np.cumsum(filled * filled)))
            c = cnt[start_idx]
            with np.errstate(invalid="ignore", divide="ignore"):
                mean = np.where(c >= 1, s[start_idx] / np.maximum(c, 1), np.nan)
                var = (ss[start_idx] - c * mean * mean) / np.maximum(c - 1, 1)
                sd = np.where(c >= 2, np.sqrt(np.maximum(var, 0.0)), np.nan)
            rows[f"pit_{stat}_avg"] = mean
            rows[f"pit_{stat}_sd"] = sd
        frames.append(pd.DataFrame(rows))
    merged = pd.concat(frames, ignore_index=True)
    return pa.merge(merged, on=["game_year", "game_pk", "at_bat_number", "pitcher"], how="left")


def _season_covariates(pa: pd.DataFrame, pitches: pd.DataFrame | None) -> pd.DataFrame:
    pa = _event_columns(pa)
    bat = _player_lags(pa, "batter", "bat", _PA_STATS)
    pit_outcomes = _player_lags(
        pa, "pitcher", "pit", [(s, n) for s, n in _PA_STATS if n in ("woba", "babip", "walk", "strikeout")]
    )
    out = pd.concat([pa, bat, pit_outcomes.drop(columns=["pit_pa_before"])], axis=1)
    out["pit_pa_before"] = pit_outcomes["pit_pa_before"]
    if pitches is not None:
        out = _pitcher_pitch_lags(out, pitches)
    # Team shift propensity, strictly lagged within season.
    rate = np.full(len(out), np.nan)
    se = np.full(len(out), np.nan)
    for _, group in out.groupby("fielding_team", sort=False):
        t = group[schema.TREATMENT].to_numpy(dtype=float)
        mean, _, cnt = _lagged_stats(t)
        idx = group.index.to_numpy()
        with np.errstate(invalid="ignore", divide="ignore"):
            group_se = np.sqrt(mean * (1.0 - mean) / np.maximum(cnt, 1))
        rate[idx] = mean
        se[idx] = np.where(cnt >= 1, group_se, np.nan)
    out[schema.INSTRUMENT] = rate
    out[schema.INSTRUMENT_SE] = se
    return out


def cumulative_covariates(
    pa: pd.DataFrame, pitches: pd.DataFrame | None = None, threads: int = 1
) -> pd.DataFrame:
    """Attach strictly-lagged within-season covariates to plate appearances.

    Batter and pitcher outcome statistics lag per plate appearance; pitcher
    trajectory statistics are pitch-weighted, so they need the pitch frame.
    Seasons are independent and may be processed by several workers; the
    merged output is sorted by plate-appearance key, so it is identical for
    any worker count.
    """
    pa = pa.sort_values(["game_year", "game_pk", "at_bat_number"], kind="stable")
    pa = pa.reset_index(drop=True)
    seasons = [int(y) for y in pa["game_year"].drop_duplicates()]

    def one(year: int) -> pd.DataFrame:
        block = pa[pa["game_year"] == year].reset_index(drop=True)
        sub_pitch = None
        if pitches is not None:
            sub_pitch = pitches[pitches["game_year"] == year]
        return _season_covariates(block, sub_pitch)

    if threads > 1 and len(seasons) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(one, seasons))
    else:
        blocks = [one(y) for y in seasons]
    out = pd.concat(blocks, ignore_index=True)
    out = out.sort_values(["game_year", "game_pk", "at_bat_number"], kind="stable")
    return out.reset_index(drop=True)


@dataclass
class ExclusionLedger:
    """Ordered record of the exclusion cascade: rule name and rows left."""

    initial_rows: int
    stages: list[tuple[str, int]]

    def validate(self) -> None:
        previous = self.initial_rows
        for rule, remaining in self.stages:
            if remaining > previous:
                raise ValueError(f"ledger rule {rule!r} increased the row count")
            previous = remaining

    def to_json(self) -> str:
        doc = {
            "initial_rows": self.initial_rows,
            "stages": [{"rule": rule, "rows_remaining": n} for rule, n in self.stages],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExclusionLedger":
        doc = json.loads(text)
        return cls(
            initial_rows=int(doc["initial_rows"]),
            stages=[(s["rule"], int(s["rows_remaining"])) for s in doc["stages"]],
        )


def apply_exclusions(pa: pd.DataFrame) -> tuple[pd.DataFrame, ExclusionLedger]:
    """Run the row-level exclusion cascade and emit the final dataset.

    Stages, in order: switch hitters, ambidextrous pitchers, batter seasons
    without any tracked trajectory, pitcher seasons without any tracked
    pitch trajectory, short lagged history, and residual missing covariate
    or instrument values.
    """
    stages: list[tuple[str, int]] = []
    initial = len(pa)
    kept = pa

    multi_stand = kept.groupby(["game_year", "batter"])["stand"].transform("nunique") > 1
    kept = kept[~multi_stand]
    stages.append(("switch_hitters", len(kept)))

    multi_throw = kept.groupby(["game_year", "pitcher"])["p_throws"].transform("nunique") > 1
    kept = kept[~multi_throw]
    stages.append(("ambidextrous_pitchers", len(kept)))

    has_bat_traj = kept.groupby(["game_year", "batter"])["launch_speed"].transform(
        lambda s: s.notna().any()
    )
    kept = kept[has_bat_traj]
    stages.append(("batter_without_trajectory", len(kept)))

    if "pit_release_speed_avg" in kept.columns:
        # A pitcher season with no tracked pitches never accumulates a
        # trajectory average, even at the final plate appearance.
        last_has = kept.groupby(["game_year", "pitcher"])["pit_release_speed_avg"].transform(
            lambda s: s.notna().any()
        )
        kept = kept[last_has]
    stages.append(("pitcher_without_trajectory", len(kept)))

    enough = (kept["bat_pa_before"] >= MIN_PRIOR_PA) & (kept["pit_pa_before"] >= MIN_PRIOR_PA)
    kept = kept[enough]
    stages.append(("min_prior_history", len(kept)))

    check_cols = schema.covariate_columns(kept) + [schema.INSTRUMENT, schema.INSTRUMENT_SE]
    kept = kept.dropna(subset=[c for c in check_cols if c in kept.columns])
    stages.append(("missing_covariates", len(kept)))

    ledger = ExclusionLedger(initial_rows=initial, stages=stages)
    ledger.validate()
    if kept.empty:
        raise EmptyAfterExclusion("no rows survive the exclusion cascade")

    keep_cols = [
        *schema.KEYS,
        "stand",
        "p_throws",
        schema.TREATMENT,
        schema.OUTCOME,
        schema.INSTRUMENT,
        schema.INSTRUMENT_SE,
        *schema.covariate_columns(kept),
    ]
    dataset = kept[[c for c in dict.fromkeys(keep_cols)]].reset_index(drop=True)
    return dataset, ledger


def ingest_pitch_csv(
    source: str | Path | pd.DataFrame, threads: int = 1
) -> tuple[pd.DataFrame, ExclusionLedger]:
    """Full pipeline: pitch CSV (or frame) to analysis dataset plus ledger."""
    if isinstance(source, pd.DataFrame):
        pitches = source
    else:
        pitches = pd.read_csv(source)
    if pitches.empty:
        raise EmptyInput("no pitch rows to ingest")
    pa, dropped = aggregate_pitches(pitches)
    covered = cumulative_covariates(pa, pitches, threads=threads)
    dataset, ledger = apply_exclusions(covered)
    # Aggregation drops precede the cascade; fold them into one ledger.
    running = len(pa) + sum(dropped.values())
    pre: list[tuple[str, int]] = []
    for reason in sorted(dropped):
        running -= dropped[reason]
        pre.append((f"aggregation:{reason}", running))
    ledger = ExclusionLedger(
        initial_rows=len(pa) + sum(dropped.values()),
        stages=pre + ledger.stages,
    )
    ledger.validate()
    return dataset, ledger
