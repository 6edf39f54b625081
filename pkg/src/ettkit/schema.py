"""Analysis-dataset schema: column names and dataset file I/O.

Both the ingestion pipeline and the synthetic generator emit this schema, so
every estimator consumes either source identically.  Datasets travel as plain
CSV or as a columnar .npz cache; both carry a schema-version stamp.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
import pandas as pd

SCHEMA_VERSION = "1"

TREATMENT = "shifted"
OUTCOME = "delta_run_exp"
INSTRUMENT = "team_shift_rate"
INSTRUMENT_SE = "team_shift_rate_se"
BATTER_SIDE = "stand"
PITCHER_HAND = "p_throws"
YEAR = "game_year"

KEYS = ("game_pk", "at_bat_number", "game_year", "batter", "pitcher", "fielding_team")

# Lagged within-season batter measurements (avg, sd) pairs.
BATTER_BLOCK = (
    "bat_launch_speed_avg", "bat_launch_speed_sd",
    "bat_launch_angle_avg", "bat_launch_angle_sd",
    "bat_spray_angle_avg", "bat_spray_angle_sd",
    "bat_woba_avg", "bat_woba_sd",
    "bat_babip_avg", "bat_babip_sd",
    "bat_walk_avg", "bat_walk_sd",
    "bat_strikeout_avg", "bat_strikeout_sd",
)

# Lagged within-season pitcher measurements; location/velocity/spin are
# weighted per pitch, outcome rates per plate appearance.
PITCHER_BLOCK = (
    "pit_release_speed_avg", "pit_release_speed_sd",
    "pit_release_spin_rate_avg", "pit_release_spin_rate_sd",
    "pit_plate_x_avg", "pit_plate_x_sd",
    "pit_plate_z_avg", "pit_plate_z_sd",
    "pit_woba_avg", "pit_woba_sd",
    "pit_babip_avg", "pit_babip_sd",
    "pit_walk_avg", "pit_walk_sd",
    "pit_strikeout_avg", "pit_strikeout_sd",
)

REQUIRED = (TREATMENT, OUTCOME, YEAR, BATTER_SIDE)


def covariate_columns(df: pd.DataFrame) -> list[str]:
    """Measured-confounder columns present in `df`, in schema order."""
    return [c for c in BATTER_BLOCK + PITCHER_BLOCK if c in df.columns]


def validate_dataset(df: pd.DataFrame) -> None:
    missing = [c for c in REQUIRED if c not in df.columns]
    if missing:
        raise ValueError(f"dataset is missing required columns: {missing}")
    if not covariate_columns(df):
        raise ValueError("dataset has no recognized covariate columns")


def write_dataset(df: pd.DataFrame, path: str | Path) -> Path:
    """Write a dataset as .csv or columnar .npz, chosen by extension."""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, "w", newline="") as handle:
            handle.write(f"# schema-version: {SCHEMA_VERSION}\n")
            df.to_csv(handle, index=False)
    elif path.suffix == ".npz":
        arrays = {f"col:{name}": df[name].to_numpy() for name in df.columns}
        arrays["__schema_version__"] = np.array(SCHEMA_VERSION)
        arrays["__columns__"] = np.array(list(df.columns))
        np.savez(path, **arrays)
    else:
        raise ValueError(f"unsupported dataset extension {path.suffix!r} (use .csv or .npz)")
    return path


def read_dataset(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if path.suffix == ".csv":
        df = pd.read_csv(path, comment="#")
    elif path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as bundle:
            version = str(bundle["__schema_version__"])
            if version != SCHEMA_VERSION:
                raise ValueError(f"cache schema-version {version!r} != {SCHEMA_VERSION!r}")
            columns = [str(c) for c in bundle["__columns__"]]
            df = pd.DataFrame({name: bundle[f"col:{name}"] for name in columns})
    else:
        raise ValueError(f"unsupported dataset extension {path.suffix!r} (use .csv or .npz)")
    validate_dataset(df)
    return df


def dataset_to_csv_text(df: pd.DataFrame) -> str:
    """Dataset as CSV text with the schema stamp, for service responses."""
    buf = io.StringIO()
    buf.write(f"# schema-version: {SCHEMA_VERSION}\n")
    df.to_csv(buf, index=False)
    return buf.getvalue()


def dataset_from_csv_text(text: str) -> pd.DataFrame:
    df = pd.read_csv(io.StringIO(text), comment="#")
    validate_dataset(df)
    return df
