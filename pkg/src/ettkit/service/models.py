"""Request/response bodies for the HTTP service.

Dataset payloads travel as CSV text in the shared schema; requests may
instead name a server-local file.  Exactly one of the two must be given.
"""
from __future__ import annotations

from pydantic import BaseModel, Field, model_validator


class SimulateRequest(BaseModel):
    preset: str = "standard"
    config: dict | None = None
    seed: int | None = None
    n_units: int | None = Field(default=None, ge=1)
    include_truth: bool = True


class SimulateResponse(BaseModel):
    config: dict
    true_ett: float
    true_ett_se: float
    marginals: dict
    dataset_csv: str
    truth_csv: str | None = None


class _DatasetCarrier(BaseModel):
    dataset_csv: str | None = None
    input_path: str | None = None

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.dataset_csv is None) == (self.input_path is None):
            raise ValueError("provide exactly one of dataset_csv or input_path")
        return self


class IngestRequest(BaseModel):
    pitch_csv: str | None = None
    input_path: str | None = None
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.pitch_csv is None) == (self.input_path is None):
            raise ValueError("provide exactly one of pitch_csv or input_path")
        return self


class IngestResponse(BaseModel):
    dataset_csv: str
    ledger: dict


class EstimateRequest(_DatasetCarrier):
    methods: list[str] | str = "all"
    subgroup: str = "both"
    seed: int = 0
    n_resamples: int = Field(default=10000, ge=2)
    threads: int = Field(default=1, ge=1)
    normalized: bool = False
    refit: bool = True
    match_spec: dict | None = None
    iv_spec: dict | None = None
    dump_replicates: bool = True


class EstimateResponse(BaseModel):
    results: dict
    figure_csv: str
    replicates: dict[str, list[float]] = {}


class DiagnoseRequest(_DatasetCarrier):
    subgroup: str = "both"
    match_spec: dict | None = None
    alpha: float = Field(default=0.01, gt=0, lt=1)


class DiagnoseResponse(BaseModel):
    report: dict
    balance_csv: dict[str, str]


class ErrorBody(BaseModel):
    error: str
    message: str
