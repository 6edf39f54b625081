"""FastAPI application exposing the pipeline.

Thin handlers: parse the request body, call the pipeline, shape the
response.  Domain failures surface as 422 with a structured error body.
"""
from __future__ import annotations

import io
import json

from fastapi import FastAPI, HTTPException

import pandas as pd

from .. import __version__, iv as ivmod, matching, pipeline, schema
from ..errors import EttkitError
from ..ingest import ingest_pitch_csv
from . import models


def _load_dataset(req) -> pd.DataFrame:
    if req.dataset_csv is not None:
        return schema.dataset_from_csv_text(req.dataset_csv)
    return schema.read_dataset(req.input_path)


def _fail(err: Exception) -> HTTPException:
    return HTTPException(
        status_code=422,
        detail={"error": type(err).__name__, "message": str(err)},
    )


def create_app() -> FastAPI:
    app = FastAPI(title="ettkit", version=__version__)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/simulate", response_model=models.SimulateResponse)
    def simulate(req: models.SimulateRequest) -> models.SimulateResponse:
        try:
            out = pipeline.run_simulate(req.preset, req.config, req.seed, req.n_units)
        except (EttkitError, ValueError) as err:
            raise _fail(err) from err
        truth_csv = None
        if req.include_truth:
            truth_csv = out["truth"].to_csv(index=False)
        return models.SimulateResponse(
            config=out["config"],
            true_ett=out["true_ett"],
            true_ett_se=out["true_ett_se"],
            marginals=out["marginals"],
            dataset_csv=schema.dataset_to_csv_text(out["dataset"]),
            truth_csv=truth_csv,
        )

    @app.post("/ingest", response_model=models.IngestResponse)
    def ingest(req: models.IngestRequest) -> models.IngestResponse:
        try:
            source = req.input_path if req.pitch_csv is None else io.StringIO(req.pitch_csv)
            dataset, ledger = ingest_pitch_csv(pd.read_csv(source), threads=req.threads)
        except (EttkitError, ValueError, OSError) as err:
            raise _fail(err) from err
        return models.IngestResponse(
            dataset_csv=schema.dataset_to_csv_text(dataset),
            ledger=json.loads(ledger.to_json()),
        )

    @app.post("/estimate", response_model=models.EstimateResponse)
    def estimate(req: models.EstimateRequest) -> models.EstimateResponse:
        try:
            dataset = _load_dataset(req)
            doc = pipeline.run_estimate(
                dataset,
                methods=req.methods,
                subgroups=req.subgroup,
                seed=req.seed,
                n_resamples=req.n_resamples,
                threads=req.threads,
                normalized=req.normalized,
                refit=req.refit,
                match_spec=(
                    matching.MatchSpec.from_dict(req.match_spec) if req.match_spec else None
                ),
                iv_spec=ivmod.IvSpec.from_dict(req.iv_spec) if req.iv_spec else None,
                dump_replicates=req.dump_replicates,
            )
        except (EttkitError, ValueError, OSError) as err:
            raise _fail(err) from err
        replicates = doc.pop("_replicates", {})
        return models.EstimateResponse(
            results=doc,
            figure_csv=pipeline.figure_csv_text(doc),
            replicates=replicates,
        )

    @app.post("/diagnose", response_model=models.DiagnoseResponse)
    def diagnose(req: models.DiagnoseRequest) -> models.DiagnoseResponse:
        try:
            dataset = _load_dataset(req)
            doc = pipeline.run_diagnose(
                dataset,
                subgroups=req.subgroup,
                match_spec=(
                    matching.MatchSpec.from_dict(req.match_spec) if req.match_spec else None
                ),
                alpha=req.alpha,
            )
        except (EttkitError, ValueError, OSError) as err:
            raise _fail(err) from err
        balance_csv = doc.pop("_balance_csv")
        return models.DiagnoseResponse(report=doc, balance_csv=balance_csv)

    return app


app = create_app()
