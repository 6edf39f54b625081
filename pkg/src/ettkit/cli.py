"""Command line: simulate, ingest, estimate, diagnose, serve.

By default commands run in-process through the same pipeline functions the
HTTP service uses; `--server URL` sends the work to a running service
instead and writes the returned payloads locally, so outputs are identical
either way.

Option resolution: explicit flag > `--config` YAML file > ETTKIT_THREADS
(threads only) > built-in default.  Exit status is 0 only when every
requested output file was written; failures print one structured JSON error
line to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from . import __version__, iv as ivmod, matching, pipeline, schema
from .errors import EttkitError
from .ingest import ingest_pitch_csv

_CONFIG_KEYS = (
    "seed", "threads", "method", "subgroup", "resamples", "normalized",
    "refit", "preset", "n_units", "alpha", "input", "output_dir",
    "match_spec", "iv_spec", "scm",
)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as handle:
        doc = yaml.safe_load(handle) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    unknown = sorted(set(doc) - set(_CONFIG_KEYS))
    if unknown:
        raise ValueError(
            f"config file {path} has unknown keys {unknown}; known keys: "
            f"{sorted(_CONFIG_KEYS)}"
        )
    return doc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ettkit",
        description="Effect-of-treatment-on-the-treated estimation toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"ettkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, needs_input: bool) -> None:
        if needs_input:
            p.add_argument("--input", default=None, help="input file path")
        p.add_argument("--output-dir", dest="output_dir", default=None, required=False)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--config", default=None, help="YAML file of option defaults")
        p.add_argument("--server", default=None, help="base URL of a running service")

    p_sim = sub.add_parser("simulate", help="draw a synthetic benchmark dataset")
    common(p_sim, needs_input=False)
    p_sim.add_argument("--preset", default=None, choices=pipeline.SCM_PRESETS)
    p_sim.add_argument("--n-units", dest="n_units", type=int, default=None)
    p_sim.add_argument("--no-truth", action="store_true", help="skip the ground-truth file")

    p_ing = sub.add_parser("ingest", help="pitch CSV to analysis dataset")
    common(p_ing, needs_input=True)

    p_est = sub.add_parser("estimate", help="run the effect estimators")
    common(p_est, needs_input=True)
    p_est.add_argument("--method", default=None, choices=("match", "iptw", "iv", "all"))
    p_est.add_argument("--subgroup", default=None, choices=("L", "R", "both"))
    p_est.add_argument("--resamples", type=int, default=None)
    p_est.add_argument("--normalized", action="store_true", default=None)
    p_est.add_argument(
        "--no-refit", dest="refit", action="store_false", default=None,
        help="score resamples with the full-data propensity model",
    )
    p_est.add_argument("--no-replicates", action="store_true", help="skip replicate dumps")

    p_diag = sub.add_parser("diagnose", help="balance, positivity, instrument reports")
    common(p_diag, needs_input=True)
    p_diag.add_argument("--subgroup", default=None, choices=("L", "R", "both"))
    p_diag.add_argument("--alpha", type=float, default=None)

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8212)

    return parser


def _resolve(args: argparse.Namespace, config: dict, key: str, fallback):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config and config[key] is not None:
        return config[key]
    if key == "threads":
        env = os.environ.get("ETTKIT_THREADS")
        if env:
            return int(env)
    return fallback


def _out_dir(args, config) -> Path:
    out = _resolve(args, config, "output_dir", None)
    if out is None:
        raise ValueError("--output-dir is required (or set output_dir in --config)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> Path:
    with open(path, "w", newline="") as handle:
        handle.write(text)
    return path


def _specs_from_config(config: dict):
    match_spec = (
        matching.MatchSpec.from_dict(config["match_spec"])
        if config.get("match_spec") else None
    )
    iv_spec = ivmod.IvSpec.from_dict(config["iv_spec"]) if config.get("iv_spec") else None
    return match_spec, iv_spec


def _post(server: str, endpoint: str, body: dict) -> dict:
    import httpx

    response = httpx.post(f"{server.rstrip('/')}{endpoint}", json=body, timeout=None)
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", {})
        except ValueError:
            detail = {"error": "HTTPError", "message": response.text}
        if isinstance(detail, dict) and "error" in detail:
            raise RuntimeError(f"{detail['error']}: {detail['message']}")
        raise RuntimeError(f"server returned {response.status_code}: {detail}")
    return response.json()


def cmd_simulate(args, config) -> list[Path]:
    out = _out_dir(args, config)
    preset = _resolve(args, config, "preset", "standard")
    seed = _resolve(args, config, "seed", None)
    n_units = _resolve(args, config, "n_units", None)
    scm_doc = config.get("scm")
    include_truth = not args.no_truth

    if args.server:
        payload = _post(args.server, "/simulate", {
            "preset": preset, "config": scm_doc, "seed": seed,
            "n_units": n_units, "include_truth": include_truth,
        })
        written = [_write(out / "dataset.csv", payload["dataset_csv"])]
        if payload.get("truth_csv"):
            written.append(_write(out / "truth.csv", payload["truth_csv"]))
        meta = {k: payload[k] for k in ("config", "true_ett", "true_ett_se", "marginals")}
    else:
        result = pipeline.run_simulate(preset, scm_doc, seed, n_units)
        written = [schema.write_dataset(result["dataset"], out / "dataset.csv")]
        if include_truth:
            written.append(
                _write(out / "truth.csv", result["truth"].to_csv(index=False))
            )
        meta = {k: result[k] for k in ("config", "true_ett", "true_ett_se", "marginals")}
    written.append(
        _write(out / "simulate_meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    )
    return written


def cmd_ingest(args, config) -> list[Path]:
    out = _out_dir(args, config)
    source = _resolve(args, config, "input", None)
    if source is None:
        raise ValueError("ingest needs --input")
    threads = int(_resolve(args, config, "threads", 1))

    if args.server:
        payload = _post(args.server, "/ingest", {
            "pitch_csv": Path(source).read_text(), "threads": threads,
        })
        dataset_csv, ledger_text = payload["dataset_csv"], json.dumps(
            payload["ledger"], indent=2
        )
    else:
        dataset, ledger = ingest_pitch_csv(source, threads=threads)
        dataset_csv = schema.dataset_to_csv_text(dataset)
        ledger_text = ledger.to_json()
    return [
        _write(out / "dataset.csv", dataset_csv),
        _write(out / "exclusion_ledger.json", ledger_text + "\n"),
    ]


def cmd_estimate(args, config) -> list[Path]:
    out = _out_dir(args, config)
    source = _resolve(args, config, "input", None)
    if source is None:
        raise ValueError("estimate needs --input")
    method = _resolve(args, config, "method", "all")
    subgroup = _resolve(args, config, "subgroup", "both")
    seed = int(_resolve(args, config, "seed", 0))
    resamples = int(_resolve(args, config, "resamples", 10000))
    threads = int(_resolve(args, config, "threads", 1))
    normalized = bool(_resolve(args, config, "normalized", False))
    refit = bool(_resolve(args, config, "refit", True))
    dump = not args.no_replicates

    if args.server:
        payload = _post(args.server, "/estimate", {
            "input_path": None, "dataset_csv": Path(source).read_text(),
            "methods": method, "subgroup": subgroup, "seed": seed,
            "n_resamples": resamples, "threads": threads,
            "normalized": normalized, "refit": refit,
            "match_spec": config.get("match_spec"), "iv_spec": config.get("iv_spec"),
            "dump_replicates": dump,
        })
        doc = payload["results"]
        figure = payload["figure_csv"]
        replicates = payload["replicates"]
    else:
        match_spec, iv_spec = _specs_from_config(config)
        doc = pipeline.run_estimate(
            schema.read_dataset(source),
            methods=method, subgroups=subgroup, seed=seed,
            n_resamples=resamples, threads=threads,
            normalized=normalized, refit=refit,
            match_spec=match_spec, iv_spec=iv_spec, dump_replicates=dump,
        )
        replicates = doc.pop("_replicates", {})
        figure = pipeline.figure_csv_text(doc)
    written = [
        _write(out / "results.json", pipeline.results_json(doc) + "\n"),
        _write(out / "figure.csv", figure),
    ]
    for key in sorted(replicates):
        lines = ["replicate,estimate"]
        lines += [f"{i},{v!r}" for i, v in enumerate(replicates[key])]
        written.append(_write(out / f"replicates_{key}.csv", "\n".join(lines) + "\n"))
    return written


def cmd_diagnose(args, config) -> list[Path]:
    out = _out_dir(args, config)
    source = _resolve(args, config, "input", None)
    if source is None:
        raise ValueError("diagnose needs --input")
    subgroup = _resolve(args, config, "subgroup", "both")
    alpha = float(_resolve(args, config, "alpha", 0.01))

    if args.server:
        payload = _post(args.server, "/diagnose", {
            "input_path": None, "dataset_csv": Path(source).read_text(),
            "subgroup": subgroup, "match_spec": config.get("match_spec"), "alpha": alpha,
        })
        doc, balance_csv = payload["report"], payload["balance_csv"]
    else:
        match_spec, _ = _specs_from_config(config)
        doc = pipeline.run_diagnose(
            schema.read_dataset(source),
            subgroups=subgroup, match_spec=match_spec, alpha=alpha,
        )
        balance_csv = doc.pop("_balance_csv")
    written = [
        _write(out / "diagnostics.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    ]
    for side in sorted(balance_csv):
        written.append(_write(out / f"balance_{side}.csv", balance_csv[side]))
    return written


def cmd_serve(args) -> None:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "serve":
        cmd_serve(args)
        return 0
    try:
        config = _load_config(args.config)
        handler = {
            "simulate": cmd_simulate,
            "ingest": cmd_ingest,
            "estimate": cmd_estimate,
            "diagnose": cmd_diagnose,
        }[args.command]
        written = handler(args, config)
        for path in written:
            print(path)
        return 0
    except (EttkitError, ValueError, OSError, RuntimeError, KeyError) as err:
        print(
            json.dumps({"error": type(err).__name__, "message": str(err)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
