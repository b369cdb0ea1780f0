"""Batch command-line front door.

Usage: ``tripforecast <command> [flags]`` with commands gen-data, ingest,
train, cross-val, grid-search, eval, predict and explain.

Settings resolve as flags > ``--config`` TOML file > defaults (``eval``,
``predict`` and ``explain`` also fall back to the run settings stored in
the checkpoint). The resolved settings are written into every JSON
artifact. Output goes to ``--out-dir``, else ``$TRIPFORECAST_OUT_DIR``,
else the current directory.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data, explain, train
from ._toml import load_toml
from .checkpoint import load_checkpoint, save_checkpoint
from .ndcore import NumericError
from .nn import ModelConfig, predict

OUT_DIR_ENV = "TRIPFORECAST_OUT_DIR"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_help()}\n{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _variant(text: str) -> str:
    return text.upper()


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file with run settings")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or .)")
    common.add_argument("--name", help="artifact file prefix")

    dataset = _Parser(add_help=False)
    dataset.add_argument("--trips", help="trips CSV; omitted means the synthetic fleet")
    dataset.add_argument("--window-days", type=int)
    dataset.add_argument("--tz", help="timezone for weekdays")

    model = _Parser(add_help=False)
    model.add_argument("--variant", type=_variant, help="pm1 | pm2 | pm3 | pm4")
    model.add_argument("--lstm-layer-sizes", type=_int_list, help="e.g. 40,60,40")
    model.add_argument("--attention-size", type=int)
    model.add_argument("--fc-sizes", type=_int_list, help="e.g. 64,2")
    model.add_argument("--max-seq-len", type=int)
    model.add_argument("--attention-source", choices=("all_layers", "top_layer"))

    fit = _Parser(add_help=False)
    fit.add_argument("--loss", choices=train.LOSS_KINDS)
    fit.add_argument("--optimizer", choices=train.OPTIMIZER_KINDS)
    fit.add_argument("--lr", type=float, dest="learning_rate")
    fit.add_argument("--batch-size", type=int)
    fit.add_argument("--epochs", type=int)
    fit.add_argument("--patience", type=int)

    ckpt = _Parser(add_help=False)
    ckpt.add_argument("--checkpoint", required=True, help="checkpoint JSON")

    parser = _Parser(prog="tripforecast", description="Next-trip forecasting with LSTM models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic trips CSV")
    p.add_argument("--out", help="CSV path (default <out-dir>/trips.csv)")
    p.add_argument("--vehicles", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--tz")

    p = sub.add_parser("ingest", parents=[common, dataset], help="validate and clean a trips CSV")
    p.add_argument("--out", help="write the cleaned trips to this CSV")

    sub.add_parser("train", parents=[common, dataset, model, fit], help="train on the fixed split")

    p = sub.add_parser("cross-val", parents=[common, dataset, model, fit], help="cross-validation transfer training")
    p.add_argument("--rounds", type=int)
    p.add_argument("--round-epochs", type=int)
    p.add_argument("--warm-start", help="checkpoint to start the first round from")

    p = sub.add_parser("grid-search", parents=[common, dataset, model, fit], help="hyperparameter grid search")
    p.add_argument("--param", action="append", default=None, metavar="NAME=V1,V2|(a:s:b)", help="grid axis; repeatable")
    p.add_argument("--budget", type=int)
    p.add_argument("--n-jobs", type=int)
    p.add_argument("--subsample", type=float)

    p = sub.add_parser("eval", parents=[common, dataset, ckpt], help="prediction error of a checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("predict", parents=[common, ckpt], help="forecast the next trip of each vehicle")
    p.add_argument("--history", required=True, help="trips CSV with the recent history")
    p.add_argument("--window-days", type=int)
    p.add_argument("--tz")

    p = sub.add_parser("explain", parents=[common, dataset, ckpt], help="TimeSHAP attributions for one sample")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--trip-index", type=int, help="sample index within the split")
    p.add_argument("--level", choices=explain.LEVELS)
    p.add_argument("--output", choices=explain.OUTPUTS + ("both",))
    p.add_argument("--background", choices=("mean", "zeros"))
    p.add_argument("--max-exact", type=int)
    p.add_argument("--n-samples", type=int)
    return parser


# ---------------------------------------------------------------------------
# Settings resolution
# ---------------------------------------------------------------------------

DATA_DEFAULTS = {"trips": None, "window_days": 8, "tz": data.DEFAULT_TZ}
TRAIN_DEFAULTS = {
    "loss": "MAE",
    "optimizer": "Adam",
    "learning_rate": 0.01,
    "batch_size": 128,
    "epochs": 200,
    "patience": 50,
    "eval_train_max": 2048,
}
CV_DEFAULTS = {"rounds": 10, "round_epochs": None, "warm_start": None}
GRID_DEFAULTS = {"budget": None, "n_jobs": 1, "subsample": 0.25}
EXPLAIN_DEFAULTS = {
    "split": "test",
    "trip_index": 0,
    "level": "event",
    "output": "both",
    "background": "mean",
    "max_exact": 12,
    "n_samples": 2048,
}


class _Resolver:
    def __init__(self, args, file_cfg: dict, fallback: dict | None = None):
        self.args = args
        self.file = file_cfg
        self.fallback = fallback or {}

    def get(self, section: str | None, key: str, default=None, flag: str | None = None):
        v = getattr(self.args, flag or key, None)
        if v is not None:
            return v
        for src in (self.file, self.fallback):
            tbl = src if section is None else src.get(section, {})
            if isinstance(tbl, dict) and tbl.get(key) is not None:
                return tbl[key]
        return default

    def section(self, name: str, defaults: dict) -> dict:
        return {k: self.get(name, k, d) for k, d in defaults.items()}


def _load_file(args) -> dict:
    if not args.config:
        return {}
    try:
        return load_toml(args.config)
    except FileNotFoundError:
        raise data.DataError(f"config file {args.config} not found")
    except ValueError as exc:
        raise data.DataError(f"config file {args.config}: {exc}")


def _out_dir(res: _Resolver) -> Path:
    d = Path(res.get(None, "out_dir", os.environ.get(OUT_DIR_ENV, "."), flag="out_dir"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _fleet(res: _Resolver, seed: int) -> data.FleetSpec:
    spec = dict(res.file.get("fleet", {}) or res.fallback.get("fleet", {}))
    spec["seed"] = seed
    for key in ("vehicles", "days"):
        v = getattr(res.args, key, None)
        if v is not None:
            spec[key] = v
    return data.FleetSpec.from_mapping(spec)


def _model_config(res: _Resolver, capacity: int) -> ModelConfig:
    base = ModelConfig()
    d = {
        "variant": res.get("model", "variant", base.variant),
        "lstm_layer_sizes": tuple(res.get("model", "lstm_layer_sizes", base.lstm_layer_sizes)),
        "attention_size": res.get("model", "attention_size", base.attention_size),
        "fc_sizes": tuple(res.get("model", "fc_sizes", base.fc_sizes)),
        "max_seq_len": res.get("model", "max_seq_len", capacity),
        "attention_source": res.get("model", "attention_source", base.attention_source),
    }
    d["variant"] = str(d["variant"]).upper()
    return ModelConfig(**d)


def _train_config(tc: dict, seed: int) -> train.TrainConfig:
    return train.TrainConfig(
        loss_kind=tc["loss"],
        optimizer_kind=tc["optimizer"],
        learning_rate=float(tc["learning_rate"]),
        batch_size=int(tc["batch_size"]),
        epochs=int(tc["epochs"]),
        seed=seed,
        patience=int(tc["patience"]),
        eval_train_max=int(tc["eval_train_max"]),
    )


def _trips(dcfg: dict, res: _Resolver, seed: int) -> tuple[list, dict]:
    """Trips from the CSV, or the synthetic fleet; plus the settings to echo."""
    if dcfg["trips"]:
        return data.ingest_csv(dcfg["trips"]), {}
    fleet = _fleet(res, seed)
    return data.generate_synthetic(fleet), {"fleet": asdict(fleet)}


def _dataset(res: _Resolver, seed: int, max_seq_len=None, stats=None):
    dcfg = res.section("data", DATA_DEFAULTS)
    trips, extra = _trips(dcfg, res, seed)
    ds = data.prepare_dataset(trips, window_days=int(dcfg["window_days"]), max_seq_len=max_seq_len, tz=dcfg["tz"], stats=stats)
    return ds, dcfg, extra


def _write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _say(text: str) -> None:
    print(text, flush=True)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, res: _Resolver) -> int:
    seed = res.get(None, "seed", 0)
    spec = _fleet(res, seed)
    if args.tz is not None:
        spec = replace(spec, tz=args.tz)
    out = Path(args.out) if args.out else _out_dir(res) / "trips.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    trips = data.generate_synthetic(spec)
    data.write_csv(trips, out)
    _say(f"wrote {len(trips)} trips for {spec.vehicles} vehicles to {out}")
    return EXIT_OK


def cmd_ingest(args, res: _Resolver) -> int:
    seed = res.get(None, "seed", 0)
    dcfg = res.section("data", DATA_DEFAULTS)
    if not dcfg["trips"]:
        raise UsageError("ingest needs --trips")
    raw = data.ingest_csv(dcfg["trips"])
    cleaned = data.clean_trips(raw)
    ds = data.prepare_dataset(raw, window_days=int(dcfg["window_days"]), tz=dcfg["tz"])
    summary = {
        "raw_trips": len(raw),
        "clean_trips": len(cleaned),
        "vehicles": len({t.vehicle_id for t in cleaned}),
        "samples": {k: len(v) for k, v in ds.splits().items()},
        "capacity_L": ds.max_seq_len,
        "norm_stats": ds.stats.to_dict(),
    }
    if args.out:
        data.write_csv(cleaned, args.out)
    name = res.get(None, "name", "ingest")
    _write_json(_out_dir(res) / f"{name}.summary.json", {"config": {"command": "ingest", "seed": seed, "data": dcfg}, **summary})
    _say(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _run_config(command: str, seed: int, mcfg: ModelConfig, dcfg: dict, tc: dict, extra: dict) -> dict:
    return {"command": command, "seed": seed, "data": dcfg, "model": mcfg.to_dict(), "train": tc, **extra}


def _emit_training(res, name, mcfg, params, report, run_config) -> None:
    out = _out_dir(res)
    save_checkpoint(out / f"{name}.checkpoint.json", mcfg, params, run_config)
    train.write_metrics(out / f"{name}.metrics.json", report, run_config)
    train.write_curve_csv(out / f"{name}.curve.csv", report.history)
    _say(f"{mcfg.variant} test prediction error: {report.prediction_error_pct:.6f}%")
    _say(f"artifacts: {out / name}.{{checkpoint.json,metrics.json,curve.csv}}")


def cmd_train(args, res: _Resolver) -> int:
    seed = res.get(None, "seed", 0)
    ds, dcfg, extra = _dataset(res, seed, max_seq_len=res.get("model", "max_seq_len"))
    mcfg = _model_config(res, ds.max_seq_len)
    tc = res.section("train", TRAIN_DEFAULTS)
    params, report = train.train_fixed_split(mcfg, ds, _train_config(tc, seed))
    name = res.get(None, "name", mcfg.variant.lower())
    _emit_training(res, name, mcfg, params, report, _run_config("train", seed, mcfg, dcfg, tc, extra))
    return EXIT_OK


def cmd_cross_val(args, res: _Resolver) -> int:
    seed = res.get(None, "seed", 0)
    ds, dcfg, extra = _dataset(res, seed, max_seq_len=res.get("model", "max_seq_len"))
    mcfg = _model_config(res, ds.max_seq_len)
    tc = res.section("train", TRAIN_DEFAULTS)
    cv = res.section("cv", CV_DEFAULTS)
    params = None
    if cv["warm_start"]:
        wcfg, params, _ = load_checkpoint(cv["warm_start"])
        if wcfg != mcfg:
            raise train.ConfigError("warm-start checkpoint has a different model config")
    params, report = train.cross_validate_transfer(
        mcfg,
        ds.train + ds.val,
        ds.test,
        ds.stats,
        _train_config(tc, seed),
        rounds=int(cv["rounds"]),
        params=params,
        round_epochs=cv["round_epochs"],
    )
    name = res.get(None, "name", f"{mcfg.variant.lower()}-cv")
    _emit_training(res, name, mcfg, params, report, _run_config("cross-val", seed, mcfg, dcfg, tc, {"cv": cv, **extra}))
    return EXIT_OK


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _grid_values(args, res: _Resolver) -> dict:
    if args.param:
        values = {}
        for item in args.param:
            if "=" not in item:
                raise UsageError(f"--param expects NAME=VALUES, got {item!r}")
            name, body = item.split("=", 1)
            body = body.strip()
            values[name.strip()] = body if body.startswith("(") else [_parse_value(v) for v in body.split(",")]
        return values
    values = (res.file.get("grid", {}) or {}).get("values")
    if not values:
        raise UsageError("grid-search needs --param axes or a [grid.values] table")
    return values


def cmd_grid_search(args, res: _Resolver) -> int:
    seed = res.get(None, "seed", 0)
    dcfg = res.section("data", DATA_DEFAULTS)
    trips, extra = _trips(dcfg, res, seed)
    grid = train.GridSpec(_grid_values(args, res))
    gcfg = res.section("grid", GRID_DEFAULTS)
    # the model capacity must be fixed across windows; probe the default window
    cap = res.get("model", "max_seq_len")
    if cap is None:
        cap = data.prepare_dataset(trips, window_days=int(dcfg["window_days"]), tz=dcfg["tz"]).max_seq_len
    mcfg = _model_config(res, cap)
    tc = res.section("train", TRAIN_DEFAULTS)
    result = train.grid_search(
        grid,
        trips,
        mcfg,
        _train_config(tc, seed),
        budget=gcfg["budget"],
        seed=seed,
        subsample=float(gcfg["subsample"]),
        tz=dcfg["tz"],
        n_jobs=int(gcfg["n_jobs"]),
    )
    run_config = _run_config("grid-search", seed, mcfg, dcfg, tc, {"grid": {**gcfg, "values": grid.values}, **extra})
    name = res.get(None, "name", "grid")
    _write_json(
        _out_dir(res) / f"{name}.grid.json",
        {"config": run_config, "ranked": result.ranked, "best": result.best, "variation": result.variation},
    )
    for rank, row in enumerate(result.ranked, 1):
        _say(f"{rank:3d}  {row['error']:10.4f}%  {train._point_key(row['point'])}")
    return EXIT_OK


def _checkpoint_resolver(args, file_cfg) -> tuple[_Resolver, ModelConfig, object, dict]:
    mcfg, params, doc = load_checkpoint(args.checkpoint)
    if params.norm_stats is None:
        raise data.DataError("checkpoint has no normalization statistics")
    res = _Resolver(args, file_cfg, doc.get("run_config", {}))
    return res, mcfg, params, doc


def cmd_eval(args, file_cfg) -> int:
    res, mcfg, params, doc = _checkpoint_resolver(args, file_cfg)
    seed = res.get(None, "seed", 0)
    stats = data.NormStats.from_dict(params.norm_stats)
    ds, dcfg, extra = _dataset(res, seed, max_seq_len=mcfg.max_seq_len, stats=stats)
    split = res.get("eval", "split", "test")
    report = train.evaluate(mcfg, params, ds.splits()[split], stats)
    name = res.get(None, "name", Path(args.checkpoint).name.split(".")[0])
    run_config = {"command": "eval", "seed": seed, "checkpoint": args.checkpoint, "split": split, "data": dcfg, "model": mcfg.to_dict(), **extra}
    _write_json(_out_dir(res) / f"{name}.eval.json", {"config": run_config, "report": report.to_dict()})
    _say(f"prediction error ({split}): {report.prediction_error_pct:.6f}%")
    return EXIT_OK


def cmd_predict(args, file_cfg) -> int:
    res, mcfg, params, doc = _checkpoint_resolver(args, file_cfg)
    stats = data.NormStats.from_dict(params.norm_stats)
    dcfg = res.section("data", DATA_DEFAULTS)
    trips = data.clean_trips(data.ingest_csv(args.history))
    by_vehicle: dict[str, list] = {}
    for t in trips:
        by_vehicle.setdefault(t.vehicle_id, []).append(t)
    _say("vehicle_id,delta_t_s,distance_km")
    for vid in sorted(by_vehicle):
        series = data.normalize(data.build_features(by_vehicle[vid], dcfg["tz"]), stats)
        s = data.next_trip_sample(series, int(dcfg["window_days"]), mcfg.max_seq_len)
        y = predict(mcfg, params, s.features[None], np.array([s.valid_len]))
        dt, dist = data.denormalize_targets(y, stats)[0]
        _say(f"{vid},{dt:.1f},{dist:.3f}")
    return EXIT_OK


def cmd_explain(args, file_cfg) -> int:
    res, mcfg, params, doc = _checkpoint_resolver(args, file_cfg)
    seed = res.get(None, "seed", 0)
    stats = data.NormStats.from_dict(params.norm_stats)
    ds, dcfg, extra = _dataset(res, seed, max_seq_len=mcfg.max_seq_len, stats=stats)
    ecfg = res.section("explain", EXPLAIN_DEFAULTS)
    samples = ds.splits()[ecfg["split"]]
    idx = int(ecfg["trip_index"])
    if not 0 <= idx < len(samples):
        raise data.DataError(f"--trip-index {idx} out of range; the {ecfg['split']} split has {len(samples)} samples")
    sample = samples[idx]
    background = explain.background_values(ds.train, zeros=ecfg["background"] == "zeros")
    outputs = explain.OUTPUTS if ecfg["output"] == "both" else (ecfg["output"],)
    run_config = {"command": "explain", "seed": seed, "checkpoint": args.checkpoint, "data": dcfg, "model": mcfg.to_dict(), "explain": ecfg, **extra}
    echo = explain.trip_echo(sample, ds.series.get(sample.vehicle_id)) if ecfg["level"] == "event" else None
    out = _out_dir(res)
    name = res.get(None, "name", Path(args.checkpoint).name.split(".")[0])
    for output in outputs:
        att = explain.explain_prediction(
            mcfg,
            params,
            sample,
            background,
            level=ecfg["level"],
            output=output,
            max_exact_m=int(ecfg["max_exact"]),
            n_samples=int(ecfg["n_samples"]),
            seed=seed,
        )
        stem = out / f"{name}.explain.{ecfg['level']}.{output}"
        explain.write_attribution_json(f"{stem}.json", att, run_config, echo)
        explain.write_attribution_csv(f"{stem}.csv", att)
        _say(
            f"{output}: base {att.base_score:.6f} + sum {att.weights.sum():.6f} = {att.base_score + att.weights.sum():.6f}"
            f" (model {att.model_score:.6f}); wrote {stem}.json"
        )
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "cross-val": cmd_cross_val,
    "grid-search": cmd_grid_search,
}
CHECKPOINT_COMMANDS = {"eval": cmd_eval, "predict": cmd_predict, "explain": cmd_explain}


def run(argv=None) -> int:
    """Run one command; returns the exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        file_cfg = _load_file(args)
        if args.command in CHECKPOINT_COMMANDS:
            return CHECKPOINT_COMMANDS[args.command](args, file_cfg)
        return COMMANDS[args.command](args, _Resolver(args, file_cfg))
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())
