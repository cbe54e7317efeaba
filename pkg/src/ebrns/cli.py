"""Command-line entry point: ``ebrns {gen,train,eval,smooth,inspect}``.

Every run is driven by a JSON config (optionally overridden by flags), is
validated before any compute, and writes its numeric output to files plus a
manifest holding the effective config and a sha256 of every output.  Feeding
a manifest back through ``--config`` replays the run.

Exit codes: 0 success, 1 config or contract error, 2 IO error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .core import CheckpointError, GateBank, load_checkpoint, run_ebrns, save_checkpoint
from .datasets import (ParseError, SchemaError, calibrate_q2, gen_landing, gen_temperature,
                       read_csv, split, write_csv)
from .evaluation import ESTIMATORS, compare_report, test_set_result
from .models import ConfigError, DomainError, make_builtin
from .tensor import ContractError, DimensionError
from .training import TrainConfig, TrainingDiverged, train_stage

COMMANDS = ("gen", "train", "eval", "smooth", "inspect")

SCHEMA = {
    "command": None,
    "seed": None,
    "out": None,
    "threads": None,
    "nominal_mode": None,
    "model": {"id": None, "params": None},
    "generator": {"kind": None, "count": None, "K": None, "sigma_v": None, "noise": None, "dt": None},
    "dataset": None,
    "split": {"proportions": None, "seed": None},
    "checkpoint": None,
    "bank": {"d_c": None, "hidden": None, "seed": None},
    "train": {f.name: None for f in fields(TrainConfig)},
    "eval": {"estimators": None, "format": None},
}

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "threads": 1,
    "nominal_mode": False,
    "split": {"proportions": [0.7, 0.2, 0.1]},
    "bank": {"d_c": 32, "hidden": 32},
    "eval": {"estimators": ["ks", "ebrns_filter", "ebrns_smooth"], "format": "json"},
}

MANIFEST_KEYS = {"command", "config", "outputs", "package_version"}


def _check_keys(doc, schema, where="config"):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key, val in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown key {where}.{key}")
        sub = schema[key]
        if isinstance(sub, dict) and val is not None:
            _check_keys(val, sub, f"{where}.{key}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(doc, dict) and set(doc) == MANIFEST_KEYS:
        doc = doc["config"]
    _check_keys(doc, SCHEMA)
    return doc


def effective_config(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    cfg = _merge(DEFAULTS, cfg)
    cfg["command"] = args.command
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.nominal_mode:
        cfg["nominal_mode"] = True
    if args.model is not None:
        cfg.setdefault("model", {})["id"] = args.model
    if args.stage is not None:
        cfg.setdefault("train", {})["stage"] = "one" if args.stage == 1 else "two"
    if args.noise_level is not None:
        gen = cfg.setdefault("generator", {})
        vals = [float(v) for v in args.noise_level.split(",")]
        if len(vals) == 1:
            gen["sigma_v"] = vals[0]
        elif len(vals) == 2:
            gen["noise"] = vals
        else:
            raise ConfigError("--noise-level takes sigma_v or sigma_alpha_deg,sigma_eta_m")
    if args.dataset is not None:
        cfg["dataset"] = args.dataset
    if args.checkpoint is not None:
        cfg["checkpoint"] = args.checkpoint
    _check_keys(cfg, SCHEMA)
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be at least 1")
    return cfg


# ------------------------------------------------------------------- helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg: dict, out: Path, outputs: list[Path]) -> Path:
    doc = {
        "command": cfg["command"],
        "config": cfg,
        "outputs": {p.name: _sha256(p) for p in outputs},
        "package_version": __version__,
    }
    path = out / f"manifest_{cfg['command']}.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _infer_model_id(data) -> str:
    n_x, n_z = data.x.shape[-1], data.z.shape[-1]
    if n_x == 1 and n_z == 1:
        return "rw1d"
    if n_x == 4 and n_z == 2:
        return "cv2d-radar"
    raise ConfigError(f"cannot infer a model for n_x={n_x}, n_z={n_z}; set model.id")


def _model(cfg, data, train_x=None):
    entry = cfg.get("model") or {}
    model_id = entry.get("id") or _infer_model_id(data)
    params = dict(entry.get("params") or {})
    if model_id == "rw1d" and "q2" not in params and train_x is not None:
        params["q2"] = calibrate_q2(train_x)
    model = make_builtin(model_id, **params)
    if model.n_x != data.x.shape[-1] or model.n_z != data.z.shape[-1]:
        raise ConfigError(
            f"model {model_id} has n_x={model.n_x}, n_z={model.n_z} but the dataset has "
            f"n_x={data.x.shape[-1]}, n_z={data.z.shape[-1]}")
    return model


def _dataset(cfg):
    if not cfg.get("dataset"):
        raise ConfigError("a dataset path is required")
    return read_csv(cfg["dataset"])


def _split(cfg, data):
    sp = cfg.get("split") or {}
    return split(data, tuple(sp.get("proportions", (0.7, 0.2, 0.1))), int(sp.get("seed", cfg["seed"])))


def _bank_for(cfg, model, norm=None):
    """Checkpointed bank, validated against the model dimensions."""
    path = cfg.get("checkpoint")
    if not path:
        return None
    bank = load_checkpoint(path)
    if bank.n_x != model.n_x:
        raise ConfigError(f"checkpoint has n_x={bank.n_x} but model {model.name} has n_x={model.n_x}")
    return bank


# ------------------------------------------------------------------ commands


def cmd_gen(cfg) -> int:
    gen = cfg.get("generator") or {}
    kind = gen.get("kind")
    count = gen.get("count", 100)
    seed = int(cfg["seed"])
    if kind == "temperature":
        data = gen_temperature(int(count), int(gen.get("K", 48)), float(gen.get("sigma_v", 8.0)), seed)
    elif kind == "landing":
        noise = tuple(gen.get("noise", (0.3, 150.0)))
        data = gen_landing(int(count), int(gen.get("K", 200)), float(gen.get("dt", 4.0)), noise, seed)
    else:
        raise ConfigError(f"generator.kind must be 'temperature' or 'landing', got {kind!r}")
    out = _out_dir(cfg)
    path = out / "dataset.csv"
    write_csv(data, path)
    _write_manifest(cfg, out, [path])
    print(f"wrote {len(data)} samples (K={data.K}) to {path}")
    return 0


def cmd_train(cfg) -> int:
    data = _dataset(cfg)
    parts = _split(cfg, data)
    model = _model(cfg, data, parts.train.x)
    tc = dict(cfg.get("train") or {})
    tc.setdefault("seed", cfg["seed"])
    config = TrainConfig(**tc)
    if config.stage == "two":
        if not cfg.get("checkpoint"):
            raise ConfigError("stage two needs a stage-one checkpoint (checkpoint)")
        bank = _bank_for(cfg, model)
    else:
        b = cfg.get("bank") or {}
        bank = GateBank.init(model.n_x, int(b.get("d_c", 32)), int(b.get("hidden", 32)), parts.norm,
                             int(b.get("seed", cfg["seed"])), model.name, model.n_z)
    best, report = train_stage(config.stage, bank, parts, model, config, log=print)
    out = _out_dir(cfg)
    n = 1 if config.stage == "one" else 2
    ck = out / f"checkpoint_stage{n}.json"
    save_checkpoint(best, ck)
    report.checkpoint = ck.name
    rp = out / f"train_report_stage{n}.json"
    rp.write_text(json.dumps(report.deterministic_dict(), indent=1) + "\n")
    (out / f"train_timing_stage{n}.json").write_text(json.dumps({"wall_time": report.wall_time}) + "\n")
    _write_manifest(cfg, out, [ck, rp])
    print(f"stage {config.stage}: {report.epochs} epochs, best validation RMSE {report.best_val_rmse:.4g}")
    return 0


def cmd_eval(cfg) -> int:
    data = _dataset(cfg)
    parts = _split(cfg, data)
    model = _model(cfg, data, parts.train.x)
    nominal = bool(cfg["nominal_mode"])
    bank = _bank_for(cfg, model)
    ev = cfg.get("eval") or {}
    names = list(ev.get("estimators", DEFAULTS["eval"]["estimators"]))
    for name in names:
        if name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")
        if name.startswith("ebrns") and bank is None and not nominal:
            raise ConfigError(f"{name} needs a checkpoint or --nominal-mode")
    results = [test_set_result(n, parts.test.x, parts.test.z, model, bank, nominal) for n in names]
    fmt = ev.get("format", "json")
    if fmt not in ("json", "csv"):
        raise ConfigError(f"eval.format must be 'json' or 'csv', got {fmt!r}")
    out = _out_dir(cfg)
    path = out / f"report.{fmt}"
    path.write_text(compare_report(results, fmt))
    _write_manifest(cfg, out, [path])
    print(compare_report(results, "text"))
    return 0


def cmd_smooth(cfg) -> int:
    data = _dataset(cfg)
    model = _model(cfg, data)
    nominal = bool(cfg["nominal_mode"])
    bank = _bank_for(cfg, model)
    if bank is None and not nominal:
        raise ConfigError("smooth needs a checkpoint or --nominal-mode")
    cache = run_ebrns(data.z, model, bank, mode="smooth", nominal=nominal)
    est = cache.stack("smooth_mean")[..., 0]
    cov = cache.stack("smooth_cov")
    out = _out_dir(cfg)
    path = out / "smoothed.csv"
    n = model.n_x
    with open(path, "w") as fh:
        fh.write(",".join(["sample_id", "k"] + [f"xhat_{i + 1}" for i in range(n)]
                          + [f"var_{i + 1}" for i in range(n)]) + "\n")
        for b, sid in enumerate(data.ids):
            for k in range(data.K):
                vals = list(est[b, k]) + list(np.diagonal(cov[b, k]))
                fh.write(",".join([str(int(sid)), str(k + 1)] + [format(v, ".17g") for v in vals]) + "\n")
    _write_manifest(cfg, out, [path])
    print(f"smoothed {len(data)} sequences to {path}")
    return 0


def cmd_inspect(cfg) -> int:
    if cfg.get("checkpoint"):
        bank = load_checkpoint(cfg["checkpoint"])
        print(f"checkpoint {cfg['checkpoint']}: n_x={bank.n_x} d_c={bank.d_c} hidden={bank.hidden} "
              f"params={bank.count()} (forward {bank.count('a')}, backward {bank.count('b')}) "
              f"model={bank.model_id or '?'}")
    if cfg.get("dataset"):
        data = read_csv(cfg["dataset"])
        print(f"dataset {cfg['dataset']}: {len(data)} samples, K={data.K}, "
              f"n_x={data.x.shape[-1]}, n_z={data.z.shape[-1]}")
    if not cfg.get("checkpoint") and not cfg.get("dataset"):
        raise ConfigError("inspect needs a checkpoint and/or a dataset")
    return 0


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "smooth": cmd_smooth,
            "inspect": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebrns", description="Learned Bayesian smoothing runs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config or a previous run's manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker cap (computation is single-threaded)")
    p.add_argument("--nominal-mode", action="store_true", help="disable learned trends")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--noise-level", help="sigma_v, or sigma_alpha_deg,sigma_eta_m for landing")
    p.add_argument("--model", choices=("rw1d", "cv2d-radar", "cv2d-linear"))
    p.add_argument("--dataset", help="dataset CSV")
    p.add_argument("--checkpoint", help="checkpoint JSON")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        cfg = effective_config(args)
        return HANDLERS[args.command](cfg)
    except (ConfigError, ContractError, DimensionError, DomainError, CheckpointError, ParseError,
            SchemaError, TrainingDiverged, TypeError, ValueError, np.linalg.LinAlgError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
