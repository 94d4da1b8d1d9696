"""Experiment grid: config schema, run / bench / check-bounds drivers and result writing."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List

import jsonschema
import numpy as np

from .channel import POWER_CONVENTION, ChannelSpec
from .errors import ValidationError
from .evaluation import (benchmark_runtime, check_prop1_bound, clip_spectral_norm, environment_fingerprint,
                         top1_accuracy)
from .features import TaskSpec, generate_task, make_ground_truth_transform, select_anchors
from .models import (TrainConfig, build_system, cross_model_infer, lower_bound_estimate, server_alignment,
                     train_baseline, train_on_device_aligned)
from .nn import MLP, Dense

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ENV = "TOC_ALIGN_OUTPUT_DIR"
SLACK_TOLERANCE = 1e-9

CSV_COLUMNS = [
    "schema_version", "config_hash", "row_kind",
    "encoder_id", "decoder_id", "estimator", "snr_db", "n_tau", "trial",
    "accuracy", "lower_bound", "lower_bound_stderr", "alignment_error",
    "operation", "d", "median_ms", "p95_ms", "repetitions",
    "measured_gap", "gap_stderr", "rho", "rhs", "rhs_without_rho", "slack",
]

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "toc-align experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["task", "systems", "snr_db", "estimators"],
    "properties": {
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["num_classes", "latent_dim", "samples_per_class", "cluster_separation"],
            "properties": {
                "num_classes": {"type": "integer", "minimum": 2},
                "latent_dim": _pos_int,
                "samples_per_class": _pos_int,
                "cluster_separation": _pos_num,
                "test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "d": _pos_int,
        "systems": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "mode": {"enum": ["plain", "relative"]},
                    "encoder_hidden": _pos_int,
                    "decoder_hidden": _pos_int,
                    "seed": {"type": "integer", "minimum": 0},
                    "learning_rate": _pos_num,
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _pos_int,
                "batch_size": _pos_int,
                "learning_rate": _pos_num,
                "noise_samples": _pos_int,
            },
        },
        "snr_db": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "estimators": {
            "type": "array",
            "minItems": 1,
            "uniqueItems": True,
            "items": {"enum": ["none", "ls", "mmse", "gd", "ft"]},
        },
        "n_tau": {"type": "array", "minItems": 1, "items": _pos_int},
        "on_device_n_tau": _pos_int,
        "anchor_strategy": {"enum": ["uniform-random", "class-stratified"]},
        "trials": _pos_int,
        "seed": {"type": "integer", "minimum": 0},
        "lower_bound_draws": {"type": "integer", "minimum": 2},
        "output_dir": {"type": "string"},
        "bench": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "operations": {"type": "array", "minItems": 1,
                               "items": {"enum": ["ls", "mmse", "gd", "ft", "on-device"]}},
                "d": {"type": "array", "minItems": 1, "items": _pos_int},
                "n_tau": {"type": "array", "minItems": 1, "items": _pos_int},
                "repetitions": {"type": "integer"},
                "snr_db": {"type": "number"},
            },
        },
        "bounds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trials": _pos_int,
                "snr_db": {"type": "array", "minItems": 1, "items": {"type": ["number", "null"]}},
                "draws": {"type": "integer", "minimum": 2},
                "transform_kind": {"enum": ["general-invertible", "orthogonal", "orthogonal-scaled"]},
                "spectral_clip": _pos_num,
                "system": {"type": "string"},
            },
        },
    },
}

DEFAULTS = {
    "d": 16,
    "train": {"epochs": 40, "batch_size": 64, "learning_rate": 3e-3, "noise_samples": 1},
    "n_tau": [100],
    "on_device_n_tau": 32,
    "anchor_strategy": "class-stratified",
    "trials": 1,
    "seed": 0,
    "lower_bound_draws": 5,
    "bench": {"operations": ["ls", "mmse", "gd", "ft", "on-device"], "d": [16], "n_tau": [100],
              "repetitions": 100, "snr_db": 6.0},
    "bounds": {"trials": 50, "snr_db": [2, 6, 10, 14, 18], "draws": 20, "transform_kind": "orthogonal",
               "spectral_clip": 1.0},
}

DEFAULT_CONFIG = {
    "task": {"num_classes": 10, "latent_dim": 16, "samples_per_class": 300, "cluster_separation": 5.0,
             "seed": 0},
    "systems": [
        {"id": "toc1", "mode": "plain", "seed": 1},
        {"id": "toc2", "mode": "plain", "seed": 2, "encoder_hidden": 48, "learning_rate": 2e-3},
    ],
    "snr_db": [6, 18],
    "estimators": ["none", "ls", "mmse", "gd", "ft"],
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_dotted(config: dict, path: str, value) -> dict:
    """Override ``a.b.c`` in a nested config; list items are addressed by index."""
    keys = path.split(".")
    node = config
    for key in keys[:-1]:
        node = node[int(key)] if isinstance(node, list) else node.setdefault(key, {})
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return config


def validate_config(config: dict) -> dict:
    """Schema- and semantics-check a config; return it with defaults filled in.

    Raises ``ValidationError`` listing every violation found.
    """
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    problems = [
        f"{'/'.join(str(p) for p in err.absolute_path) or '<root>'}: {err.message}"
        for err in sorted(validator.iter_errors(config), key=lambda e: [str(p) for p in e.absolute_path])
    ]
    schema_ok = not problems
    # semantic checks that only need well-formed fields run even when other fields are invalid
    systems = config.get("systems") if isinstance(config, dict) else None
    if isinstance(systems, list):
        ids = [s.get("id") for s in systems if isinstance(s, dict)]
        dupes = sorted({i for i in ids if isinstance(i, str) and ids.count(i) > 1})
        if dupes:
            problems.append(f"systems: duplicate ids {dupes}")
    bench_cfg = config.get("bench") if isinstance(config, dict) else None
    reps = bench_cfg.get("repetitions", 100) if isinstance(bench_cfg, dict) else 100
    if isinstance(reps, int) and reps < 100:
        problems.append(f"bench/repetitions: {reps} is below the minimum of 100")
    if schema_ok:
        full = _merge(DEFAULTS, config)
        try:
            TaskSpec(**full["task"])
        except ValidationError as exc:
            problems.append(f"task: {exc}")
        n_train = full["task"]["num_classes"] * full["task"]["samples_per_class"]
        for n in full["n_tau"] + [full["on_device_n_tau"]]:
            if n > n_train:
                problems.append(f"n_tau: {n} exceeds the {n_train} available samples")
    if problems:
        raise ValidationError("invalid config:\n  " + "\n  ".join(problems))
    return _merge(DEFAULTS, config)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def output_dir(config: dict, override=None) -> Path:
    return Path(override or config.get("output_dir") or os.environ.get(OUTPUT_ENV) or "results")


class ResultWriter:
    """Collects rows and JSON documents; publishes them atomically on ``commit``."""

    def __init__(self, directory: Path, chash: str):
        self.directory = Path(directory)
        self.chash = chash
        self.rows: List[Dict] = []
        self.documents: Dict[str, object] = {}

    def add_row(self, row_kind: str, **values):
        row = {c: None for c in CSV_COLUMNS}
        row.update(values, schema_version=SCHEMA_VERSION, config_hash=self.chash, row_kind=row_kind)
        unknown = set(row) - set(CSV_COLUMNS)
        if unknown:
            raise ValueError(f"columns outside the CSV schema: {sorted(unknown)}")
        self.rows.append(row)

    def add_document(self, name: str, payload):
        if isinstance(payload, dict):
            payload = {"config_hash": self.chash, "schema_version": SCHEMA_VERSION, **payload}
        self.documents[name] = payload

    def commit(self, csv_name: str):
        self.directory.mkdir(parents=True, exist_ok=True)
        staged = []
        try:
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".csv.part")
            with os.fdopen(fd, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
                writer.writeheader()
                for row in self.rows:
                    writer.writerow({k: _csv_value(v) for k, v in row.items()})
            staged.append((tmp, self.directory / csv_name))
            for name, payload in self.documents.items():
                fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".json.part")
                with os.fdopen(fd, "w") as fh:
                    json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
                staged.append((tmp, self.directory / name))
        except BaseException:
            for tmp, _ in staged:
                Path(tmp).unlink(missing_ok=True)
            raise
        for tmp, final in staged:
            os.replace(tmp, final)
        return [final for _, final in staged]


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _train_systems(cfg: dict, dataset, snr_db: float):
    channel = ChannelSpec(snr_db=snr_db, seed=cfg["seed"])
    train = cfg["train"]
    anchors_rel = select_anchors(dataset, cfg["on_device_n_tau"], cfg["anchor_strategy"],
                                 seed=cfg["seed"], pool="train")
    systems = {}
    for i, desc in enumerate(cfg["systems"]):
        mode = desc.get("mode", "plain")
        system = build_system(desc["id"], dataset.d, dataset.num_classes, d=cfg["d"], mode=mode,
                              encoder_hidden=desc.get("encoder_hidden", 64),
                              decoder_hidden=desc.get("decoder_hidden", 64),
                              anchors=anchors_rel if mode == "relative" else None,
                              seed=desc.get("seed", i + 1))
        tcfg = TrainConfig(train["epochs"], train["batch_size"],
                           desc.get("learning_rate", train["learning_rate"]), train["noise_samples"],
                           channel, seed=desc.get("seed", i + 1))
        if mode == "plain":
            systems[desc["id"]] = train_baseline(system, dataset, tcfg)
        else:
            systems[desc["id"]] = train_on_device_aligned(system, dataset, anchors_rel, tcfg)
    return systems


def _run_snr(cfg: dict, snr_db: float) -> List[Dict]:
    """Train every system at one SNR and evaluate the full compatibility grid."""
    dataset = generate_task(TaskSpec(**cfg["task"]))
    test = dataset.subset("test")
    systems = _train_systems(cfg, dataset, snr_db)
    rows = []
    # relative systems carry their own anchors, so the server-side n_tau grid does not apply
    n_tau_grid = cfg["n_tau"] if any(s.mode == "plain" for s in systems.values()) else [cfg["on_device_n_tau"]]
    for trial in range(cfg["trials"]):
        channel = ChannelSpec(snr_db=snr_db, seed=cfg["seed"] * 1_000_003 + trial)
        for n_tau in n_tau_grid:
            anchors = select_anchors(dataset, n_tau, cfg["anchor_strategy"], seed=cfg["seed"] + 7919 * (trial + 1),
                                     pool="train")
            for enc_id, enc in systems.items():
                for dec_id, dec in systems.items():
                    if enc.mode != dec.mode:
                        continue
                    names = ["on-device"] if enc.mode == "relative" else cfg["estimators"]
                    for name in names:
                        alignment = None
                        if name not in ("none", "on-device"):
                            alignment = server_alignment(enc, dec, anchors.samples, channel, name)
                        preds = cross_model_infer(enc, dec, alignment, channel, test.features)
                        lb, lb_se = lower_bound_estimate(enc, dec, alignment, test, channel,
                                                         cfg["lower_bound_draws"])
                        rows.append(dict(
                            encoder_id=enc_id, decoder_id=dec_id, estimator=name, snr_db=float(snr_db),
                            n_tau=enc.n_out if enc.mode == "relative" else n_tau, trial=trial,
                            accuracy=top1_accuracy(preds, test.labels), lower_bound=lb,
                            lower_bound_stderr=lb_se, alignment_error=None,
                        ))
    return rows


def _map_jobs(fn, cfg, items: Iterable, jobs: int):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(cfg, it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, [cfg] * len(items), items))


def manifest(cfg: dict, chash: str, command: str) -> dict:
    return {
        "command": command,
        "config": cfg,
        "seeds": {"task": cfg["task"].get("seed", 0), "run": cfg["seed"],
                  "systems": {s["id"]: s.get("seed", i + 1) for i, s in enumerate(cfg["systems"])}},
        "conventions": {
            "power": POWER_CONVENTION,
            "snr": "SNR = 1 / sigma^2 on unit-power symbols",
            "mmse_regularizer": "2 * n_tau * sigma^2",
            "lipschitz": "analytic product of layer infinity-norms times 2 for log-softmax",
            "anchor_strategy": cfg["anchor_strategy"],
            "training_snr": "systems are trained and tested at the same SNR",
        },
        "environment": environment_fingerprint(),
    }


def run(config: dict, out=None, jobs: int = 1) -> List[Path]:
    cfg = validate_config(config)
    chash = config_hash(cfg)
    writer = ResultWriter(output_dir(cfg, out), chash)
    for rows in _map_jobs(_run_snr, cfg, cfg["snr_db"], jobs):
        for row in rows:
            writer.add_row("run", **row)
    writer.add_document("manifest.json", manifest(cfg, chash, "run"))
    return writer.commit("results.csv")


def _bench_one(cfg, key):
    op, d, n_tau = key
    b = cfg["bench"]
    return benchmark_runtime(op, d, n_tau, b["repetitions"], snr_db=b["snr_db"], seed=cfg["seed"])


def bench(config: dict, out=None, jobs: int = 1) -> List[Path]:
    cfg = validate_config(config)
    chash = config_hash(cfg)
    b = cfg["bench"]
    keys = [(op, d, n) for op in b["operations"] for d in b["d"] for n in b["n_tau"]]
    # benchmarks share one execution lane; jobs is ignored on purpose
    records = [_bench_one(cfg, k) for k in keys]
    writer = ResultWriter(output_dir(cfg, out), chash)
    for r in records:
        writer.add_row("bench", operation=r.operation, estimator=r.operation, d=r.d, n_tau=r.n_tau,
                       median_ms=r.median_ms, p95_ms=r.p95_ms, repetitions=r.repetitions)
    writer.add_document("bench.json", {"records": [r.to_dict() for r in records]})
    writer.add_document("manifest.json", manifest(cfg, chash, "bench"))
    return writer.commit("bench.csv")


def transformed_decoder(decoder: MLP, matrix) -> MLP:
    """Decoder of a system whose features are ``matrix`` times the original ones."""
    net = decoder.copy()
    first = net.dense[0]
    net.dense[0] = Dense(np.linalg.solve(matrix.T, first.weight.T).T, first.bias)
    net.layers[0] = net.dense[0]
    return net


def _bounds_snr(cfg, snr_db):
    bcfg = cfg["bounds"]
    dataset = generate_task(TaskSpec(**cfg["task"]))
    test = dataset.subset("test")
    desc = next((s for s in cfg["systems"] if s["id"] == bcfg.get("system")), None)
    plain = [s for s in cfg["systems"] if s.get("mode", "plain") == "plain"]
    if desc is None:
        if not plain:
            raise ValidationError("check-bounds needs at least one plain system")
        desc = plain[0]
    train_snr = 18.0 if snr_db is None else snr_db
    sub = dict(cfg, systems=[desc])
    system = _train_systems(sub, dataset, train_snr)[desc["id"]]
    reports = []
    for trial in range(bcfg["trials"]):
        truth = make_ground_truth_transform(cfg["d"], bcfg["transform_kind"], seed=cfg["seed"] + trial)
        decoder2 = clip_spectral_norm(transformed_decoder(system.decoder, truth.matrix), bcfg["spectral_clip"])
        channel = ChannelSpec.noiseless(seed=trial) if snr_db is None else ChannelSpec(snr_db=snr_db, seed=trial)
        report = check_prop1_bound(system, decoder2, truth, channel, test, bcfg["draws"])
        report.config.update(trial=trial, snr_db=snr_db, system=desc["id"])
        reports.append(report)
    return reports


def check_bounds(config: dict, out=None, jobs: int = 1):
    """Returns ``(paths, violations)``; a violation is any slack below ``-1e-9``."""
    cfg = validate_config(config)
    chash = config_hash(cfg)
    writer = ResultWriter(output_dir(cfg, out), chash)
    reports = [r for batch in _map_jobs(_bounds_snr, cfg, cfg["bounds"]["snr_db"], jobs) for r in batch]
    violations = [r for r in reports if r.slack < -SLACK_TOLERANCE]
    for r in reports:
        snr = r.config["snr_db"]
        writer.add_row("bound", snr_db=snr, trial=r.config["trial"], encoder_id=r.config["system"],
                       d=r.d, measured_gap=r.measured_gap, gap_stderr=r.gap_stderr, rho=r.rho, rhs=r.rhs,
                       rhs_without_rho=r.rhs_without_rho, slack=r.slack)
    writer.add_document("bounds.json", {"reports": [r.to_dict() for r in reports],
                                        "violations": len(violations)})
    writer.add_document("manifest.json", manifest(cfg, chash, "check-bounds"))
    return writer.commit("bounds.csv"), violations
