"""Command-line entry point: ``mbse3 gen|train|eval|check``.

Exit codes: 0 ok, 1 property failure, 2 config error, 3 I/O error,
4 numeric failure, 5 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .backbone import BackboneConfig
from .heads import HeadConfig
from .metrics import mean_of
from .scenegen import SPLITS, SceneFormatError, SceneSpec, SceneSpecError, generate_scene, load_split, save_scene
from .trainer import (FlowState, Model, NonFiniteLoss, TrainerConfig, TrainRecord, evaluate, oracle_scene,
                      train)

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = range(6)
CSV_COLUMNS = ("id", "AP", "PQ", "F1", "Pre", "Rec", "mIoU", "RI", "EPE3D", "angular_error")

log = logging.getLogger("mbse3")


class ConfigError(ValueError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class Paths:
    data_root: str = "data"
    checkpoint: str = "runs/model.json"
    record: str = "runs/record.jsonl"
    report: str = "runs/report.json"
    csv: str = "runs/report.csv"


@dataclass
class Counts:
    train: int = 200
    val: int = 0
    test: int = 50


@dataclass
class Mode:
    oracle: bool = False
    fault_reflection: bool = False
    quick: bool = True
    eval_split: str = "test"
    resume: bool = False


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    counts: Counts = field(default_factory=Counts)
    paths: Paths = field(default_factory=Paths)
    mode: Mode = field(default_factory=Mode)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            sec = asdict(getattr(self, f.name))
            out[f.name] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in sec.items()}
        return out


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(doc: dict | None = None, overrides: list[str] | tuple = ()) -> RunConfig:
    """Sectioned JSON document plus ``section.key=value`` overrides."""
    doc = {k: dict(v) for k, v in (doc or {}).items()}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        sec, name = key.split(".", 1)
        doc.setdefault(sec, {})[name] = _parse_value(value)
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    built = {}
    for sec, factory in SECTIONS.items():
        cls = type(factory())
        vals = doc.get(sec, {})
        if not isinstance(vals, dict):
            raise ConfigError(f"section {sec!r} must be an object")
        extra = set(vals) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown keys in {sec!r}: {sorted(extra)}")
        try:
            built[sec] = cls(**vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{sec}: {exc}") from exc
    cfg = RunConfig(**built)
    if cfg.mode.eval_split not in SPLITS:
        raise ConfigError(f"mode.eval_split must be one of {SPLITS}")
    for name in ("train", "val", "test"):
        if getattr(cfg.counts, name) < 0:
            raise ConfigError(f"counts.{name} must be >= 0")
    return cfg


def load_config(path: str | None, overrides=()) -> RunConfig:
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be an object")
    return build_config(doc, overrides)


def worker_count() -> int:
    raw = os.environ.get("MBSE3_THREADS")
    avail = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    if not raw:
        return avail
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MBSE3_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MBSE3_THREADS must be >= 1")
    return n


class _Pool:
    """Ordered map over scenes, in-process when one worker suffices."""

    def __init__(self, n: int):
        self.n = n
        self.ex = ProcessPoolExecutor(n) if n > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self.ex is None or len(items) < 2:
            return list(map(fn, items))
        return list(self.ex.map(fn, items, chunksize=max(1, len(items) // (4 * self.n))))

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.ex is not None:
            self.ex.shutdown()


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg, flush=True)


def _ensure_parent(path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# ------------------------------------------------------------------ commands

def _gen_one(job):
    spec, index, path = job
    s = generate_scene(spec, index)
    save_scene(s, Path(path) / f"{s.id}.json")
    return s.id


def cmd_gen(cfg: RunConfig, args) -> int:
    counts = {s: getattr(cfg.counts, s) for s in SPLITS}
    root = Path(cfg.paths.data_root)
    off = 0
    jobs = []
    for split in SPLITS:
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        jobs += [(cfg.scene, off + i, str(d)) for i in range(counts[split])]
        off += counts[split]
    with _Pool(worker_count()) as pool:
        pool.map(_gen_one, jobs)
    for split in SPLITS:
        _say(args, f"{split}: {counts[split]} scenes -> {root / split}")
    return EXIT_OK


def _model_from(cfg: RunConfig) -> Model:
    return Model.create(cfg.backbone, cfg.heads, seed=cfg.trainer.seed)


def _load_checkpoint(cfg: RunConfig) -> Model:
    model = _model_from(cfg)
    store = dc.ParamStore.load(cfg.paths.checkpoint)
    want, got = model.params.shapes(), store.shapes()
    if want != got:
        diff = sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
        detail = ", ".join(f"{k}: config {want.get(k)} vs checkpoint {got.get(k)}" for k in diff[:4])
        raise CheckpointMismatch(f"checkpoint does not fit the configured model ({detail})")
    model.params = store
    return model


def _state_path(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint).with_suffix(".state.json")


def _save_state(cfg: RunConfig, store: dc.ParamStore, flows: dict) -> None:
    doc = {"step": store.step,
           "adam_m": {k: store._m[k].ravel().tolist() for k in store.names()},
           "adam_v": {k: store._v[k].ravel().tolist() for k in store.names()},
           "flows": {k: {"tag": v.tag, "flow": v.flow.tolist()} for k, v in sorted(flows.items())}}
    with open(_state_path(cfg), "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def _load_state(cfg: RunConfig, store: dc.ParamStore) -> dict:
    with open(_state_path(cfg)) as fh:
        doc = json.load(fh)
    store.step = int(doc["step"])
    for k in store.names():
        shape = store[k].shape
        store._m[k] = np.asarray(doc["adam_m"][k], dtype=float).reshape(shape)
        store._v[k] = np.asarray(doc["adam_v"][k], dtype=float).reshape(shape)
    return {k: FlowState(np.asarray(v["flow"], dtype=float), v["tag"]) for k, v in doc["flows"].items()}


def _require_split(cfg: RunConfig, split: str) -> list:
    scenes = load_split(cfg.paths.data_root, split)
    if not scenes:
        raise FileNotFoundError(f"no scenes in {Path(cfg.paths.data_root) / split}; run `gen` first")
    return scenes


def cmd_train(cfg: RunConfig, args) -> int:
    dataset = _require_split(cfg, "train")
    val = load_split(cfg.paths.data_root, "val")
    record, flows = None, None
    if cfg.mode.resume and Path(cfg.paths.checkpoint).exists():
        model = _load_checkpoint(cfg)
        flows = _load_state(cfg, model.params)
        with open(cfg.paths.record) as fh:
            record = TrainRecord.from_jsonl(fh.read())
        _say(args, f"resuming after epoch {len(record.epochs) - 1}")
    else:
        model = _model_from(cfg)
    for p in (cfg.paths.checkpoint, cfg.paths.record):
        _ensure_parent(p)
    t0 = time.time()

    def progress(row):
        _say(args, f"epoch {row['epoch']}: l_seg={row['l_seg']:.4f} l_mot={row['l_mot']:.3f} "
                   f"consensus={row['consensus']:.3f} flow_EPE3D={row['train_flow_EPE3D']:.4f} "
                   f"({time.time() - t0:.0f}s)")

    params, record, flows = train(dataset, cfg.trainer, model, val=val, record=record, flows=flows,
                                  progress=progress)
    params.save(cfg.paths.checkpoint)
    _save_state(cfg, params, flows)
    with open(cfg.paths.record, "w") as fh:
        fh.write(record.to_jsonl())
    _say(args, f"checkpoint -> {cfg.paths.checkpoint}; record -> {cfg.paths.record}")
    return EXIT_OK


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_report(rows: list[dict], path_json: str, path_csv: str, meta: dict | None = None) -> dict:
    agg = mean_of([{k: v for k, v in r.items() if k != "id"} for r in rows])
    doc = {"per_scene": {r["id"]: {k: v for k, v in r.items() if k != "id"} for r in rows},
           "aggregate": agg, "meta": meta or {}}
    for p in (path_json, path_csv):
        _ensure_parent(p)
    with open(path_json, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(path_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["id"]] + [_fmt(r.get(c)) for c in CSV_COLUMNS[1:]])
    return agg


def cmd_eval(cfg: RunConfig, args) -> int:
    scenes = _require_split(cfg, cfg.mode.eval_split)
    if cfg.mode.oracle:
        rows = [oracle_scene(s) for s in scenes]
    else:
        model = _load_checkpoint(cfg)
        with _Pool(worker_count()) as pool:
            rows, _ = evaluate(model, scenes, mapper=pool.map)
    agg = write_report(rows, cfg.paths.report, cfg.paths.csv,
                       {"split": cfg.mode.eval_split, "oracle": cfg.mode.oracle, "scenes": len(rows)})
    shown = ", ".join(f"{k}={agg[k]:.4f}" for k in CSV_COLUMNS[1:] if agg.get(k) is not None)
    _say(args, f"{len(rows)} scenes: {shown}")
    _say(args, f"report -> {cfg.paths.report}; csv -> {cfg.paths.csv}")
    return EXIT_OK


def cmd_check(cfg: RunConfig, args) -> int:
    from .checks import format_table, run_all

    results = run_all(reflection_fix=not cfg.mode.fault_reflection, quick=cfg.mode.quick)
    _say(args, format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "check": cmd_check}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mbse3", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON run configuration")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config value (repeatable)")
    ap.add_argument("--quiet", action="store_true")
    ap.add_argument("--oracle", action="store_true", help="eval: score ground truth injected as prediction")
    ap.add_argument("--inject-fault", action="store_true", help="check: disable the Kabsch reflection fix")
    ap.add_argument("--full", action="store_true", help="check: full-size property suite")
    ap.add_argument("--resume", action="store_true", help="train: continue from the checkpoint")
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    flags = {"oracle": args.oracle, "fault_reflection": args.inject_fault, "resume": args.resume}
    overrides += [f"mode.{k}=true" for k, on in flags.items() if on]
    if args.full:
        overrides.append("mode.quick=false")
    try:
        cfg = load_config(args.config, overrides)
        worker_count()
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, SceneSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (NonFiniteLoss, dc.NonFiniteGradient, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, SceneFormatError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (dc.ShapeError, KeyError) as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
