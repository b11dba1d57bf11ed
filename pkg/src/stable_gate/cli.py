"""Command-line entry point: gen-data, run, report, all.

Examples::

    stable-gate gen-data --out out/
    stable-gate run --preset em-7 --out out/
    stable-gate run --ungated --out out/
    stable-gate report --out out/
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import _kernels
from .checkpoint import load_model, save_model
from .data import generate_dataset, load_dataset, save_dataset
from .errors import StableGateError
from .gate import GateConfig
from .harness import RunConfig, pretrain_base, run_experiment
from .report import emit_series, emit_tables, group_by_label, load_run_records, write_series, write_tables

log = logging.getLogger("stable_gate")

PRESETS = {
    "em-10": ("em", 0.10),
    "em-7": ("em", 0.07),
    "bits-0.08": ("bits", 0.08),
    "bits-0.06": ("bits", 0.06),
    "kl-0.7": ("kl", 0.7),
    "kl-0.5": ("kl", 0.5),
}

DATASET_SIZE = 64
QA_PER_DATAPOINT = 2


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stable-gate", description="Gated continual LoRA editing experiments.")
    ap.add_argument("command", choices=("gen-data", "run", "report", "all"))
    ap.add_argument("--config", help="JSON file mirroring RunConfig")
    ap.add_argument("--out", help="output directory (falls back to $STABLE_GATE_OUT)")
    ap.add_argument("--metric", choices=("em", "bits", "kl"))
    ap.add_argument("--epsilon", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--runs", type=int)
    ap.add_argument("--edits", type=int)
    ap.add_argument("--ungated", action="store_true", help="bypass the gate (always merge at scale 1)")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--preset", choices=sorted(PRESETS))
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def effective_config(args) -> RunConfig:
    obj = {}
    if args.config:
        try:
            obj = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    try:
        cfg = RunConfig.from_json(obj)
        gate = cfg.gate
        if args.preset:
            metric, eps = PRESETS[args.preset]
            gate = GateConfig(metric, eps, gate.alpha_min, gate.search_passes)
        if args.metric:
            gate = GateConfig(args.metric, gate.epsilon, gate.alpha_min, gate.search_passes)
        if args.epsilon is not None:
            gate = GateConfig(gate.metric, args.epsilon, gate.alpha_min, gate.search_passes)
        if args.ungated:
            gate = GateConfig(gate.metric, math.inf, gate.alpha_min, gate.search_passes)
        over = {"gate": gate}
        for flag, name in (("seed", "seed"), ("runs", "num_runs"), ("edits", "edits_per_run"), ("workers", "workers")):
            if getattr(args, flag) is not None:
                over[name] = getattr(args, flag)
        return replace(cfg, **over)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("STABLE_GATE_OUT")
    if not out:
        raise UsageError("no output directory: pass --out or set STABLE_GATE_OUT")
    return Path(out)


def _rel(path: Path, root: Path) -> str:
    return path.relative_to(root).as_posix()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_manifest(root: Path) -> dict:
    p = root / "manifest.json"
    if p.exists():
        return json.loads(p.read_text())
    return {"schema_version": 1, "datasets": {}, "runs": {}, "reports": {}, "bases": {}}


def _save_manifest(root: Path, manifest: dict) -> None:
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def cmd_gen_data(cfg: RunConfig, root: Path, manifest: dict) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    path = root / "dataset.jsonl"
    save_dataset(path, generate_dataset(DATASET_SIZE, QA_PER_DATAPOINT, seed=cfg.seed))
    manifest["datasets"][_rel(path, root)] = {"seed": cfg.seed, "n_datapoints": DATASET_SIZE,
                                              "qa_per_datapoint": QA_PER_DATAPOINT, "sha256": _sha256(path)}
    return path


def _dataset_path(cfg: RunConfig, root: Path, manifest: dict) -> Path:
    if cfg.dataset_path:
        p = Path(cfg.dataset_path)
        if not p.exists():
            raise UsageError(f"dataset {p} not found")
        return p
    p = root / "dataset.jsonl"
    if not p.exists():
        log.info("no dataset in %s; generating one", root)
        cmd_gen_data(cfg, root, manifest)
    return p


def cmd_run(cfg: RunConfig, root: Path, manifest: dict) -> list[Path]:
    root.mkdir(parents=True, exist_ok=True)
    ds_path = _dataset_path(cfg, root, manifest)
    dataset = load_dataset(ds_path)
    base_key = hashlib.sha256(json.dumps({
        "seed": cfg.seed, "base": cfg.to_json()["base"], "dims": [cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.context_len],
        "dataset": _sha256(ds_path), "backend": _kernels.BACKEND,
    }, sort_keys=True).encode()).hexdigest()[:16]
    base_path = root / "bases" / f"base-{base_key}.ckpt"
    if base_path.exists():
        base = load_model(base_path)
    else:
        log.info("pretraining base model")
        base = pretrain_base(cfg, dataset)
        base_path.parent.mkdir(parents=True, exist_ok=True)
        save_model(base_path, base)
    manifest["bases"][_rel(base_path, root)] = {"seed": cfg.seed, "sha256": _sha256(base_path)}
    log.info("running %s: %d runs x %d edits", cfg.label, cfg.num_runs, cfg.edits_per_run)
    records = run_experiment(cfg, dataset, base)
    run_dir = root / "runs" / cfg.label
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in run_dir.glob("run_*.json"):
        stale.unlink()
    paths = []
    for rec in records:
        p = run_dir / f"run_{rec.run_index:03d}.json"
        p.write_text(rec.dumps() + "\n")
        paths.append(p)
    manifest["runs"][cfg.label] = {
        "config": cfg.to_json(), "config_hash": cfg.config_hash(), "seed": cfg.seed,
        "run_seeds": [r.seed for r in records], "dataset": str(ds_path if cfg.dataset_path else _rel(ds_path, root)),
        "base": _rel(base_path, root), "backend": _kernels.BACKEND,
        "failed_runs": [r.run_index for r in records if r.failed],
        "artifacts": [_rel(p, root) for p in paths],
    }
    return paths


def cmd_report(root: Path, manifest: dict) -> list[Path]:
    files = sorted((root / "runs").glob("*/run_*.json")) if (root / "runs").is_dir() else []
    if not files:
        raise UsageError(f"no run records found under {root}")
    groups = group_by_label(load_run_records(files))
    written = []
    for label, recs in groups.items():
        out = root / "reports" / label
        tables = emit_tables(recs)
        paths = write_tables(tables, out) + write_series(emit_series(recs), out)
        manifest["reports"][label] = {"config_hash": recs[0].config_hash,
                                      "artifacts": [_rel(p, root) for p in paths]}
        written += paths
    return written


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        root = _out_dir(args)
        cfg = effective_config(args)
        manifest = _load_manifest(root)
        if args.command == "gen-data":
            cmd_gen_data(cfg, root, manifest)
        elif args.command == "run":
            cmd_run(cfg, root, manifest)
        elif args.command == "report":
            if not root.is_dir():
                raise UsageError(f"no run records found under {root}")
            cmd_report(root, manifest)
        else:
            cmd_gen_data(cfg, root, manifest)
            cmd_run(cfg, root, manifest)
            cmd_report(root, manifest)
        _save_manifest(root, manifest)
    except UsageError as exc:
        print(f"stable-gate: error: {exc}", file=sys.stderr)
        return 2
    except StableGateError as exc:
        print(f"stable-gate: [{exc.module}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_exit()
