"""Cross-run statistics: outlier filtering, mean +/- SE cells, tables, series."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import RecordLoadError, UndefinedStatisticError
from .gate import GateStatus
from .harness import RUN_SCHEMA_VERSION, RunRecord
from .metrics import MetricKind

TABLE_SCHEMA_VERSION = 1

PERFORMANCE_COLUMNS = ("Threshold", "Step", "Baseline (± SE)", "Final (± SE)", "Δ", "KL (mean ± SE)")
GATING_COLUMNS = ("Threshold", "Step", "Accept", "Scaled", "Rejected", "Mean Scale (±SE)")
MISSING = "--"


@dataclass(frozen=True)
class FilterConfig:
    k: float = 5.0

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be > 0")


def outlier_filter(values: Sequence[float], cfg: FilterConfig = FilterConfig()) -> tuple[list[float], list[int]]:
    """Drop values further than ``k`` standard deviations from the median.

    A value's deviation is scored against the sample standard deviation
    (n-1 denominator) of the *other* values, so a lone extreme point cannot
    hide by inflating the spread it is judged against.  The pass repeats on
    the survivors until nothing more is dropped, which makes the filter
    idempotent.  Returns kept values (original order) and excluded indices.
    """
    vals = np.asarray(values, dtype=float)
    if vals.size == 0:
        raise ValueError("outlier_filter needs at least one value")
    alive = np.arange(vals.size)
    while alive.size >= 3:
        x = vals[alive]
        med = np.median(x)
        drop = []
        for j in range(x.size):
            rest = np.delete(x, j)
            sd = rest.std(ddof=1)
            if abs(x[j] - med) > cfg.k * sd:
                drop.append(j)
        if not drop:
            break
        alive = np.delete(alive, drop)
    excluded = sorted(set(range(vals.size)) - set(alive.tolist()))
    return vals[alive].tolist(), excluded


@dataclass
class AggregateCell:
    mean: float | None
    se: float | None
    n_kept: int
    n_excluded_outlier: int = 0
    n_excluded_rejected: int = 0
    n_missing: int = 0

    @property
    def n_total(self) -> int:
        return self.n_kept + self.n_excluded_outlier + self.n_excluded_rejected + self.n_missing

    def to_json(self) -> dict:
        return {"mean": self.mean, "se": self.se, "n_kept": self.n_kept,
                "n_excluded_outlier": self.n_excluded_outlier,
                "n_excluded_rejected": self.n_excluded_rejected, "n_missing": self.n_missing}


def mean_se(values: Sequence[float]) -> tuple[float | None, float | None]:
    if len(values) == 0:
        return None, None
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()), None
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


def _step_of(rec: RunRecord, step: int):
    for s in rec.steps:
        if s.step == step:
            return s
    return None


def aggregate_step(records: Sequence[RunRecord], step: int, quantity: str,
                   cfg: FilterConfig = FilterConfig(), strict: bool = True) -> AggregateCell:
    """Mean +/- SE of one quantity at one step across runs.

    ``quantity`` is one of ``baseline``, ``final``, ``delta``, ``kl``,
    ``scale`` or ``total_kl`` (``step`` is ignored for the latter).  KL
    quantities drop rejected steps and then outliers; ``scale`` drops
    rejected steps only; EM quantities keep everything present.
    """
    values: list[float] = []
    n_rej = n_missing = 0
    for rec in records:
        if quantity == "total_kl":
            if rec.failed or rec.total_kl is None:
                n_missing += 1
            else:
                values.append(rec.total_kl)
            continue
        s = None if rec.failed else _step_of(rec, step)
        if s is None:
            n_missing += 1
            continue
        if quantity in ("kl", "scale") and s.decision.status is GateStatus.REJECTED:
            n_rej += 1
            continue
        v = {"baseline": s.baseline_em, "final": s.final_em, "delta": s.delta,
             "kl": s.step_kl, "scale": s.decision.alpha}.get(quantity, KeyError)
        if v is KeyError:
            raise ValueError(f"unknown quantity {quantity!r}")
        if v is None:
            n_missing += 1
        else:
            values.append(float(v))
    n_out = 0
    if quantity in ("kl", "total_kl") and values:
        values, excluded = outlier_filter(values, cfg)
        n_out = len(excluded)
    if strict and len(values) < 2:
        raise UndefinedStatisticError(f"{quantity} at step {step}: {len(values)} kept value(s), need >= 2 for SE")
    mean, se = mean_se(values)
    return AggregateCell(mean, se, len(values), n_out, n_rej, n_missing)


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------

@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: list[list[str]]
    cells: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version={TABLE_SCHEMA_VERSION} config_hash={self.meta.get('config_hash', '')}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"schema_version": TABLE_SCHEMA_VERSION, "name": self.name, "columns": list(self.columns),
                "rows": self.rows, "cells": self.cells, **self.meta}


def read_csv_table(text: str, name: str = "") -> Table:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = list(csv.reader(lines))
    return Table(name, tuple(reader[0]), [list(r) for r in reader[1:]])


def _pm(cell: AggregateCell) -> str:
    if cell.mean is None:
        return MISSING
    if cell.se is None:
        return f"{cell.mean:.3f} ± null"
    return f"{cell.mean:.3f} ± {cell.se:.3f}"


def threshold_label(metric: MetricKind | str, epsilon: float) -> str:
    if math.isinf(epsilon):
        return "ungated"
    if MetricKind.parse(metric) is MetricKind.EM_DROP:
        return f"{epsilon * 100:g}%"
    return f"{epsilon:g}"


def _config_info(records: Sequence[RunRecord]) -> tuple[str, str, int]:
    if not records:
        raise ValueError("no run records")
    labels = {r.label for r in records}
    hashes = {r.config_hash for r in records}
    if len(labels) > 1 or len(hashes) > 1:
        raise ValueError(f"records mix configurations: {sorted(labels)}")
    ok = [r for r in records if not r.failed]
    if not ok:
        raise ValueError("every run failed; nothing to tabulate")
    d = ok[0].steps[0].decision
    return threshold_label(d.metric, d.epsilon), records[0].config_hash, max(len(r.steps) for r in ok)


def performance_table(records: Sequence[RunRecord], cfg: FilterConfig = FilterConfig()) -> Table:
    thr, chash, T = _config_info(records)
    rows, cells = [], []
    totals = {"baseline": 0.0, "final": 0.0, "delta": 0.0}
    for t in range(1, T + 1):
        base = aggregate_step(records, t, "baseline", cfg, strict=False)
        fin = aggregate_step(records, t, "final", cfg, strict=False)
        delta = (fin.mean - base.mean) if base.mean is not None and fin.mean is not None else None
        kl = aggregate_step(records, t, "kl", cfg, strict=False) if t >= 2 else None
        totals["baseline"] += base.mean or 0.0
        totals["final"] += fin.mean or 0.0
        totals["delta"] += delta or 0.0
        rows.append([thr, str(t), _pm(base), _pm(fin), MISSING if delta is None else f"{delta:+.3f}",
                     MISSING if kl is None or kl.mean is None else _pm(kl)])
        cells.append({"step": t, "baseline": base.to_json(), "final": fin.to_json(), "delta": delta,
                      "kl": None if kl is None else kl.to_json()})
    total_kl = aggregate_step(records, 0, "total_kl", cfg, strict=False)
    rows.append([thr, "Total", f"{totals['baseline']:.3f}", f"{totals['final']:.3f}",
                 f"{totals['delta']:+.3f}", _pm(total_kl)])
    cells.append({"step": "Total", "baseline": totals["baseline"], "final": totals["final"],
                  "delta": totals["delta"], "total_kl": total_kl.to_json(),
                  "note": "Total KL is base-to-final drift and differs from the sum of per-step KL"})
    return Table("performance", PERFORMANCE_COLUMNS, rows, cells,
                 {"config_hash": chash, "threshold": thr, "num_runs": len(records)})


def gating_table(records: Sequence[RunRecord], cfg: FilterConfig = FilterConfig()) -> Table:
    thr, chash, T = _config_info(records)
    rows, cells = [], []
    for t in range(2, T + 1):
        counts = {s: 0 for s in GateStatus}
        for rec in records:
            st = None if rec.failed else _step_of(rec, t)
            if st is not None:
                counts[st.decision.status] += 1
        scale = aggregate_step(records, t, "scale", cfg, strict=False)
        rows.append([thr, str(t), str(counts[GateStatus.ACCEPTED_FULL]), str(counts[GateStatus.ACCEPTED_SCALED]),
                     str(counts[GateStatus.REJECTED]), _pm(scale)])
        cells.append({"step": t, "accept": counts[GateStatus.ACCEPTED_FULL],
                      "scaled": counts[GateStatus.ACCEPTED_SCALED],
                      "rejected": counts[GateStatus.REJECTED], "scale": scale.to_json()})
    return Table("gating", GATING_COLUMNS, rows, cells,
                 {"config_hash": chash, "threshold": thr, "num_runs": len(records)})


def emit_tables(records: Sequence[RunRecord], cfg: FilterConfig = FilterConfig(),
                out_dir: str | Path | None = None) -> dict[str, Table]:
    """Performance and gating tables for one configuration; written if ``out_dir``."""
    tables = {"performance": performance_table(records, cfg), "gating": gating_table(records, cfg)}
    if out_dir is not None:
        write_tables(tables, out_dir)
    return tables


def write_tables(tables: dict[str, Table], out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, table in tables.items():
        p = out / f"{name}.csv"
        p.write_text(table.to_csv(), encoding="utf-8")
        paths.append(p)
    p = out / "tables.json"
    p.write_text(json.dumps({n: t.to_json() for n, t in tables.items()}, indent=1, sort_keys=True,
                            ensure_ascii=False), encoding="utf-8")
    paths.append(p)
    return paths


# --------------------------------------------------------------------------
# series
# --------------------------------------------------------------------------

def emit_series(records: Sequence[RunRecord], cfg: FilterConfig = FilterConfig()) -> dict:
    """Cumulative delta and cumulative per-step KL, per run and averaged.

    A missing per-step KL (step 1, rejected step) contributes zero: the model
    did not change.  The base-to-final KL is reported separately as
    ``overall_kl`` and is not the endpoint of the cumulative KL series.
    """
    ok = [r for r in records if not r.failed]
    if not ok:
        raise ValueError("no completed runs")
    T = max(len(r.steps) for r in ok)
    per_run = []
    for r in ok:
        ckl, acc = [], 0.0
        for s in r.steps:
            acc += s.step_kl if s.step_kl is not None else 0.0
            ckl.append(acc)
        per_run.append({"run_index": r.run_index, "cumulative_delta": r.cumulative_delta, "cumulative_kl": ckl})
    mean_delta, mean_kl = [], []
    acc_d = acc_k = 0.0
    for t in range(1, T + 1):
        d = aggregate_step(ok, t, "delta", cfg, strict=False)
        acc_d += d.mean or 0.0
        mean_delta.append(acc_d)
        if t >= 2:
            k = aggregate_step(ok, t, "kl", cfg, strict=False)
            acc_k += k.mean or 0.0
        mean_kl.append(acc_k)
    overall = aggregate_step(ok, 0, "total_kl", cfg, strict=False)
    return {
        "schema_version": TABLE_SCHEMA_VERSION,
        "label": ok[0].label, "config_hash": ok[0].config_hash,
        "steps": list(range(1, T + 1)),
        "cumulative_delta_mean": mean_delta,
        "cumulative_kl_mean": mean_kl,
        "overall_kl": overall.to_json(),
        "per_run": per_run,
    }


def write_series(series: dict, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p_json = out / "series.json"
    p_json.write_text(json.dumps(series, indent=1, sort_keys=True), encoding="utf-8")
    p_csv = out / "series.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Step", "Cumulative Δ", "Cumulative KL", "Overall KL"])
    for i, t in enumerate(series["steps"]):
        w.writerow([t, f"{series['cumulative_delta_mean'][i]:.6f}", f"{series['cumulative_kl_mean'][i]:.6f}",
                    "" if series["overall_kl"]["mean"] is None else f"{series['overall_kl']['mean']:.6f}"])
    p_csv.write_text(buf.getvalue(), encoding="utf-8")
    return [p_json, p_csv]


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def load_run_records(paths: Iterable[str | Path]) -> list[RunRecord]:
    out = []
    for p in paths:
        try:
            obj = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise RecordLoadError(f"{p}: unreadable run record ({exc})") from None
        if obj.get("schema_version") != RUN_SCHEMA_VERSION:
            raise RecordLoadError(f"{p}: schema version {obj.get('schema_version')!r} != {RUN_SCHEMA_VERSION}")
        out.append(RunRecord.from_json(obj))
    return out


def group_by_label(records: Iterable[RunRecord]) -> dict[str, list[RunRecord]]:
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.label, []).append(r)
    return {k: sorted(v, key=lambda r: r.run_index) for k, v in sorted(groups.items())}
