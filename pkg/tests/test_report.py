import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stable_gate.errors import RecordLoadError, UndefinedStatisticError
from stable_gate.gate import GateDecision, GateStatus
from stable_gate.harness import RunRecord, StepRecord
from stable_gate.metrics import MetricKind
from stable_gate.report import (
    FilterConfig,
    aggregate_step,
    emit_series,
    emit_tables,
    load_run_records,
    mean_se,
    outlier_filter,
    read_csv_table,
    threshold_label,
    write_tables,
)

# EM-gated 7% table: printed step means (baseline, final, delta) and Total row
PRINTED_7PCT = [(0.201, 0.283, "+0.082"), (0.325, 0.386, "+0.061"), (0.381, 0.429, "+0.049"),
                (0.358, 0.469, "+0.111"), (0.322, 0.269, "-0.053"), (0.346, 0.413, "+0.067"),
                (0.293, 0.308, "+0.015"), (0.453, 0.518, "+0.065")]
PRINTED_7PCT_TOTAL = ("2.679", "3.076", "+0.397")
# unrounded means consistent with every printed cell (each within half a unit of the third decimal)
_NUDGE_B = [0.0002, 0.0002, -0.0004, 0.0002, 0, 0, 0, 0]
_NUDGE_F = [0.0002, 0.0002, 0.0004, 0.0002, 0, 0, 0, 0]
PUBLISHED_BASELINE = [b + d for (b, _, _), d in zip(PRINTED_7PCT, _NUDGE_B)]
PUBLISHED_FINAL = [f + d for (_, f, _), d in zip(PRINTED_7PCT, _NUDGE_F)]


def _decision(status, alpha):
    return GateDecision(GateStatus(status), alpha, 0.0, 0.0, [], MetricKind.EM_DROP, 0.07)


def make_records(baselines, finals, kls=None, statuses=None, n_runs=12, label="em-0.07", spread=0.0, seed=0):
    rng = np.random.default_rng(seed)
    recs = []
    T = len(baselines)
    for r in range(n_runs):
        steps = []
        for t in range(1, T + 1):
            st_ = statuses[r][t - 1] if statuses else "accepted_full"
            jitter = rng.normal(0, spread)
            s = StepRecord(t, f"dp{t}", _decision(st_, None if st_ == "rejected" else 1.0),
                           baseline_em=baselines[t - 1] + jitter, final_em=finals[t - 1] + jitter)
            if t >= 2 and st_ != "rejected":
                s.step_kl = kls[r][t - 1] if kls else 0.1
            steps.append(s)
        recs.append(RunRecord(r, r, label, "h", [f"dp{t}" for t in range(1, T + 1)], steps, total_kl=0.5 + 0.01 * r))
    return recs


def test_published_total_delta_reproduced():
    recs = make_records(PUBLISHED_BASELINE, PUBLISHED_FINAL)
    perf = emit_tables(recs)["performance"]
    for row, (b, f, d) in zip(perf.rows, PRINTED_7PCT):
        assert row[2].startswith(f"{b:.3f} ± ") and row[3].startswith(f"{f:.3f} ± ") and row[4] == d
    assert perf.rows[-1][1] == "Total"
    assert tuple(perf.rows[-1][2:5]) == PRINTED_7PCT_TOTAL


def test_pm_format():
    recs = make_records([0.794], [0.8], n_runs=2)
    recs[0].steps[0].baseline_em = 0.715
    recs[1].steps[0].baseline_em = 0.873
    assert emit_tables(recs)["performance"].rows[0][2] == "0.794 ± 0.079"


def test_threshold_labels():
    assert threshold_label("em", 0.07) == "7%"
    assert threshold_label("em", 0.1) == "10%"
    assert threshold_label("bits", 0.08) == "0.08"
    assert threshold_label("kl", math.inf) == "ungated"


def test_step1_kl_omitted_and_rejected_excluded():
    statuses = [["accepted_full"] * 3 for _ in range(4)]
    statuses[0][1] = "rejected"
    kls = [[None, 0.2, 0.3] for _ in range(4)]
    recs = make_records([0.5] * 3, [0.6] * 3, kls=kls, statuses=statuses, n_runs=4)
    tables = emit_tables(recs)
    perf = tables["performance"]
    assert perf.rows[0][5] == "--"
    cell = perf.cells[1]["kl"]
    assert cell["n_excluded_rejected"] == 1 and cell["n_kept"] == 3
    assert [r[2:5] for r in tables["gating"].rows] == [["3", "0", "1"], ["4", "0", "0"]]


def test_outlier_rule():
    base = list(np.random.default_rng(1).normal(0, 1, 11))
    s, m = np.std(base, ddof=1), np.median(base)
    assert outlier_filter(base + [m + 6 * s])[1] == [11]
    assert outlier_filter(base + [m + 4 * s])[1] == []
    assert outlier_filter([1.0, 100.0])[1] == []


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=25))
def test_outlier_filter_idempotent_and_permutation_invariant(xs):
    kept, _ = outlier_filter(xs)
    assert outlier_filter(kept)[0] == kept
    kept_rev, _ = outlier_filter(xs[::-1])
    assert sorted(kept_rev) == sorted(kept)


def test_accounting_sums_with_failures():
    kls = [[None, 0.1 + 0.001 * r, 0.2] for r in range(12)]
    kls[3][1] = 50.0
    recs = make_records([0.5] * 3, [0.6] * 3, kls=kls)
    recs[5] = RunRecord(5, 5, "em-0.07", "h", [], failed=True, error="TrainingFailureError: x")
    perf = emit_tables(recs)["performance"]
    kl = perf.cells[1]["kl"]
    assert kl["n_excluded_outlier"] == 1 and kl["n_missing"] == 1
    for c in perf.cells[:-1]:
        for key in ("baseline", "final", "kl"):
            if c[key]:
                assert sum(c[key][k] for k in ("n_kept", "n_excluded_outlier", "n_excluded_rejected", "n_missing")) == 12


def test_strict_mode():
    recs = make_records([0.5], [0.6], n_runs=1)
    with pytest.raises(UndefinedStatisticError):
        aggregate_step(recs, 1, "baseline")
    assert aggregate_step(recs, 1, "baseline", strict=False).se is None


def test_mean_se_permutation_invariant():
    xs = list(np.random.default_rng(0).normal(size=12))
    m1, s1 = mean_se(xs)
    m2, s2 = mean_se(xs[::-1])
    assert m1 == pytest.approx(m2, abs=1e-15) and s1 == pytest.approx(s2, abs=1e-15)


def test_csv_roundtrip_and_schema_line(tmp_path):
    recs = make_records(PUBLISHED_BASELINE, PUBLISHED_FINAL)
    paths = write_tables(emit_tables(recs), tmp_path)
    text = paths[0].read_text()
    assert text.startswith("# schema_version=1 config_hash=h")
    t = read_csv_table(text)
    assert t.columns[0] == "Threshold" and t.rows[-1][1] == "Total"


def test_series_uses_cumulative_values():
    recs = make_records([0.5, 0.5], [0.6, 0.7])
    s = emit_series(recs)
    assert s["cumulative_delta_mean"] == pytest.approx([0.1, 0.3])
    assert s["cumulative_kl_mean"] == pytest.approx([0.0, 0.1])
    assert s["overall_kl"]["mean"] == pytest.approx(0.555)


def test_load_rejects_schema(tmp_path):
    recs = make_records([0.5], [0.6], n_runs=1)
    obj = recs[0].to_json()
    obj["schema_version"] = 99
    import json
    (tmp_path / "r.json").write_text(json.dumps(obj))
    with pytest.raises(RecordLoadError):
        load_run_records([tmp_path / "r.json"])
