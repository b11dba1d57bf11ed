import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stable_gate.errors import DegenerateInputError
from stable_gate.lora import merge
from stable_gate.metrics import (
    AnchorItem,
    AnchorSet,
    DecodeConfig,
    ForgettingMeasure,
    MetricKind,
    answer_text,
    bits_increase,
    confidence_ratio,
    em_accuracy,
    em_drop,
    grade_answer,
    greedy_answers,
    kl_drift,
    kl_exact,
    normalize_answer,
    self_bits,
    write_breakdown,
)
from stable_gate.model import token_logprobs

from conftest import random_adapter


@pytest.fixture(scope="module")
def anchors():
    return AnchorSet((AnchorItem("kavo color?", "red", "dp0", 1), AnchorItem("lime pet?", "owl", "dp1", 2),
                      AnchorItem("tesu food?", "rice", "dp2", 3)))


def test_normalize_and_grade():
    assert normalize_answer("  Red. ") == "red"
    assert grade_answer(" red ", "red") == 1
    assert grade_answer("reds", "red") == 0


def test_metric_kind_parse():
    assert MetricKind.parse("EM") is MetricKind.EM_DROP
    assert MetricKind.parse("bits_increase") is MetricKind.BITS_INCREASE
    with pytest.raises(ValueError):
        MetricKind.parse("bleu")


def test_empty_anchor_set_rejected(small_params):
    with pytest.raises(DegenerateInputError):
        em_drop(small_params, small_params, AnchorSet(()))


def test_self_comparison_is_zero(small_params, anchors):
    assert em_drop(small_params, small_params, anchors).value == 0.0
    assert bits_increase(small_params, small_params, anchors).value == 0.0
    kl = kl_drift(small_params, small_params, anchors, DecodeConfig(max_tokens=4), seed=1)
    assert kl.value == 0.0 and kl.stderr == 0.0
    assert kl_exact(small_params, small_params, anchors) == 0.0


def test_bits_definition(small_params, anchors):
    """Mean over anchors of per-token -log2 p on the model's own greedy answer, EOA included."""
    dec = DecodeConfig(max_tokens=6)
    per = []
    for g in greedy_answers(small_params, anchors, dec):
        lp = token_logprobs(small_params, g)
        per.append(-lp.mean() / math.log(2))
    assert self_bits(small_params, anchors, dec) == pytest.approx(np.mean(per), abs=1e-12)


def test_em_matches_grading(small_params, anchors, vocab):
    dec = DecodeConfig(max_tokens=6)
    answers = [answer_text(g, vocab) for g in greedy_answers(small_params, anchors, dec)]
    want = np.mean([grade_answer(a, it.gold) for a, it in zip(answers, anchors.items)])
    assert em_accuracy(small_params, anchors, dec) == want


def test_values_clamped_and_raw(small_params, anchors):
    cand = merge(small_params, random_adapter(small_params.config, np.random.default_rng(0), std_b=1.0))
    for kind in ("em", "bits"):
        v = ForgettingMeasure(kind, small_params, anchors, DecodeConfig(max_tokens=6))(cand)
        assert v.value >= 0 and v.f == v.value
    kl = kl_drift(small_params, cand, anchors, DecodeConfig(max_tokens=6), seed=3)
    assert kl.f == max(0.0, kl.value)
    assert kl.n_tokens >= len(anchors)


def test_kl_seeded(small_params, anchors):
    cand = merge(small_params, random_adapter(small_params.config, np.random.default_rng(1)))
    a = kl_drift(small_params, cand, anchors, DecodeConfig(max_tokens=6), seed=7)
    b = kl_drift(small_params, cand, anchors, DecodeConfig(max_tokens=6), seed=7)
    assert a.value == b.value and a.per_anchor == b.per_anchor


def test_breakdown_jsonl(tmp_path, small_params, anchors):
    v = em_drop(small_params, small_params, anchors, DecodeConfig(max_tokens=4))
    write_breakdown(tmp_path / "b.jsonl", [v])
    rows = [json.loads(l) for l in (tmp_path / "b.jsonl").read_text().splitlines()]
    assert [r["anchor_id"] for r in rows] == ["dp0:0", "dp1:1", "dp2:2"]
    assert all(r["kind"] == "em" for r in rows)


def test_confidence_ratio():
    assert confidence_ratio(0.08) == pytest.approx(0.9460, abs=5e-4)
    assert confidence_ratio(0.0) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet=" .?abc", max_size=12))
def test_normalize_idempotent(s):
    assert normalize_answer(normalize_answer(s)) == normalize_answer(s)
