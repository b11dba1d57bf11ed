"""Forgetting measures over an anchor set: EM drop, bits increase, KL drift.

Each measure compares a reference model with a candidate.  Reference-side
work (answers, bits, next-token distributions) is cached by
:class:`ForgettingMeasure` so the gate can probe many candidates cheaply.
"""
from __future__ import annotations

import json
import math
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError
from .model import (
    ModelParams,
    TokenSequence,
    Vocabulary,
    detokenize,
    generate,
    next_token_logprobs,
    sample_from_logprobs,
    sequence_logprob,
    tokenize,
)

LN2 = math.log(2.0)


class MetricKind(str, Enum):
    EM_DROP = "em"
    BITS_INCREASE = "bits"
    KL_DRIFT = "kl"

    @classmethod
    def parse(cls, value: "str | MetricKind") -> "MetricKind":
        if isinstance(value, MetricKind):
            return value
        aliases = {"em": cls.EM_DROP, "emdrop": cls.EM_DROP, "bits": cls.BITS_INCREASE,
                   "bitsincrease": cls.BITS_INCREASE, "kl": cls.KL_DRIFT, "kldrift": cls.KL_DRIFT}
        try:
            return aliases[str(value).lower().replace("_", "").replace("-", "")]
        except KeyError:
            raise ValueError(f"unknown metric {value!r}; expected em, bits or kl") from None


@dataclass(frozen=True)
class AnchorItem:
    prompt: str
    gold: str
    source_id: str = ""
    source_step: int = 0

    def __post_init__(self):
        if not self.prompt or not self.gold:
            raise ValueError("anchor prompt and gold answer must be nonempty")


@dataclass(frozen=True)
class AnchorSet:
    items: tuple[AnchorItem, ...]
    vocab: Vocabulary = field(default_factory=Vocabulary.default)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        for it in self.items:
            tokenize(it.prompt, self.vocab)
            tokenize(it.gold, self.vocab)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def count(self) -> int:
        return len(self.items)

    @cached_property
    def prompts(self) -> tuple[TokenSequence, ...]:
        return tuple(tokenize(it.prompt, self.vocab) for it in self.items)

    def anchor_id(self, i: int) -> str:
        it = self.items[i]
        return f"{it.source_id}:{i}" if it.source_id else str(i)


@dataclass(frozen=True)
class DecodeConfig:
    """Decoding knobs shared by all metrics.

    EM and bits use greedy answers of at most ``max_tokens``.  KL samples
    ``kl_samples`` continuations per anchor from the candidate at
    ``kl_temperature``; ``kl_floor`` optionally floors reference
    probabilities (off by default).
    """

    max_tokens: int = 32
    kl_temperature: float = 1.0
    kl_samples: int = 1
    kl_floor: float | None = None

    def __post_init__(self):
        if self.max_tokens < 1 or self.kl_samples < 1:
            raise ValueError("max_tokens and kl_samples must be >= 1")
        if self.kl_temperature <= 0:
            raise ValueError("kl_temperature must be > 0")

    def to_json(self) -> dict:
        return {"max_tokens": self.max_tokens, "kl_temperature": self.kl_temperature,
                "kl_samples": self.kl_samples, "kl_floor": self.kl_floor}


@dataclass
class MetricValue:
    """One forgetting measurement.

    ``value`` is clamped at zero for EM and bits and raw (possibly negative)
    for KL; ``f`` is always the clamped quantity the gate compares to epsilon.
    """

    kind: MetricKind
    value: float
    ref_value: float
    cand_value: float
    per_anchor: list[dict]
    stderr: float | None = None
    n_tokens: int | None = None

    @property
    def f(self) -> float:
        return max(0.0, self.value)

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "value": self.value, "f": self.f,
                "ref_value": self.ref_value, "cand_value": self.cand_value,
                "stderr": self.stderr, "n_tokens": self.n_tokens}

    def jsonl_lines(self) -> list[str]:
        return [json.dumps(row, sort_keys=True) for row in self.per_anchor]


# --------------------------------------------------------------------------
# grading
# --------------------------------------------------------------------------

_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Lowercase, trim, collapse whitespace, strip trailing punctuation."""
    text = _WS.sub(" ", text.lower()).strip()
    return text.rstrip(string.punctuation + " ")


def grade_answer(predicted: str, gold: str) -> int:
    if not gold:
        raise ValueError("gold answer must be nonempty")
    return int(normalize_answer(predicted) == normalize_answer(gold))


def answer_text(seq: TokenSequence, vocab: Vocabulary) -> str:
    cont = [t for t in seq.continuation if t != vocab.eoa_id]
    return detokenize(cont, vocab)


def confidence_ratio(delta_bits: float) -> float:
    """Probability ratio p_cand / p_ref implied by a bits/token increase."""
    return 2.0 ** (-delta_bits)


# --------------------------------------------------------------------------
# per-model quantities
# --------------------------------------------------------------------------

def _require_anchors(anchors: AnchorSet) -> None:
    if len(anchors) == 0:
        raise DegenerateInputError("metric evaluation needs a nonempty anchor set")


def greedy_answers(model: ModelParams, anchors: AnchorSet, decode: DecodeConfig) -> list[TokenSequence]:
    eoa = anchors.vocab.eoa_id
    return [generate(model, p, decode.max_tokens, "greedy", eoa_id=eoa) for p in anchors.prompts]


def em_grades(model: ModelParams, anchors: AnchorSet, decode: DecodeConfig = DecodeConfig()) -> list[int]:
    _require_anchors(anchors)
    outs = greedy_answers(model, anchors, decode)
    return [grade_answer(answer_text(o, anchors.vocab), it.gold) for o, it in zip(outs, anchors.items)]


def em_accuracy(model: ModelParams, anchors: AnchorSet, decode: DecodeConfig = DecodeConfig()) -> float:
    grades = em_grades(model, anchors, decode)
    return sum(grades) / len(grades)


def self_bits_per_anchor(model: ModelParams, anchors: AnchorSet,
                         decode: DecodeConfig = DecodeConfig()) -> list[float]:
    """Bits/token each anchor's greedy answer costs the model that produced it."""
    _require_anchors(anchors)
    out = []
    for i, seq in enumerate(greedy_answers(model, anchors, decode)):
        if len(seq) == seq.prompt_len:
            raise DegenerateInputError(f"zero-length generation for anchor {anchors.anchor_id(i)}")
        total, T = sequence_logprob(model, seq)
        out.append(-total / (T * LN2))
    return out


def self_bits(model: ModelParams, anchors: AnchorSet, decode: DecodeConfig = DecodeConfig()) -> float:
    per = self_bits_per_anchor(model, anchors, decode)
    return float(np.mean(per))


# --------------------------------------------------------------------------
# comparisons
# --------------------------------------------------------------------------

class _LogprobCache:
    """Memoized next-token log-probabilities keyed by prefix."""

    def __init__(self, model: ModelParams):
        self.model = model
        self._memo: dict[tuple[int, ...], np.ndarray] = {}

    def __call__(self, prefix: tuple[int, ...]) -> np.ndarray:
        lp = self._memo.get(prefix)
        if lp is None:
            lp = next_token_logprobs(self.model, prefix)
            self._memo[prefix] = lp
        return lp


class ForgettingMeasure:
    """Reference-anchored forgetting score for any number of candidates."""

    def __init__(self, kind: MetricKind | str, ref: ModelParams, anchors: AnchorSet,
                 decode: DecodeConfig = DecodeConfig(), seed: int = 0):
        _require_anchors(anchors)
        self.kind = MetricKind.parse(kind)
        self.ref = ref
        self.anchors = anchors
        self.decode = decode
        self.seed = seed
        self._ref_cache: object = None

    def __call__(self, cand: ModelParams) -> MetricValue:
        if self.kind is MetricKind.EM_DROP:
            return self._em(cand)
        if self.kind is MetricKind.BITS_INCREASE:
            return self._bits(cand)
        return self._kl(cand)

    def _em(self, cand):
        if self._ref_cache is None:
            self._ref_cache = em_grades(self.ref, self.anchors, self.decode)
        ref_g = self._ref_cache
        cand_g = em_grades(cand, self.anchors, self.decode)
        ref_em = sum(ref_g) / len(ref_g)
        cand_em = sum(cand_g) / len(cand_g)
        rows = [{"anchor_id": self.anchors.anchor_id(i), "kind": "em", "ref": r, "cand": c,
                 "f": float(max(0, r - c))} for i, (r, c) in enumerate(zip(ref_g, cand_g))]
        return MetricValue(MetricKind.EM_DROP, max(0.0, ref_em - cand_em), ref_em, cand_em, rows)

    def _bits(self, cand):
        if self._ref_cache is None:
            self._ref_cache = self_bits_per_anchor(self.ref, self.anchors, self.decode)
        ref_b = self._ref_cache
        cand_b = self_bits_per_anchor(cand, self.anchors, self.decode)
        ref_mean, cand_mean = float(np.mean(ref_b)), float(np.mean(cand_b))
        rows = [{"anchor_id": self.anchors.anchor_id(i), "kind": "bits", "ref": r, "cand": c,
                 "f": max(0.0, c - r)} for i, (r, c) in enumerate(zip(ref_b, cand_b))]
        return MetricValue(MetricKind.BITS_INCREASE, max(0.0, cand_mean - ref_mean), ref_mean, cand_mean, rows)

    def _kl(self, cand):
        if self._ref_cache is None:
            self._ref_cache = _LogprobCache(self.ref)
        return _kl_sampled(self._ref_cache, _LogprobCache(cand), self.anchors, self.decode, self.seed)


def _kl_sampled(ref_lp: _LogprobCache, cand_lp: _LogprobCache, anchors: AnchorSet,
                decode: DecodeConfig, seed: int) -> MetricValue:
    rng = np.random.default_rng(seed)
    eoa = anchors.vocab.eoa_id
    C = cand_lp.model.config.context_len
    log_floor = math.log(decode.kl_floor) if decode.kl_floor else None
    ratios: list[float] = []
    sum_ref = sum_cand = 0.0
    rows = []
    for i, prompt in enumerate(anchors.prompts):
        a_ratios = []
        a_ref = a_cand = 0.0
        for _ in range(decode.kl_samples):
            prefix = prompt.ids
            for _ in range(decode.max_tokens):
                if len(prefix) >= C:
                    break
                lp_c = cand_lp(prefix)
                tok = sample_from_logprobs(lp_c, rng, decode.kl_temperature)
                lc = float(lp_c[tok])
                lr = float(ref_lp(prefix)[tok])
                if log_floor is not None:
                    lr = max(lr, log_floor)
                a_ratios.append((lc - lr) / LN2)
                a_ref += lr / LN2
                a_cand += lc / LN2
                prefix = prefix + (tok,)
                if tok == eoa:
                    break
        n = len(a_ratios)
        rows.append({"anchor_id": anchors.anchor_id(i), "kind": "kl",
                     "ref": a_ref / n if n else None, "cand": a_cand / n if n else None,
                     "f": max(0.0, float(np.mean(a_ratios))) if n else None, "n_tokens": n})
        ratios.extend(a_ratios)
        sum_ref += a_ref
        sum_cand += a_cand
    T = len(ratios)
    if T == 0:
        raise DegenerateInputError("KL drift sampled no tokens (context full or max_tokens too small)")
    arr = np.asarray(ratios)
    value = float(arr.mean())
    stderr = float(arr.std(ddof=1) / math.sqrt(T)) if T > 1 else None
    return MetricValue(MetricKind.KL_DRIFT, value, sum_ref / T, sum_cand / T, rows, stderr, T)


def em_drop(ref: ModelParams, cand: ModelParams, anchors: AnchorSet,
            decode: DecodeConfig = DecodeConfig()) -> MetricValue:
    return ForgettingMeasure(MetricKind.EM_DROP, ref, anchors, decode)(cand)


def bits_increase(ref: ModelParams, cand: ModelParams, anchors: AnchorSet,
                  decode: DecodeConfig = DecodeConfig()) -> MetricValue:
    return ForgettingMeasure(MetricKind.BITS_INCREASE, ref, anchors, decode)(cand)


def kl_drift(ref: ModelParams, cand: ModelParams, anchors: AnchorSet,
             decode: DecodeConfig = DecodeConfig(), seed: int = 0) -> MetricValue:
    """Sampled per-token log2 ratio of candidate over reference on candidate samples."""
    return ForgettingMeasure(MetricKind.KL_DRIFT, ref, anchors, decode, seed)(cand)


def kl_exact(ref: ModelParams, cand: ModelParams,
             prompts: AnchorSet | Iterable[TokenSequence]) -> float:
    """Exact next-token KL(cand || ref) in bits, averaged over prompts.

    Evaluated at the position that predicts the first continuation token of
    each prompt, which is exactly what ``kl_drift`` with ``max_tokens=1``
    estimates.
    """
    seqs = list(prompts.prompts if isinstance(prompts, AnchorSet) else prompts)
    if not seqs:
        raise DegenerateInputError("kl_exact needs at least one prompt")
    total = 0.0
    for s in seqs:
        p_log = next_token_logprobs(cand, s.ids)
        q_log = next_token_logprobs(ref, s.ids)
        total += float(np.sum(np.exp(p_log) * (p_log - q_log))) / LN2
    # clamp rounding noise; the exact divergence is nonnegative
    return max(0.0, total / len(seqs))


def write_breakdown(path, values: Sequence[MetricValue]) -> None:
    with open(path, "w") as fh:
        for v in values:
            for line in v.jsonl_lines():
                fh.write(line + "\n")
