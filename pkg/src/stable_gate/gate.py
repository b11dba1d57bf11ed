"""Accept, rescale or reject a candidate LoRA merge against a forgetting budget."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .lora import LoraAdapter, apply_scaled
from .metrics import AnchorSet, DecodeConfig, ForgettingMeasure, MetricKind
from .model import ModelParams

DECISION_SCHEMA_VERSION = 1


class GateStatus(str, Enum):
    ACCEPTED_FULL = "accepted_full"
    ACCEPTED_SCALED = "accepted_scaled"
    REJECTED = "rejected"


@dataclass(frozen=True)
class GateConfig:
    metric: MetricKind = MetricKind.EM_DROP
    epsilon: float = 0.07
    alpha_min: float = 0.1
    search_passes: int = 5

    def __post_init__(self):
        object.__setattr__(self, "metric", MetricKind.parse(self.metric))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be nonnegative")
        if not 0 < self.alpha_min <= 1:
            raise ValueError("alpha_min must lie in (0, 1]")
        if self.search_passes < 1:
            raise ValueError("search_passes must be >= 1")

    @property
    def final_bracket_width(self) -> float:
        return (1.0 - self.alpha_min) / 2 ** self.search_passes

    def to_json(self) -> dict:
        return {"metric": self.metric.value, "epsilon": _enc_float(self.epsilon),
                "alpha_min": self.alpha_min, "search_passes": self.search_passes}

    @classmethod
    def from_json(cls, obj) -> "GateConfig":
        return cls(obj["metric"], _dec_float(obj["epsilon"]), obj["alpha_min"], obj["search_passes"])


def _enc_float(x: float | None):
    if x is None or math.isfinite(x):
        return x
    return "inf" if x > 0 else "-inf"


def _dec_float(x):
    return float(x) if isinstance(x, str) else x


@dataclass
class GateDecision:
    status: GateStatus
    alpha: float | None
    f_at_full: float | None
    f_at_accepted: float | None
    evaluations: list[tuple[float, float]]
    metric: MetricKind
    epsilon: float
    seed: int = 0
    reference: str = "previous"
    note: str = ""
    error: str | None = None

    @property
    def accepted(self) -> bool:
        return self.status is not GateStatus.REJECTED

    @property
    def n_evaluations(self) -> int:
        return len(self.evaluations)

    def to_json(self) -> dict:
        return {
            "schema_version": DECISION_SCHEMA_VERSION,
            "status": self.status.value,
            "alpha": self.alpha,
            "f_at_full": self.f_at_full,
            "f_at_accepted": self.f_at_accepted,
            "evaluations": [[a, f] for a, f in self.evaluations],
            "metric": self.metric.value,
            "epsilon": _enc_float(self.epsilon),
            "seed": self.seed,
            "reference": self.reference,
            "note": self.note,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, obj) -> "GateDecision":
        if obj.get("schema_version") != DECISION_SCHEMA_VERSION:
            raise ValueError(f"unsupported gate decision schema {obj.get('schema_version')!r}")
        return cls(GateStatus(obj["status"]), obj["alpha"], obj["f_at_full"], obj["f_at_accepted"],
                   [(a, f) for a, f in obj["evaluations"]], MetricKind.parse(obj["metric"]),
                   _dec_float(obj["epsilon"]), obj["seed"], obj["reference"], obj["note"], obj["error"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def clip_search(f: Callable[[float], float], epsilon: float, alpha_min: float = 0.1,
                search_passes: int = 5) -> tuple[GateStatus, float | None, list[tuple[float, float]]]:
    """Largest feasible scale in ``[alpha_min, 1]`` for a scalar forgetting curve.

    Probes ``f(1)`` then ``f(alpha_min)``, then bisects ``search_passes`` times
    keeping ``lo`` feasible and ``hi`` infeasible.  ``f == epsilon`` counts as
    feasible.  Returns (status, alpha, evaluation log).
    """
    log: list[tuple[float, float]] = []

    def probe(a: float) -> float:
        v = float(f(a))
        log.append((a, v))
        return v

    if probe(1.0) <= epsilon:
        return GateStatus.ACCEPTED_FULL, 1.0, log
    if alpha_min >= 1.0 or probe(alpha_min) > epsilon:
        return GateStatus.REJECTED, None, log
    lo, hi = alpha_min, 1.0
    for _ in range(search_passes):
        mid = 0.5 * (lo + hi)
        if probe(mid) <= epsilon:
            lo = mid
        else:
            hi = mid
    return GateStatus.ACCEPTED_SCALED, lo, log


def evaluate_f(ref: ModelParams, adapter: LoraAdapter, alpha: float, anchors: AnchorSet,
               cfg: GateConfig, decode: DecodeConfig = DecodeConfig(), seed: int = 0,
               measure: ForgettingMeasure | None = None) -> float:
    """Clamped forgetting of ``apply_scaled(ref, adapter, alpha)`` relative to ``ref``."""
    if measure is None:
        measure = ForgettingMeasure(cfg.metric, ref, anchors, decode, seed)
    return measure(apply_scaled(ref, adapter, alpha)).f


def gate_merge(ref: ModelParams, adapter: LoraAdapter, anchors: AnchorSet, cfg: GateConfig,
               decode: DecodeConfig = DecodeConfig(), seed: int = 0,
               reference: str = "previous") -> GateDecision:
    """Decide how (and whether) ``adapter`` may be merged into ``ref``.

    The merge itself is left to the caller.  An empty anchor set or an
    infinite budget accepts at full scale without evaluating anything.
    """
    common = dict(metric=cfg.metric, epsilon=cfg.epsilon, seed=seed, reference=reference)
    if len(anchors) == 0:
        return GateDecision(GateStatus.ACCEPTED_FULL, 1.0, None, None, [], note="empty anchor set", **common)
    if math.isinf(cfg.epsilon):
        return GateDecision(GateStatus.ACCEPTED_FULL, 1.0, None, None, [], note="unbounded budget", **common)
    try:
        measure = ForgettingMeasure(cfg.metric, ref, anchors, decode, seed)
        status, alpha, log = clip_search(
            lambda a: evaluate_f(ref, adapter, a, anchors, cfg, decode, seed, measure),
            cfg.epsilon, cfg.alpha_min, cfg.search_passes)
    except Exception as exc:  # noqa: BLE001 - recorded, never merged
        return GateDecision(GateStatus.REJECTED, None, None, None, [],
                            error=f"{type(exc).__name__}: {exc}", **common)
    f_full = log[0][1]
    f_acc = None
    if alpha is not None:
        f_acc = next(v for a, v in reversed(log) if a == alpha)
    return GateDecision(status, alpha, f_full, f_acc, log, **common)
