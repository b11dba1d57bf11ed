"""Sequential continual-editing experiments: train, gate, merge, measure.

One run samples ``edits_per_run`` datapoints.  At step ``t`` a fresh LoRA is
trained on datapoint ``t`` against the current model, gated against the QA
pairs of datapoints ``1..t-1`` (the anchors) using the current model as the
reference, and merged at the returned scale.  After the loop every step's QA
is scored under the pristine base and under the final model.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .data import EditDatapoint, generate_dataset
from .errors import DatasetError, StableGateError
from .gate import GateConfig, GateDecision, GateStatus, gate_merge, _dec_float
from .lora import TrainConfig, init_adapter, merge, train_lora
from .metrics import AnchorSet, DecodeConfig, MetricKind, em_accuracy, kl_drift
from .model import ModelConfig, ModelParams, Vocabulary, attention_weight_names, init_params, loss_and_grads

log = logging.getLogger(__name__)

RUN_SCHEMA_VERSION = 1

# purpose codes mixed into derived seeds
_RUN, _SAMPLE, _LORA_INIT, _TRAIN, _GATE, _STEP_KL, _TOTAL_KL, _BASE_DATA, _BASE_INIT, _BASE_TRAIN = range(10)


def derive_seed(*path: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in path]).generate_state(1)[0])


@dataclass(frozen=True)
class BaseConfig:
    """Pretraining of the pristine base on background facts (disjoint subjects)."""

    n_background: int = 150
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 8
    init_std: float = 0.08

    def __post_init__(self):
        if self.n_background < 1 or self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("invalid base pretraining configuration")


@dataclass(frozen=True)
class RunConfig:
    num_runs: int = 12
    edits_per_run: int = 8
    seed: int = 53
    gate: GateConfig = GateConfig()
    train: TrainConfig = TrainConfig(epochs=10, lr=1e-2, batch_size=1, optimizer="adam")
    decode: DecodeConfig = DecodeConfig(max_tokens=32, kl_samples=4)
    dataset_path: str | None = None
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] | None = None
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 64
    base: BaseConfig = BaseConfig()
    workers: int = 1

    def __post_init__(self):
        if self.num_runs < 1 or self.edits_per_run < 1:
            raise ValueError("num_runs and edits_per_run must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def ungated(self) -> bool:
        return math.isinf(self.gate.epsilon)

    @property
    def label(self) -> str:
        if self.ungated:
            return "ungated"
        return f"{self.gate.metric.value}-{self.gate.epsilon:g}"

    def model_config(self, vocab: Vocabulary) -> ModelConfig:
        return ModelConfig(vocab.size, self.d_model, self.n_layers, self.n_heads, self.context_len)

    def to_json(self) -> dict:
        return {
            "num_runs": self.num_runs, "edits_per_run": self.edits_per_run, "seed": self.seed,
            "gate": self.gate.to_json(),
            "train": {"epochs": self.train.epochs, "lr": self.train.lr, "batch_size": self.train.batch_size,
                      "optimizer": self.train.optimizer, "seed": self.train.seed},
            "decode": self.decode.to_json(),
            "dataset_path": self.dataset_path,
            "lora_rank": self.lora_rank, "lora_alpha": self.lora_alpha,
            "lora_targets": list(self.lora_targets) if self.lora_targets is not None else None,
            "d_model": self.d_model, "n_layers": self.n_layers, "n_heads": self.n_heads,
            "context_len": self.context_len,
            "base": dataclasses.asdict(self.base),
            "workers": self.workers,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "RunConfig":
        """Strict parse: unknown keys anywhere raise ``ValueError``."""
        top = {f.name for f in dataclasses.fields(cls)}
        _reject_unknown(obj, top, "config")
        kw = dict(obj)
        if "gate" in kw:
            g = kw["gate"]
            _reject_unknown(g, {"metric", "epsilon", "alpha_min", "search_passes"}, "gate")
            d = GateConfig()
            kw["gate"] = GateConfig(g.get("metric", d.metric), _dec_float(g.get("epsilon", d.epsilon)),
                                    g.get("alpha_min", d.alpha_min), g.get("search_passes", d.search_passes))
        if "train" in kw:
            _reject_unknown(kw["train"], {f.name for f in dataclasses.fields(TrainConfig)}, "train")
            kw["train"] = replace(cls.train, **kw["train"])
        if "decode" in kw:
            _reject_unknown(kw["decode"], {f.name for f in dataclasses.fields(DecodeConfig)}, "decode")
            kw["decode"] = replace(cls.decode, **kw["decode"])
        if "base" in kw:
            _reject_unknown(kw["base"], {f.name for f in dataclasses.fields(BaseConfig)}, "base")
            kw["base"] = BaseConfig(**kw["base"])
        if kw.get("lora_targets") is not None:
            kw["lora_targets"] = tuple(kw["lora_targets"])
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _reject_unknown(obj: Mapping, allowed: set, where: str) -> None:
    if not isinstance(obj, Mapping):
        raise ValueError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")


# --------------------------------------------------------------------------
# records
# --------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    datapoint_id: str
    decision: GateDecision
    baseline_em: float | None = None
    final_em: float | None = None
    step_kl: float | None = None
    step_kl_stderr: float | None = None
    anchor_count: int = 0
    anchor_em_before: float | None = None
    anchor_em_after: float | None = None
    own_em_after_merge: float | None = None
    train_loss_initial: float | None = None
    train_loss_final: float | None = None
    gate_seed: int = 0
    kl_seed: int = 0

    @property
    def delta(self) -> float | None:
        if self.baseline_em is None or self.final_em is None:
            return None
        return self.final_em - self.baseline_em

    @property
    def anchor_em_drop(self) -> float | None:
        if self.anchor_em_before is None or self.anchor_em_after is None:
            return None
        return max(0.0, self.anchor_em_before - self.anchor_em_after)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "step", "datapoint_id", "baseline_em", "final_em", "step_kl", "step_kl_stderr",
            "anchor_count", "anchor_em_before", "anchor_em_after", "own_em_after_merge",
            "train_loss_initial", "train_loss_final", "gate_seed", "kl_seed")}
        d["delta"] = self.delta
        d["decision"] = self.decision.to_json()
        return d

    @classmethod
    def from_json(cls, obj) -> "StepRecord":
        kw = {k: v for k, v in obj.items() if k not in ("decision", "delta")}
        return cls(decision=GateDecision.from_json(obj["decision"]), **kw)


@dataclass
class RunRecord:
    run_index: int
    seed: int
    label: str
    config_hash: str
    datapoint_ids: list[str]
    steps: list[StepRecord] = field(default_factory=list)
    total_kl: float | None = None
    total_kl_stderr: float | None = None
    failed: bool = False
    error: str | None = None

    @property
    def cumulative_delta(self) -> list[float]:
        out, acc = [], 0.0
        for s in self.steps:
            acc += s.delta if s.delta is not None else 0.0
            out.append(acc)
        return out

    def gating_steps(self) -> list[StepRecord]:
        return [s for s in self.steps if s.step >= 2]

    @property
    def counts(self) -> dict[str, int]:
        c = {"accepted_full": 0, "accepted_scaled": 0, "rejected": 0}
        for s in self.gating_steps():
            c[s.decision.status.value] += 1
        return c

    @property
    def scale_factors(self) -> list[float]:
        return [s.decision.alpha for s in self.gating_steps() if s.decision.accepted]

    @property
    def total_anchor_em_degradation(self) -> float:
        return sum(s.anchor_em_drop or 0.0 for s in self.steps)

    def to_json(self) -> dict:
        return {
            "schema_version": RUN_SCHEMA_VERSION,
            "run_index": self.run_index, "seed": self.seed, "label": self.label,
            "config_hash": self.config_hash, "datapoint_ids": self.datapoint_ids,
            "steps": [s.to_json() for s in self.steps],
            "total_kl": self.total_kl, "total_kl_stderr": self.total_kl_stderr,
            "cumulative_delta": self.cumulative_delta,
            "counts": self.counts, "scale_factors": self.scale_factors,
            "total_anchor_em_degradation": self.total_anchor_em_degradation,
            "failed": self.failed, "error": self.error,
        }

    @classmethod
    def from_json(cls, obj) -> "RunRecord":
        if obj.get("schema_version") != RUN_SCHEMA_VERSION:
            raise ValueError(f"unsupported run record schema {obj.get('schema_version')!r}")
        return cls(obj["run_index"], obj["seed"], obj["label"], obj["config_hash"], obj["datapoint_ids"],
                   [StepRecord.from_json(s) for s in obj["steps"]], obj["total_kl"], obj["total_kl_stderr"],
                   obj["failed"], obj["error"])

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


# --------------------------------------------------------------------------
# base model
# --------------------------------------------------------------------------

def pretrain_base(cfg: RunConfig, dataset: Sequence[EditDatapoint], vocab: Vocabulary | None = None) -> ModelParams:
    """Full-parameter Adam pretraining on background facts.

    Background subjects never overlap the edit dataset, so the base learns
    the question format and answer pools but none of the edited facts.
    """
    vocab = vocab or Vocabulary.default()
    bc = cfg.base
    background = generate_dataset(bc.n_background, 4, vocab, derive_seed(cfg.seed, _BASE_DATA),
                                   exclude_subjects=[dp.subject() for dp in dataset], id_prefix="bg")
    seqs = [s for dp in background for s in dp.training_sequences(vocab)]
    params = init_params(cfg.model_config(vocab), derive_seed(cfg.seed, _BASE_INIT), bc.init_std)
    arrays = {n: a.copy() for n, a in params.arrays.items()}
    m = {n: np.zeros_like(a) for n, a in arrays.items()}
    v = {n: np.zeros_like(a) for n, a in arrays.items()}
    rng = np.random.default_rng(derive_seed(cfg.seed, _BASE_TRAIN))
    step = 0
    for epoch in range(bc.epochs):
        order = rng.permutation(len(seqs))
        for i in range(0, len(seqs), bc.batch_size):
            batch = [seqs[j] for j in order[i:i + bc.batch_size]]
            loss, g = loss_and_grads(ModelParams(params.config, arrays, check=False), batch)
            step += 1
            for n in arrays:
                m[n] = 0.9 * m[n] + 0.1 * g[n]
                v[n] = 0.999 * v[n] + 0.001 * g[n] * g[n]
                arrays[n] -= bc.lr * (m[n] / (1 - 0.9 ** step)) / (np.sqrt(v[n] / (1 - 0.999 ** step)) + 1e-8)
        log.debug("base epoch %d loss %.4f", epoch, loss)
    return ModelParams(params.config, arrays)


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------

def _anchor_set(dps: Sequence[EditDatapoint], vocab: Vocabulary, first_step: int = 1) -> AnchorSet:
    return AnchorSet(tuple(a for i, dp in enumerate(dps) for a in dp.anchors(first_step + i)), vocab)


def run_single(cfg: RunConfig, dataset: Sequence[EditDatapoint], base: ModelParams, run_index: int,
               vocab: Vocabulary | None = None) -> RunRecord:
    vocab = vocab or Vocabulary.default()
    run_seed = derive_seed(cfg.seed, _RUN, run_index)
    rng = np.random.default_rng(derive_seed(run_seed, _SAMPLE))
    picks = rng.choice(len(dataset), cfg.edits_per_run, replace=False)
    dps = [dataset[int(i)] for i in picks]
    rec = RunRecord(run_index, run_seed, cfg.label, cfg.config_hash(), [dp.id for dp in dps])
    targets = cfg.lora_targets or tuple(attention_weight_names(base.config))
    model = base
    try:
        for t, dp in enumerate(dps, 1):
            anchors = _anchor_set(dps[:t - 1], vocab)
            adapter = init_adapter(base.config, cfg.lora_rank, cfg.lora_alpha,
                                   derive_seed(run_seed, _LORA_INIT, t), targets)
            adapter = train_lora(model, adapter, dp.training_sequences(vocab),
                                 replace(cfg.train, seed=derive_seed(run_seed, _TRAIN, t)))
            gate_seed = derive_seed(run_seed, _GATE, t)
            decision = gate_merge(model, adapter, anchors, cfg.gate, cfg.decode, gate_seed)
            new = merge(model, adapter, decision.alpha) if decision.accepted else model
            step = StepRecord(t, dp.id, decision, anchor_count=len(anchors), gate_seed=gate_seed,
                              train_loss_initial=adapter.train_losses[0],
                              train_loss_final=adapter.train_losses[-1])
            if len(anchors):
                step.anchor_em_before = em_accuracy(model, anchors, cfg.decode)
                step.anchor_em_after = em_accuracy(new, anchors, cfg.decode) if decision.accepted \
                    else step.anchor_em_before
                if t > 1 and decision.accepted:
                    step.kl_seed = derive_seed(run_seed, _STEP_KL, t)
                    kl = kl_drift(model, new, anchors, cfg.decode, step.kl_seed)
                    step.step_kl, step.step_kl_stderr = kl.value, kl.stderr
            step.own_em_after_merge = em_accuracy(new, _anchor_set([dp], vocab, t), cfg.decode)
            rec.steps.append(step)
            model = new
    except StableGateError as exc:
        log.warning("run %d failed: %s", run_index, exc)
        rec.failed = True
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    for step, dp in zip(rec.steps, dps):
        own = _anchor_set([dp], vocab, step.step)
        step.baseline_em = em_accuracy(base, own, cfg.decode)
        step.final_em = em_accuracy(model, own, cfg.decode)
    total = kl_drift(base, model, _anchor_set(dps, vocab), cfg.decode, derive_seed(run_seed, _TOTAL_KL))
    rec.total_kl, rec.total_kl_stderr = total.value, total.stderr
    return rec


def _run_worker(args):
    cfg, dataset, base, run_index = args
    return run_single(cfg, dataset, base, run_index)


def run_experiment(cfg: RunConfig, dataset: Sequence[EditDatapoint], base: ModelParams | None = None,
                   workers: int | None = None) -> list[RunRecord]:
    """All runs of one configuration, in run-index order."""
    if len(dataset) < cfg.edits_per_run:
        raise DatasetError(f"dataset has {len(dataset)} datapoints, need >= {cfg.edits_per_run}")
    if base is None:
        base = pretrain_base(cfg, dataset)
    workers = workers or cfg.workers
    jobs = [(cfg, list(dataset), base, i) for i in range(cfg.num_runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_worker, jobs))
    else:
        records = [_run_worker(j) for j in jobs]
    return sorted(records, key=lambda r: r.run_index)


def ungated_config(cfg: RunConfig) -> RunConfig:
    return replace(cfg, gate=replace(cfg.gate, epsilon=math.inf))


def ungated_baseline(cfg: RunConfig, dataset: Sequence[EditDatapoint], base: ModelParams | None = None,
                     workers: int | None = None) -> list[RunRecord]:
    """The unconstrained-merge arm: every adapter merges at full scale."""
    return run_experiment(ungated_config(cfg), dataset, base, workers)


def status_counts(records: Sequence[RunRecord]) -> dict[str, int]:
    c = {s.value: 0 for s in GateStatus}
    for r in records:
        for k, v in r.counts.items():
            c[k] += v
    return c
