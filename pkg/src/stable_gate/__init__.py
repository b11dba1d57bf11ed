"""Threshold-gated LoRA merging for continual knowledge editing.

A tiny numpy transformer is edited one datapoint at a time.  Each edit is
a LoRA adapter whose merge scale is clipped by a bisection gate so that a
forgetting metric (EM drop, bits increase or KL drift) on earlier edits
stays within a tolerance.
"""
from ._kernels import BACKEND
from .data import EditDatapoint, generate_dataset, load_dataset, save_dataset
from .errors import (
    CapacityError,
    CheckpointError,
    ConformanceError,
    DatasetError,
    DegenerateInputError,
    NumericalFailureError,
    RecordLoadError,
    ShapeError,
    StableGateError,
    TrainingFailureError,
    UndefinedStatisticError,
    UnknownCharacterError,
)
from .gate import GateConfig, GateDecision, GateStatus, clip_search, gate_merge
from .harness import RunConfig, RunRecord, StepRecord, derive_seed, pretrain_base, run_experiment, run_single
from .lora import LoraAdapter, TrainConfig, apply_scaled, delta_weight, init_adapter, merge, train_lora
from .metrics import (
    AnchorItem,
    AnchorSet,
    DecodeConfig,
    ForgettingMeasure,
    MetricKind,
    MetricValue,
    bits_increase,
    em_drop,
    kl_drift,
    kl_exact,
)
from .model import (
    ModelConfig,
    ModelParams,
    TokenSequence,
    Vocabulary,
    forward_logits,
    forward_logprobs,
    generate,
    init_params,
    loss_and_grads,
    qa_sequence,
    sequence_logprob,
    tokenize,
)
from .report import FilterConfig, emit_series, emit_tables, outlier_filter

__version__ = "0.1.0"
