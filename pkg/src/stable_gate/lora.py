"""Low-rank adapters: init, scaled application, permanent merge, training."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import ConformanceError, NumericalFailureError, ShapeError, TrainingFailureError
from .model import (
    LoraAttachment,
    ModelConfig,
    ModelParams,
    TokenSequence,
    attention_weight_names,
    loss_and_grads,
    param_shapes,
)


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LoraAdapter:
    """Per-layer factors ``{layer: (A, B)}`` with ``A: r x d_in``, ``B: d_out x r``."""

    factors: Mapping[str, tuple[np.ndarray, np.ndarray]]
    rank: int
    lora_alpha: float
    train_losses: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.rank < 1:
            raise ShapeError("rank must be positive")
        if self.lora_alpha <= 0:
            raise ValueError("lora_alpha must be positive")
        frozen = {}
        for layer, (A, B) in self.factors.items():
            A, B = _ro(A), _ro(B)
            if A.shape[0] != self.rank or B.shape[1] != self.rank:
                raise ShapeError(f"{layer}: factors {A.shape}, {B.shape} do not have rank {self.rank}")
            if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
                raise NumericalFailureError("non-finite adapter factors", layer)
            frozen[layer] = (A, B)
        object.__setattr__(self, "factors", frozen)

    @property
    def multiplier(self) -> float:
        return self.lora_alpha / self.rank

    @property
    def target_layers(self) -> tuple[str, ...]:
        return tuple(self.factors)

    def with_factors(self, factors, train_losses=()) -> "LoraAdapter":
        return LoraAdapter(factors, self.rank, self.lora_alpha, tuple(train_losses))

    def equals(self, other: "LoraAdapter") -> bool:
        return (self.rank == other.rank and self.lora_alpha == other.lora_alpha
                and self.target_layers == other.target_layers
                and all(np.array_equal(self.factors[l][i], other.factors[l][i])
                        for l in self.factors for i in (0, 1)))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 1
    optimizer: str = "sgd"
    seed: int = 0
    shuffle: bool = True
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def init_adapter(config: ModelConfig, rank: int, lora_alpha: float, seed: int = 0,
                 targets: Sequence[str] | None = None, std: float = 0.02) -> LoraAdapter:
    """Gaussian ``A``, zero ``B``: the initial weight delta is exactly zero."""
    shapes = param_shapes(config)
    targets = list(targets) if targets is not None else attention_weight_names(config)
    rng = np.random.default_rng(seed)
    factors = {}
    for layer in targets:
        if layer not in shapes:
            raise ConformanceError(f"unknown target layer {layer!r}")
        d_out, d_in = shapes[layer]
        if rank > min(d_in, d_out):
            raise ShapeError(f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)} for {layer}")
        factors[layer] = (rng.normal(0.0, std, size=(rank, d_in)), np.zeros((d_out, rank)))
    return LoraAdapter(factors, rank, float(lora_alpha))


def _check_scale(scale: float) -> float:
    scale = float(scale)
    if not 0.0 <= scale <= 1.0:
        raise ValueError(f"scale {scale} outside [0, 1]")
    return scale


def delta_weight(adapter: LoraAdapter, scale: float = 1.0) -> dict[str, np.ndarray]:
    """``scale * (lora_alpha / r) * B @ A`` for every target layer."""
    scale = _check_scale(scale)
    return {layer: scale * (adapter.multiplier * (B @ A)) for layer, (A, B) in adapter.factors.items()}


def _check_conformance(params: ModelParams, adapter: LoraAdapter) -> None:
    for layer, (A, B) in adapter.factors.items():
        if layer not in params.arrays:
            raise ConformanceError(f"adapter layer {layer!r} not present in the host model")
        d_out, d_in = params.arrays[layer].shape
        if A.shape[1] != d_in or B.shape[0] != d_out:
            raise ConformanceError(f"{layer}: adapter shapes {A.shape}/{B.shape} do not fit host {(d_out, d_in)}")


def apply_scaled(params: ModelParams, adapter: LoraAdapter, scale: float = 1.0) -> ModelParams:
    """Host with the adapter attached in factored form; the host is not touched."""
    scale = _check_scale(scale)
    _check_conformance(params, adapter)
    mult = scale * adapter.multiplier
    extra = [LoraAttachment(layer, A, B, mult) for layer, (A, B) in adapter.factors.items()]
    return ModelParams(params.config, params.arrays, params.lora + tuple(extra), check=False)


def merge(params: ModelParams, adapter: LoraAdapter, scale: float = 1.0) -> ModelParams:
    """Fold ``delta_weight(adapter, scale)`` into a standalone checkpoint."""
    _check_conformance(params, adapter)
    arrays = params.effective_arrays()
    for layer, delta in delta_weight(adapter, scale).items():
        arrays[layer] = arrays[layer] + delta
    return ModelParams(params.config, arrays)


def dataset_loss(params: ModelParams, dataset: Sequence[TokenSequence]) -> float:
    return loss_and_grads(params, dataset, trainable=())[0]


def train_lora(params: ModelParams, adapter: LoraAdapter, dataset: Sequence[TokenSequence],
               cfg: TrainConfig) -> LoraAdapter:
    """Optimize only the adapter factors against the frozen host.

    The returned adapter carries ``train_losses``: the full-dataset loss before
    training followed by the loss after every epoch.
    """
    if not dataset:
        raise ValueError("train_lora needs a nonempty dataset")
    _check_conformance(params, adapter)
    rng = np.random.default_rng(cfg.seed)
    m = adapter.multiplier
    layers = adapter.target_layers
    A = {l: adapter.factors[l][0].copy() for l in layers}
    B = {l: adapter.factors[l][1].copy() for l in layers}
    state = {}
    if cfg.optimizer == "adam":
        for l in layers:
            state[l] = [np.zeros_like(A[l]), np.zeros_like(A[l]), np.zeros_like(B[l]), np.zeros_like(B[l])]
    b1, b2 = cfg.betas
    step = 0

    def current() -> LoraAdapter:
        return adapter.with_factors({l: (A[l], B[l]) for l in layers})

    def full_loss(epoch: int) -> float:
        try:
            return dataset_loss(apply_scaled(params, current(), 1.0), dataset)
        except NumericalFailureError as exc:
            raise TrainingFailureError(f"non-finite training loss: {exc}", epoch) from exc

    losses = [full_loss(0)]
    n = len(dataset)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            try:
                _, G = loss_and_grads(apply_scaled(params, current(), 1.0), batch, trainable=layers)
            except NumericalFailureError as exc:
                raise TrainingFailureError(f"non-finite training loss: {exc}", epoch) from exc
            step += 1
            for l in layers:
                gA = m * (B[l].T @ G[l])
                gB = m * (G[l] @ A[l].T)
                if cfg.optimizer == "sgd":
                    A[l] -= cfg.lr * gA
                    B[l] -= cfg.lr * gB
                else:
                    mA, vA, mB, vB = state[l]
                    mA[:] = b1 * mA + (1 - b1) * gA
                    vA[:] = b2 * vA + (1 - b2) * gA * gA
                    mB[:] = b1 * mB + (1 - b1) * gB
                    vB[:] = b2 * vB + (1 - b2) * gB * gB
                    c1 = 1 - b1 ** step
                    c2 = 1 - b2 ** step
                    A[l] -= cfg.lr * (mA / c1) / (np.sqrt(vA / c2) + 1e-8)
                    B[l] -= cfg.lr * (mB / c1) / (np.sqrt(vB / c2) + 1e-8)
        losses.append(full_loss(epoch))
    return adapter.with_factors({l: (A[l], B[l]) for l in layers}, losses)


# -- checkpoints -----------------------------------------------------------

def save_adapter(path: str | Path, adapter: LoraAdapter, scale_applied: float | None = None,
                 extra: Mapping[str, Any] | None = None) -> None:
    arrays = {}
    for layer, (A, B) in adapter.factors.items():
        arrays[layer + ".A"] = A
        arrays[layer + ".B"] = B
    meta = {
        "rank": adapter.rank,
        "lora_alpha": adapter.lora_alpha,
        "target_layers": list(adapter.target_layers),
        "scale_applied": scale_applied,
    }
    meta.update(extra or {})
    save_tensors(path, "adapter", {}, arrays, meta)


def load_adapter(path: str | Path) -> tuple[LoraAdapter, dict]:
    header, arrays = load_tensors(path, kind="adapter")
    meta = header["metadata"]
    factors = {l: (arrays[l + ".A"], arrays[l + ".B"]) for l in meta["target_layers"]}
    return LoraAdapter(factors, int(meta["rank"]), float(meta["lora_alpha"])), meta
