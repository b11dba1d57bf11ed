"""Character-level decoder-only language model with hand-written backprop.

Pre-LayerNorm transformer blocks, learned absolute positions, GELU MLP and an
untied unembedding.  Linear weights are stored ``(d_out, d_in)`` so that a
LoRA update ``B @ A`` adds to them directly.  All arithmetic is float64.

Parameters are immutable values: every array is flagged read-only and
training code builds new :class:`ModelParams` instead of mutating.
"""
from __future__ import annotations

import math
import string
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels as K
from .errors import (
    CapacityError,
    DegenerateInputError,
    NumericalFailureError,
    UnknownCharacterError,
)

PAD_SYMBOL = "\x00"
EOA_SYMBOL = "\x04"
DEFAULT_ALPHABET = " .?" + string.ascii_lowercase

_GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------
# vocabulary and token sequences
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    """Ordered character alphabet; ids 0/1 are pad and end-of-answer by default."""

    symbols: tuple[str, ...]
    pad_id: int = 0
    eoa_id: int = 1
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(symbols) < 4:
            raise ValueError(f"vocabulary needs at least 4 symbols, got {len(symbols)}")
        if any(len(s) != 1 for s in symbols):
            raise ValueError("every vocabulary symbol must be a single character")
        if len(set(symbols)) != len(symbols):
            raise ValueError("vocabulary symbols must be unique")
        V = len(symbols)
        if not (0 <= self.pad_id < V and 0 <= self.eoa_id < V) or self.pad_id == self.eoa_id:
            raise ValueError("reserved ids must be distinct and inside the vocabulary")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(symbols)})

    @classmethod
    def default(cls, alphabet: str = DEFAULT_ALPHABET) -> "Vocabulary":
        return cls((PAD_SYMBOL, EOA_SYMBOL) + tuple(alphabet))

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id_of(self, char: str) -> int:
        return self._index[char]

    def to_json(self) -> dict:
        return {"symbols": "".join(self.symbols), "pad_id": self.pad_id, "eoa_id": self.eoa_id}

    @classmethod
    def from_json(cls, obj: Mapping) -> "Vocabulary":
        return cls(tuple(obj["symbols"]), obj.get("pad_id", 0), obj.get("eoa_id", 1))


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with a split point: ``ids[:prompt_len]`` is the prompt."""

    ids: tuple[int, ...]
    prompt_len: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not 0 <= self.prompt_len <= len(self.ids):
            raise ValueError(f"prompt_len {self.prompt_len} outside [0, {len(self.ids)}]")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def continuation(self) -> tuple[int, ...]:
        return self.ids[self.prompt_len:]

    def extend(self, ids: Iterable[int]) -> "TokenSequence":
        return TokenSequence(self.ids + tuple(ids), self.prompt_len)

    def as_prompt(self) -> "TokenSequence":
        return TokenSequence(self.ids, len(self.ids))


def tokenize(text: str, vocab: Vocabulary, prompt_len: int | None = None) -> TokenSequence:
    try:
        ids = tuple(vocab.id_of(c) for c in text)
    except KeyError as exc:
        raise UnknownCharacterError(exc.args[0], text) from None
    return TokenSequence(ids, len(ids) if prompt_len is None else prompt_len)


def detokenize(seq: TokenSequence | Sequence[int], vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return "".join(vocab.symbols[i] for i in ids)


def qa_sequence(prompt: str, answer: str, vocab: Vocabulary) -> TokenSequence:
    """``prompt`` as context, ``answer`` + end-of-answer as the continuation."""
    p = tokenize(prompt, vocab)
    a = tokenize(answer, vocab)
    return TokenSequence(p.ids + a.ids + (vocab.eoa_id,), len(p))


def text_sequence(text: str, vocab: Vocabulary) -> TokenSequence:
    """Plain LM sequence; the first character is the only context."""
    seq = tokenize(text, vocab)
    return TokenSequence(seq.ids + (vocab.eoa_id,), 1)


# --------------------------------------------------------------------------
# configuration and parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 64
    d_ff: int = 0
    pos_encoding: str = "learned"

    def __post_init__(self):
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "context_len", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.pos_encoding != "learned":
            raise ValueError("only learned absolute positions are supported")

    def to_json(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "d_model": self.d_model,
            "n_layers": self.n_layers, "n_heads": self.n_heads,
            "context_len": self.context_len, "d_ff": self.d_ff,
            "pos_encoding": self.pos_encoding,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ModelConfig":
        return cls(**obj)


ATTN_PROJECTIONS = ("q", "k", "v", "o")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d, V, F = cfg.d_model, cfg.vocab_size, cfg.d_ff
    shapes = {"tok_emb": (V, d), "pos_emb": (cfg.context_len, d)}
    for l in range(cfg.n_layers):
        p = f"l{l}."
        shapes[p + "ln1.g"] = (1, d)
        shapes[p + "ln1.b"] = (1, d)
        for proj in ATTN_PROJECTIONS:
            shapes[f"{p}attn.{proj}.w"] = (d, d)
            shapes[f"{p}attn.{proj}.b"] = (1, d)
        shapes[p + "ln2.g"] = (1, d)
        shapes[p + "ln2.b"] = (1, d)
        shapes[p + "mlp.fc.w"] = (F, d)
        shapes[p + "mlp.fc.b"] = (1, F)
        shapes[p + "mlp.proj.w"] = (d, F)
        shapes[p + "mlp.proj.b"] = (1, d)
    shapes["lnf.g"] = (1, d)
    shapes["lnf.b"] = (1, d)
    shapes["unembed.w"] = (V, d)
    shapes["unembed.b"] = (1, V)
    return shapes


def attention_weight_names(cfg: ModelConfig) -> list[str]:
    return [f"l{l}.attn.{p}.w" for l in range(cfg.n_layers) for p in ATTN_PROJECTIONS]


@dataclass(frozen=True)
class LoraAttachment:
    """A low-rank term ``multiplier * B @ A`` evaluated in factored form."""

    layer: str
    A: np.ndarray
    B: np.ndarray
    multiplier: float

    def delta(self) -> np.ndarray:
        return self.multiplier * (self.B @ self.A)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True, order="C")
    a.flags.writeable = False
    return a


class ModelParams:
    """Immutable weights, optionally carrying unmerged LoRA attachments."""

    __slots__ = ("config", "arrays", "lora", "_lora_by_layer")

    def __init__(self, config: ModelConfig, arrays: Mapping[str, np.ndarray],
                 lora: Sequence[LoraAttachment] = (), *, check: bool = True):
        shapes = param_shapes(config)
        if check:
            if set(arrays) != set(shapes):
                missing = set(shapes) - set(arrays)
                extra = set(arrays) - set(shapes)
                raise ValueError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
            for name, shape in shapes.items():
                a = arrays[name]
                if tuple(a.shape) != shape:
                    raise ValueError(f"{name}: shape {a.shape} != {shape}")
                if not np.all(np.isfinite(a)):
                    raise NumericalFailureError("non-finite parameter values", name)
        frozen = {}
        for name in shapes:
            a = arrays[name]
            frozen[name] = a if (isinstance(a, np.ndarray) and not a.flags.writeable
                                 and a.dtype == np.float64) else _frozen(a)
        self.config = config
        self.arrays = frozen
        self.lora = tuple(lora)
        by_layer: dict[str, list[LoraAttachment]] = {}
        for att in self.lora:
            if att.layer not in shapes:
                raise ValueError(f"LoRA attachment on unknown layer {att.layer!r}")
            by_layer.setdefault(att.layer, []).append(att)
        self._lora_by_layer = by_layer

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __reduce__(self):
        return (_rebuild_params, (self.config, dict(self.arrays), self.lora))

    def effective_arrays(self) -> dict[str, np.ndarray]:
        """Weights with every attachment folded in (a fresh dict)."""
        out = dict(self.arrays)
        for att in self.lora:
            out[att.layer] = out[att.layer] + att.delta()
        return out

    def materialize(self) -> "ModelParams":
        if not self.lora:
            return self
        return ModelParams(self.config, self.effective_arrays())

    def replace(self, **updates: np.ndarray) -> "ModelParams":
        arrays = dict(self.arrays)
        arrays.update(updates)
        return ModelParams(self.config, arrays, self.lora)

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of configs and arrays (attachments included)."""
        if self.config != other.config or len(self.lora) != len(other.lora):
            return False
        if not all(np.array_equal(self.arrays[n], other.arrays[n]) for n in self.arrays):
            return False
        return all(a.layer == b.layer and a.multiplier == b.multiplier
                   and np.array_equal(a.A, b.A) and np.array_equal(a.B, b.B)
                   for a, b in zip(self.lora, other.lora))

    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())


def _rebuild_params(config, arrays, lora):
    return ModelParams(config, arrays, lora, check=False)


def init_params(config: ModelConfig, seed: int = 0, std: float = 0.08) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arrays[name] = np.ones(shape)
        elif name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, std, size=shape)
    return ModelParams(config, arrays)


def zero_params(config: ModelConfig) -> ModelParams:
    return ModelParams(config, {n: np.zeros(s) for n, s in param_shapes(config).items()})


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def _gelu_grad(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _linear(params: ModelParams, name: str, h: np.ndarray) -> np.ndarray:
    a = params.arrays
    y = h @ a[name + ".w"].T + a[name + ".b"]
    for att in params._lora_by_layer.get(name + ".w", ()):
        y = y + att.multiplier * ((h @ att.A.T) @ att.B.T)
    return y


def _split_heads(x: np.ndarray, H: int) -> np.ndarray:
    T, d = x.shape
    return np.ascontiguousarray(x.reshape(T, H, d // H).transpose(1, 0, 2))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    H, T, dh = x.shape
    return np.ascontiguousarray(x.transpose(1, 0, 2).reshape(T, H * dh))


def _check_ids(params: ModelParams, ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    C = params.config.context_len
    if ids.ndim != 1 or ids.size == 0:
        raise DegenerateInputError("forward pass needs a nonempty 1-D id sequence")
    if ids.size > C:
        raise CapacityError(f"context length {ids.size} exceeds model capacity {C}")
    if ids.min() < 0 or ids.max() >= params.config.vocab_size:
        raise ValueError("token id outside the vocabulary")
    return ids


def _forward(params: ModelParams, ids: np.ndarray, keep: bool = False):
    cfg = params.config
    a = params.arrays
    T = ids.size
    x = a["tok_emb"][ids] + a["pos_emb"][:T]
    cache = {"ids": ids, "layers": []} if keep else None
    for l in range(cfg.n_layers):
        p = f"l{l}."
        h1, xh1, rs1 = K.layernorm_forward(x, a[p + "ln1.g"], a[p + "ln1.b"])
        q = _split_heads(_linear(params, p + "attn.q", h1), cfg.n_heads)
        k = _split_heads(_linear(params, p + "attn.k", h1), cfg.n_heads)
        v = _split_heads(_linear(params, p + "attn.v", h1), cfg.n_heads)
        att, probs = K.attention_forward(q, k, v)
        att_cat = _merge_heads(att)
        x_mid = x + _linear(params, p + "attn.o", att_cat)
        h2, xh2, rs2 = K.layernorm_forward(x_mid, a[p + "ln2.g"], a[p + "ln2.b"])
        pre = _linear(params, p + "mlp.fc", h2)
        act = _gelu(pre)
        x_out = x_mid + _linear(params, p + "mlp.proj", act)
        if keep:
            cache["layers"].append(dict(h1=h1, xh1=xh1, rs1=rs1, q=q, k=k, v=v, probs=probs,
                                        att_cat=att_cat, h2=h2, xh2=xh2, rs2=rs2,
                                        pre=pre, act=act))
        x = x_out
    hf, xhf, rsf = K.layernorm_forward(x, a["lnf.g"], a["lnf.b"])
    logits = hf @ a["unembed.w"].T + a["unembed.b"]
    if keep:
        cache.update(hf=hf, xhf=xhf, rsf=rsf)
    return logits, cache


def _backward(params: ModelParams, cache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    a = params.arrays
    g: dict[str, np.ndarray] = {}
    g["unembed.w"] = dlogits.T @ cache["hf"]
    g["unembed.b"] = dlogits.sum(axis=0, keepdims=True)
    dhf = dlogits @ a["unembed.w"]
    dx, g["lnf.g"], g["lnf.b"] = K.layernorm_backward(dhf, cache["xhf"], cache["rsf"], a["lnf.g"])
    for l in reversed(range(cfg.n_layers)):
        p = f"l{l}."
        c = cache["layers"][l]
        # MLP branch
        g[p + "mlp.proj.w"] = dx.T @ c["act"]
        g[p + "mlp.proj.b"] = dx.sum(axis=0, keepdims=True)
        dpre = (dx @ a[p + "mlp.proj.w"]) * _gelu_grad(c["pre"])
        g[p + "mlp.fc.w"] = dpre.T @ c["h2"]
        g[p + "mlp.fc.b"] = dpre.sum(axis=0, keepdims=True)
        dh2 = dpre @ a[p + "mlp.fc.w"]
        dln2, g[p + "ln2.g"], g[p + "ln2.b"] = K.layernorm_backward(dh2, c["xh2"], c["rs2"], a[p + "ln2.g"])
        dx_mid = dx + dln2
        # attention branch
        g[p + "attn.o.w"] = dx_mid.T @ c["att_cat"]
        g[p + "attn.o.b"] = dx_mid.sum(axis=0, keepdims=True)
        datt = _split_heads(dx_mid @ a[p + "attn.o.w"], cfg.n_heads)
        dq, dk, dv = K.attention_backward(c["q"], c["k"], c["v"], c["probs"], datt)
        dh1 = np.zeros_like(c["h1"])
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dcat = _merge_heads(dproj)
            g[f"{p}attn.{name}.w"] = dcat.T @ c["h1"]
            g[f"{p}attn.{name}.b"] = dcat.sum(axis=0, keepdims=True)
            dh1 += dcat @ a[f"{p}attn.{name}.w"]
        dln1, g[p + "ln1.g"], g[p + "ln1.b"] = K.layernorm_backward(dh1, c["xh1"], c["rs1"], a[p + "ln1.g"])
        dx = dx_mid + dln1
    ids = cache["ids"]
    dtok = np.zeros_like(a["tok_emb"])
    np.add.at(dtok, ids, dx)
    g["tok_emb"] = dtok
    dpos = np.zeros_like(a["pos_emb"])
    dpos[: ids.size] = dx
    g["pos_emb"] = dpos
    return g


# --------------------------------------------------------------------------
# public model operations
# --------------------------------------------------------------------------

def forward_logits(params: ModelParams, context: TokenSequence | Sequence[int]) -> np.ndarray:
    ids = context.ids if isinstance(context, TokenSequence) else context
    return _forward(params, _check_ids(params, ids))[0]


def forward_logprobs(params: ModelParams, context: TokenSequence | Sequence[int]) -> np.ndarray:
    """Row ``t`` is log p(next token | ids[:t+1]); shape (len(context), V)."""
    return K.log_softmax(forward_logits(params, context))


def next_token_logprobs(params: ModelParams, ids: Sequence[int]) -> np.ndarray:
    return forward_logprobs(params, ids)[-1]


def sequence_logprob(params: ModelParams, seq: TokenSequence) -> tuple[float, int]:
    """Total natural-log probability of ``seq.continuation`` and its length."""
    T = len(seq) - seq.prompt_len
    if T < 1:
        raise DegenerateInputError("sequence has an empty continuation")
    if seq.prompt_len < 1:
        raise DegenerateInputError("sequence needs at least one context token")
    lp = forward_logprobs(params, seq.ids[:-1])
    targets = np.asarray(seq.ids[seq.prompt_len:])
    rows = np.arange(seq.prompt_len - 1, len(seq) - 1)
    return float(lp[rows, targets].sum()), T


def token_logprobs(params: ModelParams, seq: TokenSequence) -> np.ndarray:
    """Per-token log-probabilities of the continuation, in order."""
    if len(seq) - seq.prompt_len < 1 or seq.prompt_len < 1:
        raise DegenerateInputError("sequence needs context and a nonempty continuation")
    lp = forward_logprobs(params, seq.ids[:-1])
    rows = np.arange(seq.prompt_len - 1, len(seq) - 1)
    return lp[rows, np.asarray(seq.ids[seq.prompt_len:])]


def sample_from_logprobs(logprobs: np.ndarray, rng: np.random.Generator, temperature: float = 1.0) -> int:
    z = logprobs / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, p.size - 1)


def generate(params: ModelParams, prompt: TokenSequence, max_tokens: int = 32,
             mode: str = "greedy", temperature: float = 1.0, seed: int | None = None,
             *, eoa_id: int = 1, rng: np.random.Generator | None = None) -> TokenSequence:
    """Extend ``prompt`` until end-of-answer, ``max_tokens`` or a full context.

    The end-of-answer token, when produced, is kept in the output.  ``mode`` is
    ``"greedy"`` (argmax, lowest id wins ties) or ``"sample"``.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decoding mode {mode!r}")
    C = params.config.context_len
    if len(prompt) > C:
        raise CapacityError(f"prompt length {len(prompt)} exceeds model capacity {C}")
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(seed)
    ids = list(prompt.ids)
    for _ in range(max_tokens):
        if len(ids) >= C:
            break
        lp = next_token_logprobs(params, ids)
        tok = int(np.argmax(lp)) if mode == "greedy" else sample_from_logprobs(lp, rng, temperature)
        ids.append(tok)
        if tok == eoa_id:
            break
    return TokenSequence(tuple(ids), len(prompt))


def _first_nonfinite(arrays: Mapping[str, np.ndarray]) -> str | None:
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            return name
    return None


def loss_and_grads(params: ModelParams, batch: Sequence[TokenSequence],
                   trainable: Iterable[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over all continuation tokens of ``batch`` and its gradient.

    Only names in ``trainable`` get gradient entries (``None`` means all).
    Attached LoRA terms are folded in first; gradients are with respect to
    the effective weights.
    """
    if not batch:
        raise DegenerateInputError("loss_and_grads needs a nonempty batch")
    params = params.materialize()
    names = list(params.arrays) if trainable is None else list(trainable)
    unknown = set(names) - set(params.arrays)
    if unknown:
        raise KeyError(f"unknown trainable parameters: {sorted(unknown)}")
    n_tokens = sum(len(s) - s.prompt_len for s in batch)
    for s in batch:
        if s.prompt_len < 1 or len(s) - s.prompt_len < 1:
            raise DegenerateInputError("training sequences need context and a continuation")
    total = 0.0
    grads = {n: np.zeros_like(params.arrays[n]) for n in names}
    for s in batch:
        ids = _check_ids(params, s.ids[:-1])
        logits, cache = _forward(params, ids, keep=True)
        lp = K.log_softmax(logits)
        rows = np.arange(s.prompt_len - 1, len(s) - 1)
        targets = np.asarray(s.ids[s.prompt_len:])
        total -= lp[rows, targets].sum()
        dlogits = np.zeros_like(logits)
        dlogits[rows] = np.exp(lp[rows])
        dlogits[rows, targets] -= 1.0
        dlogits /= n_tokens
        g = _backward(params, cache, dlogits)
        for n in names:
            grads[n] += g[n]
    loss = total / n_tokens
    if not math.isfinite(loss):
        bad = _first_nonfinite(params.arrays) or _first_nonfinite(grads) or "unembed.w"
        raise NumericalFailureError(f"non-finite loss {loss}", bad)
    bad = _first_nonfinite(grads)
    if bad is not None:
        raise NumericalFailureError("non-finite gradient", bad)
    return float(loss), grads
