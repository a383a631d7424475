"""Minimal decoder-only transformer with named activation taps.

Pre-norm residual blocks: RMSNorm, multi-head causal attention with rotary
position embeddings on q/k, and a SwiGLU MLP. No biases, no dropout.
Weights are stored as [out x in] matrices applied as y = W @ x; checkpoint
values are f32 and upcast to float64 for the actual arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp, softmax

from .archive import TensorArchive
from .errors import BindError, InputError

_MATRIX_PARAMS = ("attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    vocab_size: int
    max_seq: int = 128
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        for field in ("d_model", "n_heads", "n_layers", "d_ff", "vocab_size", "max_seq"):
            if int(getattr(self, field)) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError("n_heads must divide d_model")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary pairing")
        if self.norm_eps <= 0 or self.rope_theta <= 0:
            raise ValueError("norm_eps and rope_theta must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Canonical parameter names and shapes, in forward-pass order."""
        shapes: dict[str, tuple[int, ...]] = {"embed": (self.vocab_size, self.d_model)}
        for i in range(self.n_layers):
            pre = f"layers.{i}"
            shapes[f"{pre}.norm1"] = (self.d_model,)
            for proj in _MATRIX_PARAMS:
                shapes[f"{pre}.{proj}"] = (self.d_model, self.d_model)
            shapes[f"{pre}.norm2"] = (self.d_model,)
            shapes[f"{pre}.mlp.gate_proj"] = (self.d_ff, self.d_model)
            shapes[f"{pre}.mlp.up_proj"] = (self.d_ff, self.d_model)
            shapes[f"{pre}.mlp.down_proj"] = (self.d_model, self.d_ff)
        shapes["norm_final"] = (self.d_model,)
        shapes["lm_head"] = (self.vocab_size, self.d_model)
        return shapes

    def tap_names(self) -> tuple[str, ...]:
        per_layer = (
            "layer_in", "attn_in", "attn_out", "oproj_in",
            "mlp_in", "dproj_in", "mlp_out", "layer_out",
        )
        names = [f"{kind}.{i}" for i in range(self.n_layers) for kind in per_layer]
        return tuple(names) + ("final_hidden", "logits")

    def to_json(self) -> str:
        return json.dumps(
            {
                "d_model": self.d_model,
                "n_heads": self.n_heads,
                "n_layers": self.n_layers,
                "d_ff": self.d_ff,
                "vocab_size": self.vocab_size,
                "max_seq": self.max_seq,
                "norm_eps": self.norm_eps,
                "rope_theta": self.rope_theta,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class ForwardTrace:
    logits: np.ndarray
    taps: dict[str, np.ndarray]


@dataclass(frozen=True)
class BoundModel:
    config: ModelConfig
    weights: Mapping[str, np.ndarray]

    def forward(self, tokens: Sequence[int], taps: Iterable[str] | None = None) -> ForwardTrace:
        return forward_with_taps(self, tokens, taps)


def bind_weights(archive: TensorArchive, config: ModelConfig) -> BoundModel:
    """Validate names and shapes, upcast to float64, freeze."""
    expected = config.param_shapes()
    missing = sorted(set(expected) - set(archive.tensors))
    if missing:
        raise BindError(f"missing tensor {missing[0]!r}")
    unknown = sorted(set(archive.tensors) - set(expected))
    if unknown:
        raise BindError(f"unexpected tensor {unknown[0]!r}")
    weights: dict[str, np.ndarray] = {}
    for name, shape in expected.items():
        arr = archive.tensors[name]
        if arr.shape != shape:
            raise BindError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
        weights[name] = np.ascontiguousarray(arr, dtype=np.float64)
    return BoundModel(config=config, weights=weights)


def rms_norm(x: np.ndarray, weight: np.ndarray, eps: float) -> np.ndarray:
    scale = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + eps)
    return x / scale * weight


def rope_rotate(x: np.ndarray, theta: float) -> np.ndarray:
    """Rotary embedding over interleaved pairs; x is [seq, heads, head_dim]."""
    seq, _, head_dim = x.shape
    half = head_dim // 2
    inv_freq = theta ** (-2.0 * np.arange(half) / head_dim)
    angles = np.arange(seq)[:, None] * inv_freq[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """q/k/v are [seq, heads, head_dim]; returns the same layout."""
    seq, _, head_dim = q.shape
    scores = np.einsum("ihd,jhd->hij", q, k) / np.sqrt(head_dim)
    mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    scores = np.where(mask[None, :, :], -np.inf, scores)
    probs = softmax(scores, axis=-1)
    return np.einsum("hij,jhd->ihd", probs, v)


def swiglu(x: np.ndarray, gate: np.ndarray, up: np.ndarray, down: np.ndarray) -> np.ndarray:
    pre = x @ gate.T
    return (pre * expit(pre) * (x @ up.T)) @ down.T


def forward_pass(
    config: ModelConfig, weights: Mapping[str, np.ndarray], tokens: np.ndarray
) -> dict[str, np.ndarray]:
    """Full forward computing every tap; weights may be any float dtype."""
    heads, head_dim = config.n_heads, config.head_dim
    seq = len(tokens)
    taps: dict[str, np.ndarray] = {}
    x = np.asarray(weights["embed"], dtype=np.float64)[tokens]
    for i in range(config.n_layers):
        pre = f"layers.{i}"
        taps[f"layer_in.{i}"] = x
        taps[f"attn_in.{i}"] = x
        normed = rms_norm(x, weights[f"{pre}.norm1"], config.norm_eps)
        q = rope_rotate((normed @ weights[f"{pre}.attn.q_proj"].T).reshape(seq, heads, head_dim), config.rope_theta)
        k = rope_rotate((normed @ weights[f"{pre}.attn.k_proj"].T).reshape(seq, heads, head_dim), config.rope_theta)
        v = (normed @ weights[f"{pre}.attn.v_proj"].T).reshape(seq, heads, head_dim)
        concat = causal_attention(q, k, v).reshape(seq, config.d_model)
        taps[f"oproj_in.{i}"] = concat
        attn_out = concat @ weights[f"{pre}.attn.o_proj"].T
        taps[f"attn_out.{i}"] = attn_out
        x = x + attn_out
        taps[f"mlp_in.{i}"] = x
        normed2 = rms_norm(x, weights[f"{pre}.norm2"], config.norm_eps)
        gate_pre = normed2 @ weights[f"{pre}.mlp.gate_proj"].T
        hidden = gate_pre * expit(gate_pre) * (normed2 @ weights[f"{pre}.mlp.up_proj"].T)
        taps[f"dproj_in.{i}"] = hidden
        mlp_out = hidden @ weights[f"{pre}.mlp.down_proj"].T
        taps[f"mlp_out.{i}"] = mlp_out
        x = x + mlp_out
        taps[f"layer_out.{i}"] = x
    final_hidden = rms_norm(x, weights["norm_final"], config.norm_eps)
    taps["final_hidden"] = final_hidden
    taps["logits"] = final_hidden @ np.asarray(weights["lm_head"], dtype=np.float64).T
    return taps


def _validated_tokens(config: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1 or arr.size < 1:
        raise InputError("tokens must be a non-empty 1-D sequence")
    if arr.size > config.max_seq:
        raise InputError(f"sequence length {arr.size} exceeds max_seq {config.max_seq}")
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise InputError("token id out of range")
    return arr


def forward_with_taps(
    model: BoundModel, tokens: Sequence[int], taps: Iterable[str] | None = None
) -> ForwardTrace:
    arr = _validated_tokens(model.config, tokens)
    wanted = set(model.config.tap_names()) if taps is None else set(taps)
    invalid = wanted - set(model.config.tap_names())
    if invalid:
        raise InputError(f"unknown tap id {sorted(invalid)[0]!r}")
    everything = forward_pass(model.config, model.weights, arr)
    return ForwardTrace(
        logits=everything["logits"],
        taps={name: everything[name] for name in sorted(wanted)},
    )


def eval_cross_entropy(model: BoundModel, dataset: Sequence[Sequence[int]]) -> float:
    """Mean next-token cross-entropy in nats, pooled over all positions."""
    if len(dataset) == 0:
        raise InputError("empty dataset")
    total = 0.0
    count = 0
    for seq in dataset:
        arr = _validated_tokens(model.config, seq)
        if arr.size < 2:
            raise InputError("sequences must have length >= 2 to score next tokens")
        logits = forward_pass(model.config, model.weights, arr)["logits"][:-1]
        targets = arr[1:]
        total += float(np.sum(logsumexp(logits, axis=1) - logits[np.arange(len(targets)), targets]))
        count += len(targets)
    return total / count
