"""Collect submodule input features from the base model and apply groups.

The base model runs once per sampled sequence; every group's input is read
off that single trace (base-input discipline: fine-tuned and interpolated
groups are always evaluated on the base model's features, never on their
own forward pass). Group outputs are recomputed through the same code path
used for base outputs, so identical parameters reproduce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .archive import TensorArchive, shape_compatible
from .decompose import DecompositionPlan, SubmoduleGroup
from .errors import CompatError, InputError, SampleError
from .model import BoundModel, ModelConfig, causal_attention, forward_pass, rms_norm, rope_rotate, swiglu


@dataclass
class FeatureStore:
    """Per (group id, task): input matrices and base outputs, one per sequence."""

    plan: DecompositionPlan
    config: ModelConfig
    n_tasks: int
    inputs: dict[tuple[str, int], list[np.ndarray]] = field(default_factory=dict)
    base_outputs: dict[tuple[str, int], list[np.ndarray]] = field(default_factory=dict)
    sampled: dict[int, list[int]] = field(default_factory=dict)

    def rows(self, group_id: str, task: int) -> int:
        return sum(arr.shape[0] for arr in self.inputs[(group_id, task)])

    def stacked_base(self, group_id: str, task: int) -> np.ndarray:
        return np.concatenate(self.base_outputs[(group_id, task)], axis=0)


@dataclass
class DeltaStore:
    """Output deltas per (group id, data task, model index), token rows stacked."""

    plan: DecompositionPlan
    n_tasks: int
    n_models: int
    deltas: dict[tuple[str, int, int], np.ndarray] = field(default_factory=dict)

    def get(self, group_id: str, data_task: int, model: int) -> np.ndarray:
        return self.deltas[(group_id, data_task, model)]

    def grouped(self, group_id: str) -> list[np.ndarray]:
        """Per data task, an array [n_models, rows, width]."""
        return [
            np.stack([self.get(group_id, a, t) for t in range(self.n_models)])
            for a in range(self.n_tasks)
        ]

    def pooled(self, group_id: str) -> list[np.ndarray]:
        """Per model, rows pooled across all data tasks."""
        return [
            np.concatenate([self.get(group_id, a, t) for a in range(self.n_tasks)])
            for t in range(self.n_models)
        ]


def _expect_width(group: SubmoduleGroup, inputs: Sequence[np.ndarray], width: int) -> None:
    for arr in inputs:
        if arr.ndim != 2 or arr.shape[1] != width:
            raise InputError(
                f"group {group.id!r} expects [seq x {width}] inputs, got {arr.shape}"
            )


def _to64(params: Mapping[str, np.ndarray], name: str) -> np.ndarray:
    return np.asarray(params[name], dtype=np.float64)


def _attn_branch(
    x: np.ndarray, params: Mapping[str, np.ndarray], layer: int, config: ModelConfig
) -> np.ndarray:
    pre = f"layers.{layer}"
    seq = x.shape[0]
    normed = rms_norm(x, _to64(params, f"{pre}.norm1"), config.norm_eps)
    q = rope_rotate(
        (normed @ _to64(params, f"{pre}.attn.q_proj").T).reshape(seq, config.n_heads, config.head_dim),
        config.rope_theta,
    )
    k = rope_rotate(
        (normed @ _to64(params, f"{pre}.attn.k_proj").T).reshape(seq, config.n_heads, config.head_dim),
        config.rope_theta,
    )
    v = (normed @ _to64(params, f"{pre}.attn.v_proj").T).reshape(seq, config.n_heads, config.head_dim)
    concat = causal_attention(q, k, v).reshape(seq, config.d_model)
    return concat @ _to64(params, f"{pre}.attn.o_proj").T


def _head_branch(
    x: np.ndarray,
    params: Mapping[str, np.ndarray],
    layer: int,
    head: int,
    config: ModelConfig,
) -> np.ndarray:
    pre = f"layers.{layer}"
    seq = x.shape[0]
    lo, hi = head * config.head_dim, (head + 1) * config.head_dim
    normed = rms_norm(x, _to64(params, f"{pre}.norm1"), config.norm_eps)
    q = rope_rotate(
        (normed @ _to64(params, f"{pre}.attn.q_proj")[lo:hi].T).reshape(seq, 1, config.head_dim),
        config.rope_theta,
    )
    k = rope_rotate(
        (normed @ _to64(params, f"{pre}.attn.k_proj")[lo:hi].T).reshape(seq, 1, config.head_dim),
        config.rope_theta,
    )
    v = (normed @ _to64(params, f"{pre}.attn.v_proj")[lo:hi].T).reshape(seq, 1, config.head_dim)
    ctx = causal_attention(q, k, v).reshape(seq, config.head_dim)
    return ctx @ _to64(params, f"{pre}.attn.o_proj")[:, lo:hi].T


def _mlp_branch(
    x: np.ndarray, params: Mapping[str, np.ndarray], layer: int, config: ModelConfig
) -> np.ndarray:
    pre = f"layers.{layer}"
    normed = rms_norm(x, _to64(params, f"{pre}.norm2"), config.norm_eps)
    return swiglu(
        normed,
        _to64(params, f"{pre}.mlp.gate_proj"),
        _to64(params, f"{pre}.mlp.up_proj"),
        _to64(params, f"{pre}.mlp.down_proj"),
    )


def apply_group(
    group: SubmoduleGroup,
    params: Mapping[str, np.ndarray],
    inputs: Sequence[np.ndarray],
    config: ModelConfig,
) -> list[np.ndarray]:
    """Evaluate one group's function on stored inputs; returns f32 matrices."""
    kind = group.output_kind
    outputs: list[np.ndarray] = []
    if kind in ("layer_out", "attn_branch", "mlp_branch", "head_branch"):
        _expect_width(group, inputs, config.d_model)
    for arr in inputs:
        if kind == "model_logits":
            out = forward_pass(config, params, np.asarray(arr, dtype=np.int64))["logits"]
        elif kind == "embed_rows":
            out = _to64(params, "embed")[np.asarray(arr, dtype=np.int64)]
        elif kind == "logits":
            if arr.ndim != 2 or arr.shape[1] != config.d_model:
                raise InputError(f"group {group.id!r} expects [seq x d_model] inputs")
            hidden = rms_norm(
                np.asarray(arr, dtype=np.float64), _to64(params, "norm_final"), config.norm_eps
            )
            out = hidden @ _to64(params, "lm_head").T
        elif kind == "layer_out":
            x = np.asarray(arr, dtype=np.float64)
            a = x + _attn_branch(x, params, group.layer, config)
            out = a + _mlp_branch(a, params, group.layer, config)
        elif kind == "attn_branch":
            out = _attn_branch(np.asarray(arr, dtype=np.float64), params, group.layer, config)
        elif kind == "mlp_branch":
            out = _mlp_branch(np.asarray(arr, dtype=np.float64), params, group.layer, config)
        elif kind == "head_branch":
            out = _head_branch(
                np.asarray(arr, dtype=np.float64), params, group.layer, group.head_index, config
            )
        else:
            raise InputError(f"unknown output kind {kind!r}")
        outputs.append(np.asarray(out, dtype=np.float32))
    return outputs


def group_parameters(
    group: SubmoduleGroup,
    base: Mapping[str, np.ndarray],
    source: Mapping[str, np.ndarray] | None = None,
    taus: Sequence[Mapping[str, np.ndarray]] = (),
    coeffs: Sequence[float] = (),
) -> dict[str, np.ndarray]:
    """Parameters for evaluating a group, varying only its owned slices.

    Either copy the owned slices from `source` (exact), or set them to
    base + sum_t coeffs[t] * taus[t] accumulated in float64. Parameters the
    function reads but does not own stay at the base values.
    """
    if source is not None and len(taus):
        raise ValueError("pass either source or taus, not both")
    if len(taus) != len(coeffs):
        raise ValueError("taus and coeffs must have equal length")
    out: dict[str, np.ndarray] = {
        name: np.array(base[name], dtype=np.float64) for name in group.function_param_names()
    }
    for name, spec in group.params.items():
        idx = spec.as_index()
        if source is not None:
            out[name][idx] = np.asarray(source[name], dtype=np.float64)[idx]
        else:
            for coeff, tau in zip(coeffs, taus):
                out[name][idx] += float(coeff) * np.asarray(tau[name], dtype=np.float64)[idx]
    return out


def collect_base_features(
    base: BoundModel,
    datasets: Sequence[Sequence[Sequence[int]]],
    plan: DecompositionPlan,
    sample_n: int,
    seed: int = 0,
) -> FeatureStore:
    """Sample sequences per task, trace the base model, store group inputs."""
    store = FeatureStore(plan=plan, config=base.config, n_tasks=len(datasets))
    for task, dataset in enumerate(datasets):
        if len(dataset) < sample_n:
            raise SampleError(
                f"task {task} has {len(dataset)} sequences, need {sample_n}"
            )
        rng = np.random.default_rng([seed, task])
        picked = sorted(rng.choice(len(dataset), size=sample_n, replace=False).tolist())
        store.sampled[task] = picked
        for gid in plan.group_ids():
            store.inputs[(gid, task)] = []
        for index in picked:
            tokens = np.asarray(dataset[index], dtype=np.int64)
            trace = forward_pass(base.config, base.weights, tokens)
            for group in plan.groups:
                if group.input_tap == "tokens":
                    value: np.ndarray = tokens.copy()
                else:
                    value = np.asarray(trace[group.input_tap], dtype=np.float32)
                store.inputs[(group.id, task)].append(value)
        for group in plan.groups:
            store.base_outputs[(group.id, task)] = apply_group(
                group, base.weights, store.inputs[(group.id, task)], base.config
            )
    return store


def compute_delta_outputs(
    store: FeatureStore,
    base: TensorArchive,
    fine_tuned: Sequence[TensorArchive],
    plan: DecompositionPlan,
) -> DeltaStore:
    """Delta of every group's output when its parameters come from each model."""
    for t, archive in enumerate(fine_tuned):
        if not shape_compatible(archive, base):
            raise CompatError(f"fine-tuned archive {t} is not shape-compatible with the base")
    deltas = DeltaStore(plan=plan, n_tasks=store.n_tasks, n_models=len(fine_tuned))
    for group in plan.groups:
        for task in range(store.n_tasks):
            base_rows = store.stacked_base(group.id, task)
            inputs = store.inputs[(group.id, task)]
            for t, archive in enumerate(fine_tuned):
                params = group_parameters(group, base.tensors, source=archive.tensors)
                rows = np.concatenate(apply_group(group, params, inputs, store.config))
                deltas.deltas[(group.id, task, t)] = rows - base_rows
    return deltas


def interpolated_outputs(
    store: FeatureStore,
    base: TensorArchive,
    tau: TensorArchive,
    group: SubmoduleGroup,
    coeffs: Sequence[float],
    task: int = 0,
) -> list[np.ndarray]:
    """Group outputs at base + c * tau for each c, rows stacked per coefficient."""
    inputs = store.inputs[(group.id, task)]
    outputs = []
    for coeff in coeffs:
        params = group_parameters(group, base.tensors, taus=[tau.tensors], coeffs=[coeff])
        outputs.append(np.concatenate(apply_group(group, params, inputs, store.config)))
    return outputs
