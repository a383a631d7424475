"""Map a model config and granularity level to submodule groups.

A plan partitions every parameter element into disjoint groups, each with
an input tap and an output definition. Granularities: the whole model, one
group per layer, separate attention/MLP branches, or per-head attention
slices (rows of q/k/v plus the matching o_proj columns).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

from .errors import PlanError
from .model import ModelConfig


class Granularity(enum.Enum):
    MODEL = "model"
    LAYER = "layer"
    ATTN_MLP = "attn_mlp"
    HEAD_MLP = "head_mlp"

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        try:
            return cls(text)
        except ValueError:
            options = ", ".join(g.value for g in cls)
            raise ValueError(f"unknown granularity {text!r} (expected one of: {options})") from None


@dataclass(frozen=True)
class SliceSpec:
    """Row/column ranges into a 2-D tensor; None means the full axis."""

    rows: tuple[int, int] | None = None
    cols: tuple[int, int] | None = None

    def as_index(self):
        row_part = slice(*self.rows) if self.rows else slice(None)
        col_part = slice(*self.cols) if self.cols else slice(None)
        if self.cols is None and self.rows is None:
            return Ellipsis
        if self.cols is None:
            return row_part
        return (row_part, col_part)

    def to_json_dict(self) -> dict:
        return {
            "rows": list(self.rows) if self.rows else None,
            "cols": list(self.cols) if self.cols else None,
        }


FULL = SliceSpec()


@dataclass(frozen=True)
class SubmoduleGroup:
    id: str
    input_tap: str
    output_kind: str
    params: Mapping[str, SliceSpec]
    layer: int | None = None
    head_index: int | None = None
    # Parameters the group's function reads but does not own (fixed at the
    # base model when the group is perturbed), e.g. norm1 for heads > 0.
    extra_params: tuple[str, ...] = ()

    @property
    def param_names(self) -> set[str]:
        return set(self.params)

    def function_param_names(self) -> tuple[str, ...]:
        return tuple(self.params) + self.extra_params

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "input_tap": self.input_tap,
            "output_kind": self.output_kind,
            "layer": self.layer,
            "head_index": self.head_index,
            "params": {name: spec.to_json_dict() for name, spec in self.params.items()},
        }


@dataclass(frozen=True)
class DecompositionPlan:
    granularity: Granularity
    config: ModelConfig
    groups: tuple[SubmoduleGroup, ...]
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_by_id", {g.id: g for g in self.groups})

    def group(self, group_id: str) -> SubmoduleGroup:
        try:
            return self._by_id[group_id]
        except KeyError:
            raise PlanError(f"no group {group_id!r} in this plan") from None

    def group_ids(self) -> list[str]:
        return [g.id for g in self.groups]

    def to_json_dict(self) -> dict:
        return {
            "granularity": self.granularity.value,
            "groups": [g.to_json_dict() for g in self.groups],
        }


def head_slices(config: ModelConfig, layer: int, head: int) -> dict[str, SliceSpec]:
    """Row ranges of q/k/v_proj and the o_proj column range for one head."""
    if not 0 <= layer < config.n_layers:
        raise PlanError(f"layer {layer} out of range for n_layers={config.n_layers}")
    if not 0 <= head < config.n_heads:
        raise PlanError(f"head {head} out of range for n_heads={config.n_heads}")
    lo, hi = head * config.head_dim, (head + 1) * config.head_dim
    pre = f"layers.{layer}.attn"
    return {
        f"{pre}.q_proj": SliceSpec(rows=(lo, hi)),
        f"{pre}.k_proj": SliceSpec(rows=(lo, hi)),
        f"{pre}.v_proj": SliceSpec(rows=(lo, hi)),
        f"{pre}.o_proj": SliceSpec(cols=(lo, hi)),
    }


def _embed_group() -> SubmoduleGroup:
    return SubmoduleGroup(
        id="embed", input_tap="tokens", output_kind="embed_rows", params={"embed": FULL}
    )


def _lm_head_group() -> SubmoduleGroup:
    return SubmoduleGroup(
        id="lm_head",
        input_tap="final_hidden",
        output_kind="logits",
        params={"norm_final": FULL, "lm_head": FULL},
    )


def _layer_param_names(i: int) -> list[str]:
    pre = f"layers.{i}"
    return [
        f"{pre}.norm1",
        f"{pre}.attn.q_proj",
        f"{pre}.attn.k_proj",
        f"{pre}.attn.v_proj",
        f"{pre}.attn.o_proj",
        f"{pre}.norm2",
        f"{pre}.mlp.gate_proj",
        f"{pre}.mlp.up_proj",
        f"{pre}.mlp.down_proj",
    ]


def _mlp_group(i: int) -> SubmoduleGroup:
    pre = f"layers.{i}"
    return SubmoduleGroup(
        id=f"mlp.{i}",
        input_tap=f"mlp_in.{i}",
        output_kind="mlp_branch",
        params={
            f"{pre}.norm2": FULL,
            f"{pre}.mlp.gate_proj": FULL,
            f"{pre}.mlp.up_proj": FULL,
            f"{pre}.mlp.down_proj": FULL,
        },
        layer=i,
    )


def plan_decomposition(config: ModelConfig, level: Granularity) -> DecompositionPlan:
    groups: list[SubmoduleGroup] = []
    if level is Granularity.MODEL:
        groups.append(
            SubmoduleGroup(
                id="model",
                input_tap="tokens",
                output_kind="model_logits",
                params={name: FULL for name in config.param_shapes()},
            )
        )
        return DecompositionPlan(granularity=level, config=config, groups=tuple(groups))

    groups.append(_embed_group())
    for i in range(config.n_layers):
        pre = f"layers.{i}"
        if level is Granularity.LAYER:
            groups.append(
                SubmoduleGroup(
                    id=f"layer.{i}",
                    input_tap=f"layer_in.{i}",
                    output_kind="layer_out",
                    params={name: FULL for name in _layer_param_names(i)},
                    layer=i,
                )
            )
        elif level is Granularity.ATTN_MLP:
            groups.append(
                SubmoduleGroup(
                    id=f"attn.{i}",
                    input_tap=f"layer_in.{i}",
                    output_kind="attn_branch",
                    params={
                        f"{pre}.norm1": FULL,
                        f"{pre}.attn.q_proj": FULL,
                        f"{pre}.attn.k_proj": FULL,
                        f"{pre}.attn.v_proj": FULL,
                        f"{pre}.attn.o_proj": FULL,
                    },
                    layer=i,
                )
            )
            groups.append(_mlp_group(i))
        elif level is Granularity.HEAD_MLP:
            for h in range(config.n_heads):
                params = dict(head_slices(config, i, h))
                extras: tuple[str, ...] = ()
                if h == 0:
                    params[f"{pre}.norm1"] = FULL  # some group must own the shared norm
                else:
                    extras = (f"{pre}.norm1",)
                groups.append(
                    SubmoduleGroup(
                        id=f"head.{i}.{h}",
                        input_tap=f"layer_in.{i}",
                        output_kind="head_branch",
                        params=params,
                        layer=i,
                        head_index=h,
                        extra_params=extras,
                    )
                )
            groups.append(_mlp_group(i))
    groups.append(_lm_head_group())
    return DecompositionPlan(granularity=level, config=config, groups=tuple(groups))


def module_parameters(plan: DecompositionPlan, group_id: str) -> dict[str, SliceSpec]:
    """Exact parameter slices touched when this group is merged."""
    return dict(plan.group(group_id).params)
