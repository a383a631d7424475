"""Synthetic checkpoint families and task datasets for desk-scale runs.

A fixture is one random base checkpoint, T "fine-tuned" variants, and T
token datasets with distinct per-task frequency biases. The variants are
shaped like real task vectors rather than white noise: most of each
direction sits on the attention and MLP output projections as rank-one
updates whose input side follows the mean branch activation on the task's
data and whose shared output side points at the task's frequent-token
logits. That structure keeps each branch close to linear in its own
parameters while the composed model is not, and makes every variant beat
the base on its own dataset, so linearity analysis and merge quality are
both measurable with cross entropy at desk scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import TensorArchive, write_archive
from .errors import DataError, IoError, ParamError
from .model import ModelConfig, bind_weights

DIRICHLET_CONC = 0.5

# Frobenius share of each tensor role within one task direction; the whole
# direction is normalized to unit global Frobenius norm afterwards, so only
# the ratios matter. Output projections carry the task signal; the small
# inner-matrix share keeps submodules measurably (not exactly) non-linear.
DIRECTION_SHARES = {
    "output_proj": 1.0,
    "inner_matrix": 0.1,
    "norm_gain": 0.02,
    "embed": 0.2,
    "lm_head": 0.1,
}
ALIGNED_MIX = 0.9  # aligned rank-one fraction on output projections
STATS_SEQUENCES = 4  # sequences used for mean-activation statistics


@dataclass(frozen=True)
class FixtureSpec:
    config: ModelConfig
    n_tasks: int = 2
    tau_scale: float = 0.5
    dataset_size: int = 16
    seq_len: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ParamError("n_tasks must be >= 1")
        if self.tau_scale < 0:
            raise ParamError("tau_scale must be >= 0")
        if self.dataset_size < 1:
            raise ParamError("dataset_size must be >= 1")
        if self.seq_len < 2:
            raise ParamError("seq_len must be >= 2 (cross entropy needs a target)")
        if self.seq_len > self.config.max_seq:
            raise ParamError(
                f"seq_len {self.seq_len} exceeds model max_seq {self.config.max_seq}"
            )

    def to_json_dict(self) -> dict:
        return {
            "config": json.loads(self.config.to_json()),
            "n_tasks": self.n_tasks,
            "tau_scale": self.tau_scale,
            "dataset_size": self.dataset_size,
            "seq_len": self.seq_len,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "FixtureSpec":
        try:
            config = ModelConfig(**payload["config"])
            return cls(
                config=config,
                n_tasks=int(payload.get("n_tasks", 2)),
                tau_scale=float(payload.get("tau_scale", 0.5)),
                dataset_size=int(payload.get("dataset_size", 16)),
                seq_len=int(payload.get("seq_len", 12)),
                seed=int(payload.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParamError(f"malformed fixture spec: {exc}") from exc


@dataclass
class Fixture:
    spec: FixtureSpec
    base: TensorArchive
    models: list[TensorArchive]
    datasets: list[list[list[int]]]
    token_probs: list[np.ndarray]


def _base_checkpoint(config: ModelConfig, rng: np.random.Generator) -> TensorArchive:
    tensors = {}
    scale = 0.02 / np.sqrt(config.d_model)
    for name, shape in config.param_shapes().items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=np.float32)
        else:
            tensors[name] = (scale * rng.normal(size=shape)).astype(np.float32)
    return TensorArchive(tensors=tensors, meta={"model_config": config.to_json()})


def _unit_frobenius(arr: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(arr)
    return arr / norm if norm > 0 else arr


def _tensor_role(name: str, ndim: int) -> str:
    if name == "embed":
        return "embed"
    if name == "lm_head":
        return "lm_head"
    if ndim == 1:
        return "norm_gain"
    if name.endswith("o_proj") or name.endswith("down_proj"):
        return "output_proj"
    return "inner_matrix"


def _branch_input_means(
    base: TensorArchive, config: ModelConfig, dataset: list[list[int]]
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per layer, the mean o_proj input row and mean down_proj input row
    of the base model on the task's data, each normalized."""
    bound = bind_weights(base, config)
    taps = [f"oproj_in.{i}" for i in range(config.n_layers)]
    taps += [f"dproj_in.{i}" for i in range(config.n_layers)]
    attn_means = [np.zeros(config.d_model) for _ in range(config.n_layers)]
    mlp_means = [np.zeros(config.d_ff) for _ in range(config.n_layers)]
    for tokens in dataset[:STATS_SEQUENCES]:
        trace = bound.forward(tokens, taps=taps)
        for i in range(config.n_layers):
            attn_means[i] += trace.taps[f"oproj_in.{i}"].mean(axis=0)
            mlp_means[i] += trace.taps[f"dproj_in.{i}"].mean(axis=0)
    return (
        [_unit_frobenius(row) for row in attn_means],
        [_unit_frobenius(row) for row in mlp_means],
    )


def _task_direction(
    base: TensorArchive,
    config: ModelConfig,
    probs: np.ndarray,
    dataset: list[list[int]],
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Direction archive of unit global Frobenius norm for one task.

    Output projections get rank-one updates outer(readout, mean input):
    they fire on typical task activations and push the residual stream
    toward the direction whose logits favor the task's frequent tokens.
    The unembedding mixes in a component with the same effect; everything
    else is a small random displacement.
    """
    lm_head = base.tensors["lm_head"].astype(np.float64)
    readout = _unit_frobenius(lm_head.T @ (probs - 1.0 / probs.size))
    attn_means, mlp_means = _branch_input_means(base, config, dataset)
    direction = {}
    for name, arr in base.tensors.items():
        random_part = _unit_frobenius(rng.normal(size=arr.shape))
        role = _tensor_role(name, arr.ndim)
        if role == "output_proj":
            layer = int(name.split(".")[1])
            inputs = attn_means[layer] if name.endswith("o_proj") else mlp_means[layer]
            aligned = np.outer(readout, inputs)
            tensor = _unit_frobenius(
                ALIGNED_MIX * aligned + (1.0 - ALIGNED_MIX) * random_part
            )
        elif role == "lm_head":
            mean_embed = probs @ base.tensors["embed"].astype(np.float64)
            aligned = np.outer(probs - 1.0 / probs.size, mean_embed)
            tensor = random_part
            if np.linalg.norm(aligned) > 1e-12:
                tensor = _unit_frobenius(random_part + _unit_frobenius(aligned))
        else:
            tensor = random_part
        direction[name] = DIRECTION_SHARES[role] * tensor
    total = np.sqrt(sum(float(np.sum(np.square(t))) for t in direction.values()))
    return {name: tensor / total for name, tensor in direction.items()}


def build_fixture(spec: FixtureSpec) -> Fixture:
    """Deterministic in-memory fixture; every component has its own stream."""
    config = spec.config
    base = _base_checkpoint(config, np.random.default_rng([spec.seed, 0]))
    models = []
    datasets = []
    token_probs = []
    for task in range(spec.n_tasks):
        data_rng = np.random.default_rng([spec.seed, 1, task])
        probs = data_rng.dirichlet(np.full(config.vocab_size, DIRICHLET_CONC))
        token_probs.append(probs)
        datasets.append(
            [
                data_rng.choice(config.vocab_size, size=spec.seq_len, p=probs).tolist()
                for _ in range(spec.dataset_size)
            ]
        )
        direction = _task_direction(
            base, config, probs, datasets[task], np.random.default_rng([spec.seed, 2, task])
        )
        tensors = {
            name: (arr.astype(np.float64) + spec.tau_scale * direction[name]).astype(
                np.float32
            )
            for name, arr in base.tensors.items()
        }
        models.append(TensorArchive(tensors=tensors, meta=dict(base.meta)))
    return Fixture(spec, base, models, datasets, token_probs)


def write_dataset(path: str | Path, task: str, sequences: Sequence[Sequence[int]]) -> None:
    lines = [
        json.dumps({"task": task, "tokens": [int(t) for t in seq]}, sort_keys=True)
        for seq in sequences
    ]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path: str | Path) -> list[list[int]]:
    """Token sequences from a JSONL file of {"task": ..., "tokens": [...]}."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc}") from exc
    sequences = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            tokens = record["tokens"]
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            raise DataError(f"{path}:{lineno}: malformed dataset line: {exc}") from exc
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise DataError(f"{path}:{lineno}: tokens must be a list of ints")
        sequences.append(tokens)
    if not sequences:
        raise DataError(f"{path}: dataset holds no sequences")
    return sequences


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def gen_fixture(spec: FixtureSpec, out_dir: str | Path) -> dict:
    """Write base.ta, task{t}.ta, task{t}.jsonl and a fixture.json manifest.

    Outputs are byte-identical across reruns with the same spec.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create fixture dir {out}: {exc}") from exc
    fixture = build_fixture(spec)
    paths = {
        "base": out / "base.ta",
        "models": [out / f"task{t}.ta" for t in range(spec.n_tasks)],
        "datasets": [out / f"task{t}.jsonl" for t in range(spec.n_tasks)],
        "manifest": out / "fixture.json",
    }
    write_archive(fixture.base, paths["base"])
    for t in range(spec.n_tasks):
        write_archive(fixture.models[t], paths["models"][t])
        write_dataset(paths["datasets"][t], f"task{t}", fixture.datasets[t])
    tracked = [paths["base"], *paths["models"], *paths["datasets"]]
    manifest = {
        "spec": spec.to_json_dict(),
        "files": {
            "base": paths["base"].name,
            "models": [p.name for p in paths["models"]],
            "datasets": [p.name for p in paths["datasets"]],
        },
        "digests": {p.name: _sha256(p) for p in tracked},
    }
    try:
        paths["manifest"].write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoError(f"cannot write fixture manifest: {exc}") from exc
    return paths
