"""Linearity diagnostics for submodule groups.

Three measurements, all over token-position samples:

- interpolation score: walk parameters from the base to base+tau in N equal
  steps; an exactly linear group moves its outputs along a straight line, so
  pairwise output distances are proportional to |i-j|/N. The score is the
  summed squared deviation of the distance ratios from that line.
- merge cosine: cosine between the merged group's output delta and the
  alpha-weighted sum of per-model output deltas.
- projection distance: |1 - E[projection ratio]| of the merged delta onto
  the weighted delta sum; zero when combining parameters combines outputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .archive import TensorArchive
from .decompose import SubmoduleGroup
from .errors import DegenerateError, InputError
from .features import DeltaStore, FeatureStore, apply_group, group_parameters, interpolated_outputs

NORM_FLOOR = 1e-12


@dataclass
class LinearityRecord:
    group_id: str
    metric: str
    value: float
    aux: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        aux = {}
        for key, value in self.aux.items():
            if isinstance(value, np.ndarray):
                aux[key] = value.tolist()
            elif isinstance(value, (np.floating, np.integer)):
                aux[key] = value.item()
            else:
                aux[key] = value
        return {
            "group": self.group_id,
            "metric": self.metric,
            "value": None if not np.isfinite(self.value) else float(self.value),
            "aux": aux,
        }


def interpolation_scores(
    outputs: Sequence[np.ndarray],
) -> tuple[np.ndarray, int, np.ndarray]:
    """Per-sample deviation scores from the straight-line distance profile.

    `outputs` holds N+1 matrices [rows x width], one per interpolation step.
    Returns (per-sample scores, skipped sample count, mean ratio matrix).
    Samples whose endpoints coincide (no output movement) are skipped.
    """
    if len(outputs) < 3:
        raise InputError("need at least three interpolation points (N >= 2)")
    stacked = np.stack([np.asarray(o, dtype=np.float64) for o in outputs])
    steps = stacked.shape[0]
    distances = np.linalg.norm(stacked[:, None] - stacked[None, :], axis=-1)
    endpoint = distances[0, -1]
    keep = endpoint >= NORM_FLOOR
    skipped = int(keep.size - keep.sum())
    if not keep.any():
        raise DegenerateError("all samples have coinciding interpolation endpoints")
    ratios = distances[:, :, keep] / endpoint[keep]
    grid = np.arange(steps, dtype=np.float64)
    target = np.abs(grid[:, None] - grid[None, :]) / (steps - 1)
    scores = ((ratios - target[:, :, None]) ** 2).sum(axis=(0, 1))
    return scores, skipped, ratios.mean(axis=2)


def non_linearity_score(
    store: FeatureStore,
    base: TensorArchive,
    tau: TensorArchive,
    group: SubmoduleGroup,
    task: int = 0,
    n_points: int = 10,
) -> tuple[float, dict]:
    """Mean interpolation score for one group on one task's stored inputs."""
    if n_points < 2:
        raise InputError("n_points must be >= 2")
    coeffs = [k / n_points for k in range(n_points + 1)]
    outputs = interpolated_outputs(store, base, tau, group, coeffs, task=task)
    scores, skipped, ratio_matrix = interpolation_scores(outputs)
    aux = {
        "n": n_points,
        "samples": int(scores.size),
        "skipped": skipped,
        "ratio_matrix": ratio_matrix,
    }
    return float(scores.mean()), aux


def _weighted_sum(task_deltas: Sequence[np.ndarray], alpha: Sequence[float]) -> np.ndarray:
    if len(task_deltas) != len(alpha):
        raise InputError("alpha length must match the number of task deltas")
    target = np.zeros_like(np.asarray(task_deltas[0], dtype=np.float64))
    for weight, delta in zip(alpha, task_deltas):
        target += float(weight) * np.asarray(delta, dtype=np.float64)
    return target


def cosine_merge(
    task_deltas: Sequence[np.ndarray],
    alpha: Sequence[float],
    merged_deltas: np.ndarray,
) -> tuple[float, np.ndarray, int]:
    """Per-sample cosines between merged delta and the weighted delta sum."""
    merged = np.asarray(merged_deltas, dtype=np.float64)
    target = _weighted_sum(task_deltas, alpha)
    merged_norm = np.linalg.norm(merged, axis=1)
    target_norm = np.linalg.norm(target, axis=1)
    keep = (merged_norm >= NORM_FLOOR) & (target_norm >= NORM_FLOOR)
    skipped = int(keep.size - keep.sum())
    if not keep.any():
        raise DegenerateError("every sample has a zero-norm delta")
    dots = np.einsum("rw,rw->r", merged[keep], target[keep])
    per_sample = dots / (merged_norm[keep] * target_norm[keep])
    return float(per_sample.mean()), per_sample, skipped


def cosine_base(task_deltas: Sequence[np.ndarray]) -> tuple[float, dict]:
    """Mean over samples of the average pairwise delta cosine across models."""
    count = len(task_deltas)
    if count < 2:
        raise InputError("pairwise cosine needs at least two models")
    stacked = np.stack([np.asarray(d, dtype=np.float64) for d in task_deltas])
    norms = np.linalg.norm(stacked, axis=2)
    rows = stacked.shape[1]
    pair_sum = np.zeros(rows)
    pair_count = np.zeros(rows)
    for a, b in itertools.combinations(range(count), 2):
        valid = (norms[a] >= NORM_FLOOR) & (norms[b] >= NORM_FLOOR)
        dots = np.einsum("rw,rw->r", stacked[a], stacked[b])
        cos = np.where(valid, dots / np.where(valid, norms[a] * norms[b], 1.0), 0.0)
        pair_sum += np.where(valid, cos, 0.0)
        pair_count += valid
    keep = pair_count > 0
    if not keep.any():
        raise DegenerateError("no sample has two non-zero deltas to compare")
    per_sample = pair_sum[keep] / pair_count[keep]
    aux = {"skipped_rows": int(rows - keep.sum()), "pairs": count * (count - 1) // 2}
    return float(per_sample.mean()), aux


def projection_distance(
    task_deltas: Sequence[np.ndarray],
    alpha: Sequence[float],
    merged_deltas: np.ndarray,
) -> tuple[float, dict]:
    """|1 - E[projection of merged delta onto the weighted delta sum]|."""
    merged = np.asarray(merged_deltas, dtype=np.float64)
    target = _weighted_sum(task_deltas, alpha)
    target_sq = np.einsum("rw,rw->r", target, target)
    keep = target_sq >= NORM_FLOOR**2
    skipped = int(keep.size - keep.sum())
    if not keep.any():
        raise DegenerateError("weighted delta sum is zero on every sample")
    ratios = np.einsum("rw,rw->r", merged[keep], target[keep]) / target_sq[keep]
    mean_ratio = float(ratios.mean())
    return abs(1.0 - mean_ratio), {"skipped": skipped, "mean_ratio": mean_ratio}


def default_alpha_grid(n_models: int) -> list[list[float]]:
    """Per-model coefficient grids used by the sweep reports."""
    if n_models <= 2:
        values = [0.2, 0.4, 0.6, 0.8, 1.0]
    else:
        values = [0.3, 0.5, 0.7]
    return [list(combo) for combo in itertools.product(values, repeat=n_models)]


def merged_group_deltas(
    store: FeatureStore,
    base: TensorArchive,
    taus: Sequence[TensorArchive],
    group: SubmoduleGroup,
    alpha: Sequence[float],
) -> np.ndarray:
    """Output delta of the group merged with `alpha`, rows over all data tasks."""
    params = group_parameters(
        group, base.tensors, taus=[tau.tensors for tau in taus], coeffs=alpha
    )
    blocks = []
    for task in range(store.n_tasks):
        rows = np.concatenate(
            apply_group(group, params, store.inputs[(group.id, task)], store.config)
        )
        blocks.append(rows - store.stacked_base(group.id, task))
    return np.concatenate(blocks)


def metric_sweep(
    store: FeatureStore,
    deltas: DeltaStore,
    base: TensorArchive,
    taus: Sequence[TensorArchive],
    group: SubmoduleGroup,
    grid: Sequence[Sequence[float]] | None = None,
) -> list[LinearityRecord]:
    """Cosine and projection metrics for every alpha in the grid, plus means."""
    if grid is None:
        grid = default_alpha_grid(len(taus))
    if not grid:
        raise InputError("alpha grid must be non-empty")
    task_deltas = deltas.pooled(group.id)
    records: list[LinearityRecord] = []
    for alpha in grid:
        merged = merged_group_deltas(store, base, taus, group, alpha)
        aux = {"alpha": list(alpha)}
        try:
            cos_value, _, cos_skipped = cosine_merge(task_deltas, alpha, merged)
            proj_value, proj_aux = projection_distance(task_deltas, alpha, merged)
            records.append(
                LinearityRecord(group.id, "cosine_merge", cos_value, {**aux, "skipped": cos_skipped})
            )
            records.append(
                LinearityRecord(group.id, "projection_distance", proj_value, {**aux, **proj_aux})
            )
        except DegenerateError as exc:
            for metric in ("cosine_merge", "projection_distance"):
                records.append(
                    LinearityRecord(
                        group.id, metric, float("nan"), {**aux, "degenerate": True, "error": str(exc)}
                    )
                )
    for metric in ("cosine_merge", "projection_distance"):
        values = [r.value for r in records if r.metric == metric and np.isfinite(r.value)]
        aux = {"configs": len(grid), "valid": len(values)}
        if values:
            records.append(
                LinearityRecord(group.id, f"{metric}_grid_mean", float(np.mean(values)), aux)
            )
        else:
            records.append(
                LinearityRecord(
                    group.id, f"{metric}_grid_mean", float("nan"), {**aux, "degenerate": True}
                )
            )
    return records
