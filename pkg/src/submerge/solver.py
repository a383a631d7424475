"""Closed-form per-group merge weights from output-delta Gram statistics.

For each group the merged output delta is modeled as sum_t alpha_t * delta_t.
Minimizing the summed mean squared error against each model's own delta over
its own data is a quadratic in alpha, so the optimum solves A alpha = b where
both sides are contractions of a per-data-task Gram tensor B.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .decompose import DecompositionPlan
from .errors import CoeffError, DegenerateError, InputError, NumericError
from .features import DeltaStore

ENERGY_FLOOR = 1e-12
COND_LIMIT = 1e12


@dataclass
class GramTensor:
    """B[a, b, c] = mean over task-a samples of <delta_b(x), delta_c(x)>."""

    group_id: str
    B: np.ndarray
    normalized: bool
    samples: tuple[int, ...]
    skipped: tuple[int, ...]


@dataclass
class GroupWeights:
    group_id: str
    alpha: tuple[float, ...]
    fallback: bool
    residual: float
    condition: float = 0.0
    ridge: float = 0.0
    zero_signal: bool = False
    note: str = ""


@dataclass
class MergeWeights:
    level: str
    normalized: bool
    groups: tuple[GroupWeights, ...]
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {g.group_id: g for g in self.groups}

    def group(self, group_id: str) -> GroupWeights:
        try:
            return self._by_id[group_id]
        except KeyError:
            raise CoeffError(f"no solved weights for group {group_id!r}") from None

    def to_json_dict(self) -> dict:
        return {
            "level": self.level,
            "normalized": self.normalized,
            "groups": [
                {
                    "id": g.group_id,
                    "alpha": [float(a) for a in g.alpha],
                    "fallback": bool(g.fallback),
                    "residual": float(g.residual),
                }
                for g in self.groups
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "MergeWeights":
        try:
            groups = tuple(
                GroupWeights(
                    group_id=entry["id"],
                    alpha=tuple(float(a) for a in entry["alpha"]),
                    fallback=bool(entry["fallback"]),
                    residual=float(entry["residual"]),
                )
                for entry in payload["groups"]
            )
            return cls(str(payload["level"]), bool(payload["normalized"]), groups)
        except (KeyError, TypeError, ValueError) as exc:
            raise CoeffError(f"malformed weights payload: {exc}") from exc


def compute_gram(
    task_blocks: Sequence[np.ndarray], normalized: bool = True, group_id: str = ""
) -> GramTensor:
    """Gram tensor over data tasks; blocks are [n_models, rows, width].

    Normalized mode divides each sample's contribution by the mean delta
    energy across models and skips samples where that energy underflows.
    """
    if not task_blocks:
        raise InputError("need at least one data task block")
    blocks = [np.asarray(b, dtype=np.float64) for b in task_blocks]
    n_models = blocks[0].shape[0]
    for block in blocks:
        if block.ndim != 3 or block.shape[0] != n_models:
            raise InputError(
                f"blocks must be [n_models x rows x width] with n_models={n_models}, "
                f"got {block.shape}"
            )
    B = np.zeros((len(blocks), n_models, n_models))
    samples = []
    skipped = []
    for a, block in enumerate(blocks):
        outer = np.einsum("brw,crw->rbc", block, block)
        if normalized:
            energy = np.einsum("rtt->r", outer) / n_models
            keep = energy >= ENERGY_FLOOR
            retained = int(keep.sum())
            skipped.append(block.shape[1] - retained)
            if retained == 0:
                raise DegenerateError(
                    f"group {group_id!r}: data task {a} has no samples with "
                    "non-zero delta energy"
                )
            B[a] = (outer[keep] / energy[keep, None, None]).mean(axis=0)
        else:
            skipped.append(0)
            retained = block.shape[1]
            if retained == 0:
                raise DegenerateError(f"group {group_id!r}: data task {a} has no samples")
            B[a] = outer.mean(axis=0)
        samples.append(retained)
    if not np.isfinite(B).all():
        raise NumericError(f"group {group_id!r}: non-finite Gram entries")
    return GramTensor(group_id, B, normalized, tuple(samples), tuple(skipped))


def assemble_system(gram: GramTensor) -> tuple[np.ndarray, np.ndarray]:
    """Normal equations: A[j,k] = sum_t B[t,j,k], b[j] = sum_t B[t,j,t]."""
    A = gram.B.sum(axis=0)
    b = np.einsum("tjt->j", gram.B)
    return A, b


def solve_alpha(
    A: np.ndarray, b: np.ndarray, ridge_rel: float = 1e-8
) -> tuple[np.ndarray, dict]:
    """Solve A alpha = b with ridge and zero-signal fallbacks.

    Returns (alpha, diagnostics) where diagnostics carries the condition
    estimate, any ridge used, the residual against the original system, and
    fallback/zero-signal flags.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not (np.isfinite(A).all() and np.isfinite(b).all()):
        raise NumericError("normal equations contain non-finite entries")
    if not np.allclose(A, A.T, atol=1e-10 * (1 + np.abs(A).max())):
        raise InputError("system matrix must be symmetric")
    n = A.shape[0]
    trace = float(np.trace(A))
    if trace < ENERGY_FLOOR:
        alpha = np.full(n, 1.0 / n)
        return alpha, {
            "condition": float("inf"),
            "ridge": 0.0,
            "residual": float(np.linalg.norm(A @ alpha - b)),
            "fallback": True,
            "zero_signal": True,
        }
    condition = float(np.linalg.cond(A))
    alpha = None
    ridge = 0.0
    fallback = False
    if condition <= COND_LIMIT:
        try:
            alpha = scipy.linalg.solve(A, b, assume_a="sym")
        except scipy.linalg.LinAlgError:
            alpha = None
        if alpha is not None and not np.isfinite(alpha).all():
            alpha = None
    if alpha is None:
        ridge = ridge_rel * trace / n
        fallback = True
        alpha = scipy.linalg.solve(A + ridge * np.eye(n), b, assume_a="pos")
    return alpha, {
        "condition": condition,
        "ridge": ridge,
        "residual": float(np.linalg.norm(A @ alpha - b)),
        "fallback": fallback,
        "zero_signal": False,
    }


def solve_plan(
    plan: DecompositionPlan,
    deltas: DeltaStore,
    normalized: bool = True,
    ridge_rel: float = 1e-8,
) -> MergeWeights:
    """Solve one alpha vector per group; failures fall back to uniform."""
    n = deltas.n_models
    results = []
    for group_id in plan.group_ids():
        try:
            gram = compute_gram(deltas.grouped(group_id), normalized, group_id=group_id)
            alpha, diag = solve_alpha(*assemble_system(gram), ridge_rel=ridge_rel)
            results.append(
                GroupWeights(
                    group_id=group_id,
                    alpha=tuple(float(a) for a in alpha),
                    fallback=diag["fallback"],
                    residual=diag["residual"],
                    condition=diag["condition"],
                    ridge=diag["ridge"],
                    zero_signal=diag["zero_signal"],
                )
            )
        except (DegenerateError, NumericError) as exc:
            results.append(
                GroupWeights(
                    group_id=group_id,
                    alpha=tuple(1.0 / n for _ in range(n)),
                    fallback=True,
                    residual=0.0,
                    condition=float("inf"),
                    zero_signal=True,
                    note=str(exc),
                )
            )
    return MergeWeights(plan.granularity.value, normalized, tuple(results))
