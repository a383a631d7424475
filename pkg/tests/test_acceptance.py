"""Acceptance gate: exact-math oracles, invariants and trend reproduction.

Each test covers one acceptance criterion and is written against independent
oracles (explicit-loop objective evaluation, dense grid search, hand-derived
values) rather than against the library's own intermediate results.
"""

from __future__ import annotations

import itertools
import json
import time

import numpy as np
import pytest

from submerge import TensorArchive, archive_digest, task_vector
from submerge.cli import main
from submerge.decompose import Granularity, plan_decomposition
from submerge.features import (
    apply_group,
    collect_base_features,
    compute_delta_outputs,
)
from submerge.fixtures import FixtureSpec, build_fixture
from submerge.linearity import (
    interpolation_scores,
    metric_sweep,
    non_linearity_score,
)
from submerge.merge import (
    merge_dare,
    merge_linear_solve,
    merge_task_arithmetic,
    merge_weight_average,
)
from submerge.model import ModelConfig, bind_weights
from submerge.solver import assemble_system, compute_gram, solve_alpha, solve_plan

from test_solver import surrogate_objective

CONFIG32 = ModelConfig(
    d_model=32, n_heads=4, n_layers=4, d_ff=64, vocab_size=64, max_seq=32
)
BODY_EXCLUDED = ("embed", "lm_head")


def spec32(n_tasks: int, tau_scale: float, seed: int) -> FixtureSpec:
    return FixtureSpec(
        config=CONFIG32,
        n_tasks=n_tasks,
        tau_scale=tau_scale,
        dataset_size=6,
        seq_len=12,
        seed=seed,
    )


def quadratic_coefficients(task_blocks, normalized=False):
    """Objective J(alpha) = a M a - 2 v.a + c computed with explicit loops."""
    n_models = task_blocks[0].shape[0]
    M = np.zeros((n_models, n_models))
    v = np.zeros(n_models)
    c = 0.0
    for a, block in enumerate(task_blocks):
        rows = block.shape[1]
        M_a = np.zeros((n_models, n_models))
        v_a = np.zeros(n_models)
        c_a = 0.0
        retained = 0
        for r in range(rows):
            weight = 1.0
            if normalized:
                denom = 0.0
                for t in range(n_models):
                    row = np.asarray(block[t, r], dtype=np.float64)
                    denom += float(row @ row)
                denom /= n_models
                if denom < 1e-12:
                    continue
                weight = 1.0 / denom
            retained += 1
            for j in range(n_models):
                for k in range(n_models):
                    M_a[j, k] += weight * float(block[j, r] @ block[k, r])
                v_a[j] += weight * float(block[j, r] @ block[a, r])
            c_a += weight * float(block[a, r] @ block[a, r])
        if retained:
            M += M_a / retained
            v += v_a / retained
            c += c_a / retained
    return M, v, c


def dense_grid(step: float = 0.01, lo: float = -2.0, hi: float = 2.0) -> np.ndarray:
    axis = np.arange(lo, hi + step / 2, step)
    return np.array(list(itertools.product(axis, axis)))


def grid_minimum(M, v, c, grid) -> float:
    values = np.einsum("gj,jk,gk->g", grid, M, grid) - 2.0 * grid @ v + c
    return float(values.min())


class TestClosedFormOptimality:
    def test_beats_dense_grid_on_50_instances(self):
        started = time.perf_counter()
        grid = dense_grid(step=0.01)
        rng = np.random.default_rng(2024)
        for _ in range(50):
            blocks = [
                rng.normal(size=(2, int(rng.integers(4, 33)), 8))
                * rng.uniform(0.5, 2.0)
                for _ in range(2)
            ]
            A, b = assemble_system(compute_gram(blocks, normalized=False))
            alpha, diag = solve_alpha(A, b)
            if not diag["fallback"]:
                assert np.linalg.norm(A @ alpha - b) <= 1e-8 * (1 + np.linalg.norm(b))
            M, v, c = quadratic_coefficients(blocks, normalized=False)
            closed = surrogate_objective(blocks, alpha, normalized=False)
            # The loop objective and the loop quadratic must agree at alpha.
            quad_at_alpha = float(alpha @ M @ alpha - 2 * v @ alpha + c)
            assert closed == pytest.approx(quad_at_alpha, rel=1e-9, abs=1e-12)
            assert closed <= grid_minimum(M, v, c, grid) + 1e-6
        assert time.perf_counter() - started < 10.0


class TestDegenerateClosedForms:
    def test_single_task_alpha_is_one(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            blocks = [rng.normal(size=(1, int(rng.integers(2, 17)), 6))]
            alpha, _ = solve_alpha(*assemble_system(compute_gram(blocks)))
            assert alpha[0] == pytest.approx(1.0, abs=1e-8)

    def test_identical_deltas_split_half_with_zero_objective(self):
        rng = np.random.default_rng(2)
        shared = rng.normal(size=(9, 5))
        blocks = [np.stack([shared, shared]), np.stack([shared, shared])]
        alpha, diag = solve_alpha(
            *assemble_system(compute_gram(blocks, normalized=False))
        )
        assert diag["fallback"]
        np.testing.assert_allclose(alpha, [0.5, 0.5], atol=1e-4)
        assert abs(surrogate_objective(blocks, alpha, normalized=False)) <= 1e-8


@pytest.fixture(scope="module")
def embed_setup():
    fixture = build_fixture(spec32(n_tasks=2, tau_scale=0.5, seed=1))
    plan = plan_decomposition(CONFIG32, Granularity.LAYER)
    store = collect_base_features(
        bind_weights(fixture.base, CONFIG32), fixture.datasets, plan, 4, seed=0
    )
    taus = [task_vector(m, fixture.base) for m in fixture.models]
    deltas = compute_delta_outputs(store, fixture.base, fixture.models, plan)
    return fixture, plan, store, taus, deltas


@pytest.fixture(scope="module")
def archive_family():
    fixture = build_fixture(spec32(n_tasks=2, tau_scale=0.5, seed=2))
    return fixture.base, fixture.models


class TestExactLinearitySuite:

    def test_non_linearity_at_float_noise(self, embed_setup):
        fixture, plan, store, taus, _ = embed_setup
        group = plan.group("embed")
        for task in range(2):
            value, _ = non_linearity_score(store, fixture.base, taus[task], group, task=task)
            assert value <= 1e-10

    def test_merge_metrics_ideal_on_full_grid(self, embed_setup):
        fixture, plan, store, taus, deltas = embed_setup
        records = metric_sweep(store, deltas, fixture.base, taus, plan.group("embed"))
        per_alpha = [r for r in records if not r.metric.endswith("_grid_mean")]
        assert len(per_alpha) == 50  # 25 grid points x 2 metrics
        for record in per_alpha:
            if record.metric == "cosine_merge":
                assert record.value >= 1 - 1e-6
            else:
                assert record.value <= 1e-6

    def test_solved_alpha_is_global_optimum(self, embed_setup):
        fixture, plan, store, taus, deltas = embed_setup
        merged, weights = merge_linear_solve(
            fixture.base,
            fixture.models,
            Granularity.LAYER,
            fixture.datasets,
            samples_per_task=4,
            seed=0,
        )
        alpha = weights.group("embed").alpha
        blocks = [block.astype(np.float64) for block in deltas.grouped("embed")]
        M, v, c = quadratic_coefficients(blocks, normalized=True)
        solved = float(np.asarray(alpha) @ M @ np.asarray(alpha) - 2 * v @ alpha + c)
        assert solved <= grid_minimum(M, v, c, dense_grid(step=0.01)) + 1e-6


class TestBaselineIdentities:
    def test_weight_average_equals_uniform_task_arithmetic(self, archive_family):
        base, models = archive_family
        wa = merge_weight_average(base, models)
        ta = merge_task_arithmetic(base, models, alpha=1.0 / len(models))
        for name in wa.tensors:
            np.testing.assert_allclose(wa.tensors[name], ta.tensors[name], atol=1e-7)

    def test_dare_without_dropout_is_task_arithmetic_bitwise(self, archive_family):
        base, models = archive_family
        dare = merge_dare(base, models, alpha=0.7, drop_p=0.0, seed=11)
        ta = merge_task_arithmetic(base, models, alpha=0.7)
        assert archive_digest(dare) == archive_digest(ta)

    def test_dare_unbiased_within_three_standard_errors(self):
        tau = np.concatenate([np.linspace(-1.5, 1.5, 12), np.zeros(4)]).astype(np.float32)
        base = TensorArchive(tensors={"w": np.zeros(16, dtype=np.float32)}, meta={})
        ft = TensorArchive(tensors={"w": tau}, meta={})
        drop_p = 0.75
        samples = np.stack(
            [
                merge_dare(base, [ft], alpha=1.0, drop_p=drop_p, seed=s).tensors["w"]
                for s in range(200)
            ]
        ).astype(np.float64)
        se = np.abs(tau) * np.sqrt(drop_p / (1 - drop_p) / 200)
        assert np.all(np.abs(samples.mean(axis=0) - tau) <= 3 * se + 1e-12)


def body_mean_non_linearity(fixture, level) -> float:
    plan = plan_decomposition(CONFIG32, level)
    store = collect_base_features(
        bind_weights(fixture.base, CONFIG32), fixture.datasets, plan, 4, seed=0
    )
    taus = [task_vector(m, fixture.base) for m in fixture.models]
    values = []
    for group in plan.groups:
        if group.id in BODY_EXCLUDED:
            continue
        for task in range(len(taus)):
            value, _ = non_linearity_score(
                store, fixture.base, taus[task], group, task=task
            )
            values.append(value)
    return float(np.mean(values))


def body_mean_projection(fixture, level) -> float:
    plan = plan_decomposition(CONFIG32, level)
    store = collect_base_features(
        bind_weights(fixture.base, CONFIG32), fixture.datasets, plan, 4, seed=0
    )
    taus = [task_vector(m, fixture.base) for m in fixture.models]
    deltas = compute_delta_outputs(store, fixture.base, fixture.models, plan)
    values = []
    for group in plan.groups:
        if group.id in BODY_EXCLUDED:
            continue
        records = metric_sweep(store, deltas, fixture.base, taus, group)
        values.append(
            next(
                r.value
                for r in records
                if r.metric == "projection_distance_grid_mean"
            )
        )
    return float(np.mean(values))


class TestSubmoduleTrends:
    def test_submodule_non_linearity_at_most_half_of_model(self):
        # Whole-model interpolation bends at least twice as much as the
        # per-submodule average on every seeded fixture family.
        started = time.perf_counter()
        scores = {level: [] for level in (Granularity.MODEL, Granularity.LAYER, Granularity.ATTN_MLP)}
        for seed in (1, 2, 3):
            fixture = build_fixture(spec32(n_tasks=2, tau_scale=0.5, seed=seed))
            for level in scores:
                scores[level].append(body_mean_non_linearity(fixture, level))
        model_mean = np.mean(scores[Granularity.MODEL])
        assert np.mean(scores[Granularity.LAYER]) <= 0.5 * model_mean
        assert np.mean(scores[Granularity.ATTN_MLP]) <= 0.5 * model_mean
        assert time.perf_counter() - started < 300.0

    @pytest.mark.parametrize("n_tasks", [2, 3])
    def test_projection_distance_smaller_for_submodules(self, n_tasks):
        per_level = {level: [] for level in (Granularity.MODEL, Granularity.LAYER, Granularity.ATTN_MLP)}
        for seed in (1, 2, 3):
            fixture = build_fixture(spec32(n_tasks=n_tasks, tau_scale=0.5, seed=seed))
            for level in per_level:
                per_level[level].append(body_mean_projection(fixture, level))
        model_mean = np.mean(per_level[Granularity.MODEL])
        assert np.mean(per_level[Granularity.LAYER]) <= model_mean
        assert np.mean(per_level[Granularity.ATTN_MLP]) <= model_mean


class TestHandComputedMetric:
    def test_quadratic_toy_score_is_one_quarter(self):
        outputs = [np.array([[(k / 2) ** 2]]) for k in range(3)]
        scores, _, _ = interpolation_scores(outputs)
        assert scores.mean() == pytest.approx(0.25, abs=1e-12)


class TestPerHeadDecomposition:
    def test_head_branches_sum_to_attention_branch(self):
        fixture = build_fixture(spec32(n_tasks=1, tau_scale=0.5, seed=4))
        head_plan = plan_decomposition(CONFIG32, Granularity.HEAD_MLP)
        attn_plan = plan_decomposition(CONFIG32, Granularity.ATTN_MLP)
        store = collect_base_features(
            bind_weights(fixture.base, CONFIG32), fixture.datasets, head_plan, 4, seed=0
        )
        # One coherent fine-tuned parameter set for every branch, so all
        # heads read the same fine-tuned norm.
        params = {
            name: fixture.models[0].tensors[name].astype(np.float64)
            for name in fixture.models[0].tensors
        }
        for layer in range(CONFIG32.n_layers):
            inputs = store.inputs[(f"head.{layer}.0", 0)]
            attn_group = attn_plan.group(f"attn.{layer}")
            total = None
            for head in range(CONFIG32.n_heads):
                outs = np.concatenate(
                    apply_group(
                        head_plan.group(f"head.{layer}.{head}"), params, inputs, CONFIG32
                    )
                )
                total = outs if total is None else total + outs
            attn = np.concatenate(apply_group(attn_group, params, inputs, CONFIG32))
            np.testing.assert_allclose(total, attn, atol=1e-5)


class TestEndToEndSanity:
    def test_linear_solve_competitive_with_best_task_arithmetic(self, tmp_path):
        started = time.perf_counter()
        for seed in (1, 2):
            fixture_dir = tmp_path / f"fx{seed}"
            rc = main(
                [
                    "gen-fixture",
                    "--d-model", "32", "--n-heads", "4", "--n-layers", "4",
                    "--d-ff", "64", "--vocab-size", "64", "--max-seq", "32",
                    "--tasks", "2", "--tau-scale", "0.05",
                    "--dataset-size", "8", "--seq-len", "12",
                    "--seed", str(seed),
                    "--out", str(fixture_dir),
                ]
            )
            assert rc == 0
            out = tmp_path / f"cmp{seed}"
            rc = main(
                [
                    "compare",
                    "--base", str(fixture_dir / "base.ta"),
                    "--model", str(fixture_dir / "task0.ta"),
                    "--model", str(fixture_dir / "task1.ta"),
                    "--dataset", str(fixture_dir / "task0.jsonl"),
                    "--dataset", str(fixture_dir / "task1.jsonl"),
                    "--level", "attn_mlp",
                    "--samples-per-task", "6",
                    "--out", str(out),
                ]
            )
            assert rc == 0
            payload = json.loads((out / "compare.json").read_text())
            ta_means = [
                row["mean"] for row in payload["rows"] if row["method"] == "task_arithmetic"
            ]
            linear_mean = next(
                row["mean"] for row in payload["rows"] if row["method"] == "linear_solve"
            )
            assert linear_mean <= min(ta_means) * 1.02
        assert time.perf_counter() - started < 600.0
