"""Solve per-submodule merge coefficients in closed form.

For each group the merged output delta is modeled as a weighted sum of the
fine-tuned models' output deltas. Minimizing the squared error against each
model's own delta on its own data is a quadratic, so the optimum comes from
a T x T linear system per group; no gradient steps, no sweep.

This walks the pipeline by hand: trace the base model once, compute output
deltas per group and model, build the Gram tensor, assemble and solve the
normal equations, and read the diagnostics.
"""

from submerge import (
    FixtureSpec,
    Granularity,
    ModelConfig,
    assemble_system,
    bind_weights,
    build_fixture,
    collect_base_features,
    compute_delta_outputs,
    compute_gram,
    plan_decomposition,
    solve_alpha,
    solve_plan,
)

config = ModelConfig(
    d_model=32, n_heads=4, n_layers=2, d_ff=64, vocab_size=64, max_seq=32
)
spec = FixtureSpec(
    config=config, n_tasks=2, tau_scale=0.5, dataset_size=8, seq_len=12, seed=11
)
fixture = build_fixture(spec)
bound = bind_weights(fixture.base, config)

plan = plan_decomposition(config, Granularity.ATTN_MLP)
store = collect_base_features(bound, fixture.datasets, plan, sample_n=6, seed=0)
deltas = compute_delta_outputs(store, fixture.base, fixture.models, plan)

# One group end to end. B[a, b, c] averages <delta_b(x), delta_c(x)> over
# task-a samples; A sums B over data tasks and b picks out the diagonal
# targets, so alpha = A^-1 b matches every model where its own data looks.
group_id = "attn.0"
gram = compute_gram(deltas.grouped(group_id), normalized=True, group_id=group_id)
A, b = assemble_system(gram)
alpha, diag = solve_alpha(A, b)
print(f"group {group_id}: alpha = {[round(a, 4) for a in alpha.tolist()]}")
print(f"  condition = {diag['condition']:.2f}, residual = {diag['residual']:.2e}")

# The plan-level driver does this for every group and catches degenerate
# groups (zero deltas, singular systems) with a uniform fallback.
weights = solve_plan(plan, deltas, normalized=True)
print(f"\nsolved {len(weights.groups)} groups at level {weights.level!r}:")
for gw in weights.groups:
    flags = " fallback" if gw.fallback else ""
    print(f"  {gw.group_id:>8}: alpha = {[round(a, 4) for a in gw.alpha]}{flags}")

print()
print("Coefficients differ per group: parts that encode task-specific")
print("behavior pull toward their own model, shared parts average out.")
