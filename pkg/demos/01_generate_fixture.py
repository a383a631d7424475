"""Generate a synthetic checkpoint family and look inside it.

A fixture stands in for a real base model plus fine-tuned variants: one
seeded random transformer, T displaced copies shaped like task vectors,
and T token datasets with distinct frequency biases. Everything is
deterministic in the seed, so results are reproducible byte for byte.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from submerge import FixtureSpec, ModelConfig, build_fixture, gen_fixture, task_vector

config = ModelConfig(
    d_model=32, n_heads=4, n_layers=2, d_ff=64, vocab_size=64, max_seq=32
)
spec = FixtureSpec(
    config=config, n_tasks=2, tau_scale=0.5, dataset_size=8, seq_len=12, seed=7
)

fixture = build_fixture(spec)
print(f"base checkpoint: {len(fixture.base.tensors)} tensors")
print(f"fine-tuned variants: {len(fixture.models)}")
print(f"datasets: {[len(d) for d in fixture.datasets]} sequences each")

# Task vectors are the parameter displacements theta_t - theta_0. Their
# total Frobenius norm is exactly tau_scale, and most of the mass sits on
# the attention / MLP output projections.
for t, model in enumerate(fixture.models):
    tau = task_vector(model, fixture.base)
    total = np.sqrt(sum(float(np.sum(np.square(a))) for a in tau.tensors.values()))
    out_mass = sum(
        float(np.sum(np.square(a)))
        for name, a in tau.tensors.items()
        if name.endswith(("o_proj", "down_proj"))
    )
    print(f"task {t}: ||tau|| = {total:.4f}, output-projection mass = {out_mass / total**2:.1%}")

# Each task's dataset leans toward different tokens.
for t, seqs in enumerate(fixture.datasets):
    counts = np.bincount(np.concatenate(seqs), minlength=config.vocab_size)
    top = np.argsort(counts)[-5:][::-1]
    print(f"task {t} most frequent tokens: {top.tolist()}")

# The same fixture can be written to disk for the CLI; the manifest pins a
# sha256 digest per file.
with tempfile.TemporaryDirectory() as tmp:
    paths = gen_fixture(spec, Path(tmp) / "fixture")
    manifest = json.loads(paths["manifest"].read_text())
    print("files written:", sorted(p.name for p in paths["manifest"].parent.iterdir()))
    print("digest of base.ta:", manifest["digests"]["base.ta"][:16], "...")
