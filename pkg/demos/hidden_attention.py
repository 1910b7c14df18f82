"""Read an S6 layer as an implicit causal attention matrix.

Trains nothing: a freshly initialised model is enough to show that the
materialised matrix reproduces the layer output exactly, and how the
sequence- and exercise-level weights are derived from it.
"""
import numpy as np

from ssmkt import ModelConfig, build_model, exercise_weights, materialize_alpha, sequence_weights
from ssmkt.interpret import exercise_labels, layer_trace, reconstruct

cfg = ModelConfig(n_questions=20, n_concepts=4, d_model=8, n_layers=2, n_state=4)
model = build_model(cfg, seed=3)
rng = np.random.default_rng(3)
q = rng.integers(0, 20, 12)
c, r = q % 4, rng.integers(0, 2, 12)

tr = layer_trace(model, q, c, r, layer=0)
alpha = materialize_alpha(tr["Abar"], tr["Bbar"], tr["C"], skip=tr["D"])
print("alpha shape (channels, i, j):", alpha.shape)
err = np.max(np.abs(reconstruct(alpha, tr["x"]) - tr["y"]))
print(f"max |alpha @ x - y| = {err:.2e}")

w = sequence_weights(alpha)
print(f"defined rows in channel 0: {int(w.defined[0].sum())} of {len(q)}")
row = w.gamma[0, 5, :5]
print("channel 0, step 5 weights on the past:", np.round(row, 3), "sum", round(float(row.sum()), 12))

labels = exercise_labels(c, r)
ex = exercise_weights(alpha, 11)
print("most influential past steps for step 11:")
for j, g in ex.top_k(3):
    print(f"  step {j:2d} {labels[j]:>5}  weight {g:.3f}")
