"""How training memory grows with sequence length.

Counts the scalars each model keeps for its backward pass at a few
lengths.  The recurrent model grows linearly; attention carries a T*T term
per layer.  At streaming inference the recurrent state does not grow.
"""
from ssmkt.bench import format_table, run_bench, scalar_ratio

records = run_bench(("mamba", "attention"), (64, 128, 256), d_model=64, n_layers=2, timing=False)
print(format_table(records))
for model in ("mamba", "attention"):
    print(f"{model}: 128 -> 256 ratio {scalar_ratio(records, model, 128, 256):.3f}")
print("recurrent state:", sorted({r.state_scalars for r in records if r.model == "mamba"}), "scalars")
