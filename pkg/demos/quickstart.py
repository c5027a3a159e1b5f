"""Generate a small synthetic dataset, train variant f briefly, then evaluate it.

Runs in well under a minute:  python demos/quickstart.py
"""

from gdpnet import SynthConfig, TrainConfig, evaluate, generate_synthetic_dataset, in_memory_dataset, train
from gdpnet.data import linear_oracle_error, zero_displacement_error

synth = SynthConfig(sentences=6, frames=60, N=162)
ds = in_memory_dataset(generate_synthetic_dataset(synth))
print("split:", {p: len(ds.part(p)) for p in ("train", "val", "test")}, "sequences")

res = train(TrainConfig(epochs=10, variant="f"), ds)
for row in res.metrics[::3]:
    print(f"epoch {row['epoch']:2d}  loss {row['L']:.4f}  val {row['val_mse']:.4f}")

test = ds.part("test")
report = evaluate(res.model, ds, [("gaussian", 0.1), ("dropout", 0.1)])
print(f"test error {report.overall['test']:.4f}")
print(f"  zero-displacement baseline {zero_displacement_error(test):.4f}")
print(f"  linear oracle {linear_oracle_error(ds.part('train'), test, ds.part('val')):.4f}")
for r in report.noise_rows:
    print(f"  with {r['kind']} {r['level']:g}: {r['error']:.4f}")
