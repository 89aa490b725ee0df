# %% [markdown]
# Accuracy at a 64 KB budget
#
# Crane, TCM and Count-Min each get 65,536 bytes of counter state and see the
# same held-out stream. Uses the desk-trained model when it exists
# (``crane train --config configs/desk.conf --out artifacts/desk.crne``),
# otherwise an untrained one.

# %%
from pathlib import Path

from crane.evaluation import run_benchmark
from crane.io import load_model
from crane.sketch import CraneSketch
from crane.synthetic import TaskConfig, generate_task

path = Path(__file__).resolve().parent.parent / "artifacts" / "desk.crne"
model = load_model(path)[0] if path.exists() else CraneSketch.random(0)
print("model:", path if path.exists() else "untrained")

# %%
for k, length in enumerate((20_000, 40_000, 60_000)):
    task = generate_task(TaskConfig(), seed=77, index=k, length=length)
    report = run_benchmark(task.origins, task.destinations, task.weights, model=model)
    print(f"\n{length} updates, Zipf exponent {task.alpha:.2f}")
    print(report.to_tsv(), end="")
