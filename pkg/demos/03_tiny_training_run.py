# %% [markdown]
# A small meta-training run
#
# Each task is a fresh synthetic stream: memories are reset, the stream is
# stored, every distinct edge is queried and the mean absolute error is
# back-propagated into the encoders and the decoder.

# %%
import numpy as np

from crane.sketch import SketchConfig
from crane.synthetic import TaskConfig, generate_task
from crane.training import TrainConfig, run_task, train

task_cfg = TaskConfig(max_length=2000)
cfg = TrainConfig(n_tasks=60, steps_per_task=1, max_queries=512, sketch=SketchConfig())
model, losses = train(cfg, task_cfg)
print("loss, first vs last 10 tasks:", losses[:10].mean().round(2), losses[-10:].mean().round(2))
print("decoder w", model.decoder_w.data, "b", float(model.decoder_b.data))

# %%
held_out = generate_task(task_cfg, seed=123)
result = run_task(model, held_out, mode="infer")
rel = np.abs(result.predictions - result.truths) / result.truths
print(f"held-out MAE {result.loss.item():.2f}, ARE {rel.mean():.3f}, layers {result.active_layers}")
