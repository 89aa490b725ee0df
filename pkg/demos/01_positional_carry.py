# %% [markdown]
# Positional carry on a single edge
#
# With one distinct edge there is nothing to collide with, so each layer's
# min-ratio estimate reads back exactly how many units that layer holds.
# Storing the edge F times leaves the base-4 digits of F in the layers.

# %%
import numpy as np

from crane.sketch import CraneSketch, EdgeUpdate, SketchConfig

config = SketchConfig(theta=4, n_max=3, initial_layers=3, expand=False, carry_mode="sequential")
sketch = CraneSketch.random(seed=0, config=config)

# %%
for freq in (3, 4, 17, 37, 63):
    sketch.reset()
    for _ in range(freq):
        sketch.store(EdgeUpdate(5, 7))
    digits = sketch.layer_estimates([5], [7])[0]
    print(f"F={freq:3d}  layer units {np.round(digits, 6)}  decoded {sketch.query((5, 7)):.6f}")

# %% [markdown]
# 64 = 4**3 no longer fits in three digits; the top layer keeps the overflow.

# %%
sketch.reset()
for _ in range(64):
    sketch.store(EdgeUpdate(5, 7))
print("F=64", np.round(sketch.layer_estimates([5], [7])[0], 6))
