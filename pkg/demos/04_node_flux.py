# %% [markdown]
# Node flux from edge queries
#
# The out-flux of a node is the sum of its outgoing edge weights. The sketch
# answers it by summing edge estimates over the node's known out-edges.

# %%
from pathlib import Path

import numpy as np

from crane.baselines import ExactCounter
from crane.io import load_model
from crane.sketch import CraneSketch
from crane.synthetic import zipf_stream

origins, destinations, weights = zipf_stream(seed=4, n_updates=30_000, alpha=1.1, n_edges=3_000,
                                               id_space=200)
path = Path(__file__).resolve().parent.parent / "artifacts" / "desk.crne"
sketch = load_model(path)[0] if path.exists() else CraneSketch.random(0)
sketch.ingest(origins, destinations, weights)
exact = ExactCounter()
exact.ingest(origins, destinations, weights)

# %%
edge_o, edge_d, _ = exact.edges()
busiest = np.unique(origins, return_counts=True)
for node in busiest[0][np.argsort(busiest[1])[-5:]]:
    out_edges = list(zip(edge_o[edge_o == node], edge_d[edge_o == node]))
    print(f"node {int(node)}: {len(out_edges)} out-edges, true flux "
          f"{exact.node_flux(node, 'out'):.0f}, sketch {sketch.node_flux(out_edges):.1f}")
