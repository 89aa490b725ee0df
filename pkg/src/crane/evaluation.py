"""Error metrics, equal-budget benchmark runs and the expansion-scaling study."""

from __future__ import annotations

import copy
import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from crane.baselines import CountMinSketch, ExactCounter, TCMSketch
from crane.sketch import CraneSketch, SketchConfig
from crane.synthetic import aggregate_edges

METHODS = ("crane", "tcm", "cms", "exact")


class BudgetError(ValueError):
    """A method cannot fit in, or exceeded, its byte budget."""


def metrics(estimates, truths):
    """(AAE, ARE); ARE skips entries whose truth is 0."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise ValueError("empty query set")
    err = np.abs(est - tru)
    nz = tru != 0
    are = float(np.mean(err[nz] / np.abs(tru[nz]))) if nz.any() else 0.0
    return float(err.mean()), are


@dataclass
class MethodResult:
    method: str
    aae: float
    are: float
    bytes_used: int
    store_ops_per_sec: float
    query_ops_per_sec: float


@dataclass
class BenchmarkReport:
    results: list
    metadata: dict = field(default_factory=dict)

    def by_method(self) -> dict:
        return {r.method: r for r in self.results}

    def to_tsv(self) -> str:
        lines = ["method\taae\tare\tbytes_used\tstore_ops_per_sec\tquery_ops_per_sec"]
        for r in self.results:
            lines.append(f"{r.method}\t{r.aae:.6g}\t{r.are:.6g}\t{r.bytes_used}\t"
                         f"{r.store_ops_per_sec:.1f}\t{r.query_ops_per_sec:.1f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """One ``[method]`` record per method followed by a ``[run]`` metadata record."""
        blocks = []
        for r in self.results:
            blocks.append("\n".join([f"[{r.method}]"] + [f"{k} = {v}" for k, v in vars(r).items()
                                                         if k != "method"]))
        blocks.append("\n".join(["[run]"] + [f"{k} = {v}" for k, v in self.metadata.items()]))
        return "\n\n".join(blocks) + "\n"


def stream_digest(origins, destinations, weights) -> str:
    h = hashlib.sha256()
    for arr, dtype in ((origins, np.uint64), (destinations, np.uint64), (weights, np.float64)):
        h.update(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return h.hexdigest()


def _build(method, budget, model, seed):
    if method == "crane":
        if model is None:
            raise ValueError("crane needs a model")
        sketch = copy.deepcopy(model)
        sketch.reset()
        if sketch.reserved_bytes > budget:
            raise BudgetError(f"crane needs {sketch.reserved_bytes} B, budget is {budget} B")
        return sketch
    try:
        if method == "tcm":
            return TCMSketch.for_budget(budget, seed=seed)
        if method == "cms":
            return CountMinSketch.for_budget(budget, seed=seed)
    except ValueError as exc:
        raise BudgetError(str(exc)) from None
    if method == "exact":
        return ExactCounter()
    raise ValueError(f"unknown method {method!r}")


def _bytes_used(sketch) -> int:
    if isinstance(sketch, CraneSketch):
        return sketch.reserved_bytes
    return sketch.bytes_used


def run_benchmark(origins, destinations, weights=None, methods=("crane", "tcm", "cms"),
                  budget=65536, model: CraneSketch | None = None, seed=0) -> BenchmarkReport:
    """Feed one stream to every method and the exact oracle; query all distinct edges.

    Crane bytes count its reserved layer memories at 32 bits per cell; model
    weights are shared across streams and not charged to the budget.
    """
    origins = np.asarray(origins, dtype=np.uint64)
    destinations = np.asarray(destinations, dtype=np.uint64)
    weights = np.ones(len(origins)) if weights is None else np.asarray(weights, np.float64)
    digest = stream_digest(origins, destinations, weights)
    qo, qd, truths = aggregate_edges(origins, destinations, weights)
    results = []
    for method in methods:
        sketch = _build(method, budget, model, seed)
        if stream_digest(origins, destinations, weights) != digest:
            raise RuntimeError("stream changed between methods")
        t0 = time.perf_counter()
        sketch.ingest(origins, destinations, weights)
        t1 = time.perf_counter()
        est = sketch.query_many(qo, qd)
        t2 = time.perf_counter()
        used = _bytes_used(sketch)
        if used > budget:
            raise BudgetError(f"{method} used {used} B over a {budget} B budget")
        aae, are = metrics(est, truths)
        results.append(MethodResult(method, aae, are, used,
                                    len(origins) / max(t1 - t0, 1e-12),
                                    len(qo) / max(t2 - t1, 1e-12)))
    meta = {"seed": seed, "stream_length": len(origins), "distinct_edges": len(qo),
            "budget_bytes": budget, "stream_sha256": digest,
            "byte_accounting": "layer memories at 32-bit cells; model weights excluded"}
    if model is not None:
        meta.update(theta=model.config.theta, n_max=model.config.n_max,
                    batch_size=model.config.stream_batch)
    return BenchmarkReport(results, meta)


def expansion_study(model: CraneSketch, streams, n_max=16) -> list:
    """Active layer count after ingesting each stream with auto-expansion up to ``n_max``.

    ``streams`` yields (origins, destinations, weights) triples. Layers beyond
    the model's own use freshly initialised encoders.
    """
    counts = []
    for origins, destinations, weights in streams:
        sketch = widen(model, n_max)
        sketch.ingest(origins, destinations, weights)
        counts.append(sketch.layers)
    return counts


def widen(model: CraneSketch, n_max: int, seed=0) -> CraneSketch:
    """Copy of ``model`` with room for ``n_max`` layers; extra layers get fresh encoders."""
    if n_max <= model.config.n_max:
        sketch = copy.deepcopy(model)
        sketch.reset()
        return sketch
    cfg = copy.copy(model.config)
    cfg.n_max = n_max
    fresh = CraneSketch.random(seed, SketchConfig(**{**vars(cfg)}))
    k = model.config.n_max
    fresh.encoders.origin[:k] = copy.deepcopy(model.encoders.origin)
    fresh.encoders.destination[:k] = copy.deepcopy(model.encoders.destination)
    w = cfg.theta ** np.arange(n_max)
    w[:k] = model.decoder_w.data
    fresh.decoder_w.data = w
    fresh.decoder_b.data = model.decoder_b.data.copy()
    return fresh
