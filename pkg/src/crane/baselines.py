"""Exact edge counter and hash-based baselines (TCM, Count-Min) under a byte budget."""

from __future__ import annotations

from collections import defaultdict

import numpy as np

from crane.rng import make_rng

COUNTER_BYTES = 4
_MASK64 = (1 << 64) - 1


class ExactCounter:
    """Lossless map (origin, destination) -> cumulative weight."""

    def __init__(self):
        self.counts = defaultdict(float)

    def insert(self, origin, destination, weight=1.0):
        self.counts[(int(origin), int(destination))] += float(weight)

    def ingest(self, origins, destinations, weights=None):
        weights = np.ones(len(origins)) if weights is None else weights
        for o, d, w in zip(np.asarray(origins).tolist(), np.asarray(destinations).tolist(),
                           np.asarray(weights, dtype=np.float64).tolist()):
            self.counts[(o, d)] += w

    def query(self, origin, destination) -> float:
        return self.counts.get((int(origin), int(destination)), 0.0)

    def query_many(self, origins, destinations) -> np.ndarray:
        return np.array([self.counts.get((o, d), 0.0) for o, d in
                         zip(np.asarray(origins).tolist(), np.asarray(destinations).tolist())])

    def node_flux(self, node, direction="out") -> float:
        pos = 0 if direction == "out" else 1
        return float(sum(w for key, w in self.counts.items() if key[pos] == node))

    def edges(self):
        """Distinct edges in first-seen order with their totals: (origins, destinations, totals)."""
        keys = list(self.counts)
        o = np.array([k[0] for k in keys], dtype=np.uint64)
        d = np.array([k[1] for k in keys], dtype=np.uint64)
        return o, d, np.array([self.counts[k] for k in keys])

    def __len__(self):
        return len(self.counts)

    @property
    def bytes_used(self) -> int:
        return 0


class MultiplyShiftHash:
    """h(x) = ((a*x + b) mod 2**64 >> 32) * m >> 32 with odd 64-bit ``a``.

    The top 32 bits of the multiply-shift product are mapped onto [0, m) by a
    second multiply-shift, so ``m`` need not be a power of two.
    """

    def __init__(self, m: int, a: int, b: int):
        if m < 1:
            raise ValueError("hash range must be at least 1")
        self.m, self.a, self.b = int(m), int(a) | 1, int(b) & _MASK64

    @classmethod
    def seeded(cls, m: int, seed, label) -> "MultiplyShiftHash":
        a, b = make_rng(seed, "hash", label).integers(0, 2**63, 2, dtype=np.uint64)
        return cls(m, (int(a) << 1) | 1, int(b))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.uint64)
        with np.errstate(over="ignore"):
            top = (np.uint64(self.a) * x + np.uint64(self.b)) >> np.uint64(32)
            return ((top * np.uint64(self.m)) >> np.uint64(32)).astype(np.int64)


class TCMSketch:
    """m x m adjacency-matrix sketch with one node hash shared by both endpoints."""

    def __init__(self, m: int, hash_fn=None, seed=0):
        self.m = int(m)
        self.hash = hash_fn or MultiplyShiftHash.seeded(self.m, seed, "tcm")
        self.counters = np.zeros((self.m, self.m))

    @classmethod
    def for_budget(cls, budget_bytes: int, seed=0) -> "TCMSketch":
        m = int(np.floor(np.sqrt(budget_bytes / COUNTER_BYTES)))
        if m < 1:
            raise ValueError(f"budget {budget_bytes} B is below one counter")
        return cls(m, seed=seed)

    @property
    def bytes_used(self) -> int:
        return self.m * self.m * COUNTER_BYTES

    def ingest(self, origins, destinations, weights=None):
        weights = np.ones(len(origins)) if weights is None else np.asarray(weights, np.float64)
        np.add.at(self.counters, (self.hash(origins), self.hash(destinations)), weights)

    def insert(self, origin, destination, weight=1.0):
        self.ingest([origin], [destination], [weight])

    def query_many(self, origins, destinations) -> np.ndarray:
        return self.counters[self.hash(origins), self.hash(destinations)]

    def query(self, origin, destination) -> float:
        return float(self.query_many([origin], [destination])[0])

    def node_flux(self, node, direction="out") -> float:
        h = int(self.hash([node])[0])
        return float(self.counters[h].sum() if direction == "out" else self.counters[:, h].sum())


class CountMinSketch:
    """d hashed rows of ``width`` counters over the 64-bit edge key; query takes the row minimum."""

    def __init__(self, depth: int, width: int, seed=0, hash_fns=None):
        if depth < 1 or width < 1:
            raise ValueError("depth and width must be at least 1")
        self.depth, self.width = int(depth), int(width)
        self.hashes = hash_fns or [MultiplyShiftHash.seeded(self.width, seed, f"cms{r}")
                                   for r in range(self.depth)]
        self.counters = np.zeros((self.depth, self.width))

    @classmethod
    def for_budget(cls, budget_bytes: int, depth=3, seed=0) -> "CountMinSketch":
        width = budget_bytes // (COUNTER_BYTES * depth)
        if width < 1:
            raise ValueError(f"budget {budget_bytes} B is below one counter row")
        return cls(depth, width, seed=seed)

    @property
    def bytes_used(self) -> int:
        return self.depth * self.width * COUNTER_BYTES

    @staticmethod
    def edge_key(origins, destinations) -> np.ndarray:
        o = np.asarray(origins, dtype=np.uint64) & np.uint64(0xFFFFFFFF)
        d = np.asarray(destinations, dtype=np.uint64) & np.uint64(0xFFFFFFFF)
        return (o << np.uint64(32)) | d

    def ingest(self, origins, destinations, weights=None):
        weights = np.ones(len(origins)) if weights is None else np.asarray(weights, np.float64)
        key = self.edge_key(origins, destinations)
        for r, h in enumerate(self.hashes):
            np.add.at(self.counters[r], h(key), weights)

    def insert(self, origin, destination, weight=1.0):
        self.ingest([origin], [destination], [weight])

    def query_many(self, origins, destinations) -> np.ndarray:
        key = self.edge_key(origins, destinations)
        return np.min([self.counters[r, h(key)] for r, h in enumerate(self.hashes)], axis=0)

    def query(self, origin, destination) -> float:
        return float(self.query_many([origin], [destination])[0])
