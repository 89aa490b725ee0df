"""Synthetic graph streams: Zipf profiles, meta-training tasks and Zipf edge streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from crane.rng import make_rng


def zipf_weights(alpha: float, k: int) -> np.ndarray:
    """p_r proportional to r**-alpha over ranks 1..k, normalised to sum 1."""
    if k < 1:
        raise ValueError(f"need at least one rank, got {k}")
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    p = np.arange(1, k + 1, dtype=np.float64) ** -float(alpha)
    return p / p.sum()


def zipf_sample(rng: np.random.Generator, alpha: float, k: int, size: int) -> np.ndarray:
    """0-based ranks drawn from Zipf(alpha) over k ranks by inverse CDF."""
    cdf = np.cumsum(zipf_weights(alpha, k))
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(size), side="right")


@dataclass
class TaskConfig:
    max_length: int = 60_000
    alpha_min: float = 0.3
    alpha_max: float = 0.8
    weight_min: float = 5.0
    weight_max: float = 50.0
    id_space: int = 2**20
    family: str = "zipf"
    min_length: int = 1

    def __post_init__(self):
        if self.max_length < 1 or not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if not 0 <= self.alpha_min <= self.alpha_max:
            raise ValueError("need 0 <= alpha_min <= alpha_max")
        if not 0 < self.weight_min <= self.weight_max:
            raise ValueError("weight multiplier range must be positive and ordered")
        if self.id_space < 1:
            raise ValueError("id space must be non-empty")
        if self.family not in ("zipf", "uniform"):
            raise ValueError(f"unknown weight family {self.family!r}")


@dataclass
class Task:
    """Support stream plus the distinct-edge query set with exact totals."""

    origins: np.ndarray
    destinations: np.ndarray
    weights: np.ndarray
    query_origins: np.ndarray
    query_destinations: np.ndarray
    truths: np.ndarray
    alpha: float = float("nan")

    def __len__(self):
        return len(self.weights)


def aggregate_edges(origins, destinations, weights):
    """Distinct edges in first-seen order with their summed weights."""
    o = np.asarray(origins, dtype=np.uint64)
    d = np.asarray(destinations, dtype=np.uint64)
    keys = np.stack([o, d], axis=1)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    totals = np.zeros(len(uniq))
    np.add.at(totals, inverse.reshape(-1), np.asarray(weights, dtype=np.float64))
    order = np.argsort(first, kind="stable")
    return uniq[order, 0], uniq[order, 1], totals[order]


def weight_profile(rng, length: int, family: str, alpha: float) -> np.ndarray:
    """Normalised per-update weights summing to 1."""
    if family == "uniform":
        raw = rng.random(length)
        if raw.sum() == 0.0:
            raw = np.ones(length)
    else:
        pmf = zipf_weights(alpha, length)
        raw = pmf[zipf_sample(rng, alpha, length, length)]
    return raw / raw.sum()


def generate_task(cfg: TaskConfig, seed, index=0, alpha=None, length=None) -> Task:
    """Draw length, exponent, endpoints, profile and total weight for one task.

    ``index`` selects an independent task under the same seed; ``alpha`` and
    ``length`` override the random draws (held-out evaluation).
    """
    rng = make_rng(seed, "task", index)
    n = int(rng.integers(cfg.min_length, cfg.max_length + 1)) if length is None else int(length)
    a = float(rng.uniform(cfg.alpha_min, cfg.alpha_max)) if alpha is None else float(alpha)
    origins = rng.integers(0, cfg.id_space, n).astype(np.uint64)
    destinations = rng.integers(0, cfg.id_space, n).astype(np.uint64)
    profile = weight_profile(rng, n, cfg.family, a)
    total = np.exp(rng.uniform(np.log(cfg.weight_min * n), np.log(cfg.weight_max * n)))
    weights = total * profile
    qo, qd, truths = aggregate_edges(origins, destinations, weights)
    return Task(origins, destinations, weights, qo, qd, truths, a)


def zipf_stream(seed, n_updates: int, alpha: float, n_edges: int, id_space=2**20):
    """Unit-weight updates whose edge is drawn by Zipf(alpha) rank from a random edge pool."""
    rng = make_rng(seed, "zipf-stream")
    pool_o = rng.integers(0, id_space, n_edges).astype(np.uint64)
    pool_d = rng.integers(0, id_space, n_edges).astype(np.uint64)
    ranks = zipf_sample(rng, alpha, n_edges, n_updates)
    return pool_o[ranks], pool_d[ranks], np.ones(n_updates)
