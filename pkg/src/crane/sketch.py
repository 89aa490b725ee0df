"""Hierarchical neural sketch: store, query, carry and automatic expansion."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from crane._kernels import CARRY_RTOL, carry_stream, min_ratio_rows
from crane.autodiff import Tensor, floor_div_clip
from crane.encoders import DEFAULT_EPS, EMBED_DIM, LayerEncoders
from crane.rng import make_rng

BYTES_PER_CELL = 4  # budget is accounted at 32-bit state
_CHUNK = 8192


class EdgeUpdate(NamedTuple):
    origin: int
    destination: int
    weight: float = 1.0


@dataclass
class SketchConfig:
    theta: float = 4.0
    tau: float | None = None
    n_max: int = 4
    eps: float = DEFAULT_EPS
    batch_size: int = 4
    carry_mode: str = "minibatch"
    expand: bool = True
    initial_layers: int = 1

    def __post_init__(self):
        if self.tau is None:
            self.tau = self.theta
        if not self.theta > 1:
            raise ValueError(f"theta must exceed 1, got {self.theta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.n_max < 1 or not 1 <= self.initial_layers <= self.n_max:
            raise ValueError("need 1 <= initial_layers <= n_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.carry_mode not in ("minibatch", "sequential"):
            raise ValueError(f"unknown carry mode {self.carry_mode!r}")

    @property
    def stream_batch(self) -> int:
        return 1 if self.carry_mode == "sequential" else self.batch_size


class CraneSketch:
    """Per-layer encoders, layer memories and a linear decoder over layer estimates.

    Memories are held as float64 for arithmetic; byte accounting and the model
    file use 32 bits per cell.
    """

    def __init__(self, encoders: LayerEncoders, decoder_w, decoder_b, config: SketchConfig):
        if len(encoders) != config.n_max:
            raise ValueError(f"{len(encoders)} encoder pairs for n_max={config.n_max}")
        self.encoders = encoders
        self.config = config
        self.decoder_w = Tensor(np.asarray(decoder_w, dtype=np.float64).reshape(config.n_max),
                                requires_grad=True)
        self.decoder_b = Tensor(np.asarray(decoder_b, dtype=np.float64).reshape(()),
                                requires_grad=True)
        self.height = self.width = EMBED_DIM
        self.memories = np.zeros((config.n_max, self.height, self.width))
        # stored weight held at each layer, in edge-count units
        self.unit_mass = np.zeros(config.n_max)
        self.layers = config.initial_layers

    @classmethod
    def random(cls, seed=0, config: SketchConfig | None = None, id_space=2**20,
               calibration_size=4096):
        """Freshly initialised sketch with geometric decoder weights theta**(i-1).

        Batch-norm running statistics are calibrated on random ids, and every
        value is rounded to 32-bit precision so the model file is lossless.
        """
        config = copy.copy(config) if config is not None else SketchConfig()
        rng = make_rng(seed, "encoders")
        calib = make_rng(seed, "calibration").integers(0, id_space, calibration_size)
        encoders = LayerEncoders(config.n_max, rng, calibration_ids=calib)
        w = config.theta ** np.arange(config.n_max)
        model = cls(encoders, w, 0.0, config)
        model.quantize()
        return model

    # -- state -------------------------------------------------------------

    @property
    def theta(self) -> float:
        return self.config.theta

    def parameters(self) -> list:
        return self.encoders.parameters() + [self.decoder_w, self.decoder_b]

    def reset(self):
        self.memories[:] = 0.0
        self.unit_mass[:] = 0.0
        self.layers = self.config.initial_layers

    def quantize(self):
        """Round parameters, statistics, thresholds and memories to 32-bit precision.

        After this the in-memory model equals what the model file stores.
        """
        for net in self.encoders.nets():
            net.quantize()
        for t in (self.decoder_w, self.decoder_b):
            t.data = t.data.astype(np.float32).astype(np.float64)
        self.memories[:] = self.memories.astype(np.float32)
        self.unit_mass[:] = self.unit_mass.astype(np.float32)
        cfg = self.config
        cfg.theta, cfg.tau, cfg.eps = (float(np.float32(v)) for v in (cfg.theta, cfg.tau, cfg.eps))

    def total_mass(self) -> float:
        """Theta-weighted stored weight ``sum_i theta**(i-1) * unit_mass[i]``.

        Carries move ``theta*T`` units per edge out of layer i and ``T`` units
        into layer i+1, so this equals the total weight ever stored.
        """
        weights = self.theta ** np.arange(self.config.n_max)
        return float(weights @ self.unit_mass)

    def load_indicator(self) -> float:
        """Average mass per cell of the current top layer."""
        return float(self.memories[self.layers - 1].mean())

    @property
    def reserved_bytes(self) -> int:
        return self.config.n_max * self.height * self.width * BYTES_PER_CELL

    @property
    def active_bytes(self) -> int:
        return self.layers * self.height * self.width * BYTES_PER_CELL

    # -- store -------------------------------------------------------------

    def ingest(self, origins, destinations, weights=None, batch_size=None):
        """Store a whole stream in arrival order using the configured carry mode."""
        origins = np.asarray(origins, dtype=np.uint64)
        destinations = np.asarray(destinations, dtype=np.uint64)
        n = len(origins)
        weights = (np.ones(n) if weights is None
                   else np.asarray(weights, dtype=np.float64).reshape(n))
        if np.any(weights < 0):
            raise ValueError("edge weights must be non-negative")
        b = batch_size or self.config.stream_batch
        chunk = max(b, (_CHUNK // b) * b)
        for start in range(0, n, chunk):
            sl = slice(start, start + chunk)
            emb_o, emb_d, io, idd = self.encoders.embed_tables(origins[sl], destinations[sl])
            coef = np.zeros((self.config.n_max, len(io)))
            self.layers = carry_stream(
                self.memories, self.layers, emb_o, emb_d, io, idd, weights[sl], b,
                float(self.theta), float(self.config.tau), float(self.config.eps),
                self.config.expand, coef, True)
            self.unit_mass += coef.sum(axis=1)

    def store(self, edge: EdgeUpdate):
        """Insert one edge: add to layer 1, carry upward, then check expansion."""
        o, d, w = edge
        self.ingest([o], [d], [w], batch_size=1)

    def store_batch(self, batch):
        """Insert a mini-batch with one conservative carry decision per layer."""
        if len(batch) == 0:
            raise ValueError("store_batch needs at least one edge")
        o, d, w = zip(*batch)
        self.ingest(o, d, w, batch_size=len(batch))

    # -- reference carry steps (numpy; the kernel is the fast path) ----------

    def _bases(self, origins, destinations, weights=None):
        """Unweighted aggregated bases of an edge set at every layer."""
        origins = np.atleast_1d(np.asarray(origins, dtype=np.uint64))
        destinations = np.atleast_1d(np.asarray(destinations, dtype=np.uint64))
        if weights is not None:
            keep = np.asarray(weights, dtype=np.float64) > 0
            origins, destinations = origins[keep], destinations[keep]
        out = np.zeros((self.config.n_max, self.height, self.width))
        for i in range(self.config.n_max):
            eo = self.encoders.origin[i].embed(origins)
            ed = self.encoders.destination[i].embed(destinations)
            out[i] = eo.T @ ed + self.config.eps * len(origins)
        return out

    def _carry_chain(self, layer: int, bases, n_edges: int) -> list:
        promoted = []
        i = layer
        while True:
            ratio = float((self.memories[i] / bases[i]).min())
            t = floor_div_clip(ratio, self.theta, CARRY_RTOL)
            if t == 0 or i + 1 >= self.layers:
                break
            self.memories[i + 1] += t * bases[i + 1]
            self.memories[i] = np.maximum(self.memories[i] - self.theta * t * bases[i], 0.0)
            self.unit_mass[i] -= self.theta * t * n_edges
            self.unit_mass[i + 1] += t * n_edges
            promoted.append(t)
            i += 1
        return promoted

    def carry_sequential(self, layer: int, edge) -> list:
        """Run the carry chain for one edge starting at ``layer`` (0-based).

        Returns the carry factors applied at each step, bottom first.
        """
        o, d = edge[0], edge[1]
        return self._carry_chain(layer, self._bases([o], [d]), 1)

    def carry_minibatch(self, layer: int, batch) -> list:
        """Carry chain for a mini-batch using its aggregated basis."""
        o, d, w = zip(*[(e[0], e[1], e[2] if len(e) > 2 else 1.0) for e in batch])
        return self._carry_chain(layer, self._bases(o, d, w), sum(x > 0 for x in w))

    def expand_if_saturated(self) -> bool:
        if self.load_indicator() > self.config.tau and self.layers < self.config.n_max:
            self.memories[self.layers] = 0.0
            self.layers += 1
            return True
        return False

    # -- query -------------------------------------------------------------

    def layer_estimates(self, origins, destinations) -> np.ndarray:
        """q vectors, shape (n, n_max); inactive layers read 0."""
        origins = np.atleast_1d(np.asarray(origins, dtype=np.uint64))
        destinations = np.atleast_1d(np.asarray(destinations, dtype=np.uint64))
        n = len(origins)
        q = np.zeros((n, self.config.n_max))
        for start in range(0, n, _CHUNK):
            sl = slice(start, start + _CHUNK)
            emb_o, emb_d, io, idd = self.encoders.embed_tables(
                origins[sl], destinations[sl], n_layers=self.layers)
            for i in range(self.layers):
                q[sl, i], _ = min_ratio_rows(self.memories[i], emb_o[i][io], emb_d[i][idd],
                                             float(self.config.eps))
        return q

    def query_many(self, origins, destinations) -> np.ndarray:
        q = self.layer_estimates(origins, destinations)
        return q @ self.decoder_w.data + float(self.decoder_b.data)

    def query(self, edge) -> float:
        return float(self.query_many([edge[0]], [edge[1]])[0])

    def node_flux(self, incident_edges) -> float:
        """Sum of edge estimates over caller-supplied incident (origin, destination) pairs."""
        if len(incident_edges) == 0:
            return 0.0
        o, d = zip(*[(e[0], e[1]) for e in incident_edges])
        return float(self.query_many(o, d).sum())
