"""Node-id encoders and basis matrices.

Each memory layer owns two MLPs (origin role and destination role) mapping a
32-bit binary node code to a non-negative 64-vector. An edge's basis matrix at
that layer is the outer product of its two embeddings plus a small ``eps``.
"""

from __future__ import annotations

import numpy as np

from crane import autodiff as ad
from crane._kernels import encoder_infer
from crane.autodiff import BatchNormState, Tensor

CODE_BITS = 32
ENCODER_DIMS = (32, 16, 36, 64)
EMBED_DIM = ENCODER_DIMS[-1]
DEFAULT_EPS = 1e-6


def binary_encode(node_ids) -> np.ndarray:
    """LSB-first 32-bit codes, one row per id. Ids are reduced mod 2**32."""
    ids = np.atleast_1d(np.asarray(node_ids, dtype=np.uint64)) & np.uint64(0xFFFFFFFF)
    shifts = np.arange(CODE_BITS, dtype=np.uint64)
    return ((ids[:, None] >> shifts) & np.uint64(1)).astype(np.float64)


def basis(e_o, e_d, eps=DEFAULT_EPS) -> np.ndarray:
    """A = outer(e_o, e_d) + eps."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    e_o = np.asarray(e_o, dtype=np.float64)
    e_d = np.asarray(e_d, dtype=np.float64)
    if np.any(e_o < 0) or np.any(e_d < 0):
        raise ValueError("embeddings must be non-negative")
    return np.outer(e_o, e_d) + eps


class EncoderNet:
    """32 -> 16 -> 36 -> 64 MLP; batch norm after the first two layers, ReLU after all three."""

    PARAM_NAMES = ("w1", "b1", "g1", "s1", "w2", "b2", "g2", "s2", "w3", "b3")

    def __init__(self, rng: np.random.Generator):
        d0, d1, d2, d3 = ENCODER_DIMS
        self.params = {}
        for tag, (fan_in, fan_out) in zip("123", ((d0, d1), (d1, d2), (d2, d3))):
            bound = np.sqrt(6.0 / fan_in)
            self.params["w" + tag] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                                            requires_grad=True)
            self.params["b" + tag] = Tensor(np.zeros(fan_out), requires_grad=True)
        for tag, dim in (("1", d1), ("2", d2)):
            self.params["g" + tag] = Tensor(np.ones(dim), requires_grad=True)
            self.params["s" + tag] = Tensor(np.zeros(dim), requires_grad=True)
        self.bn = [BatchNormState.fresh(d1), BatchNormState.fresh(d2)]

    def parameters(self) -> list:
        return [self.params[name] for name in self.PARAM_NAMES]

    def forward(self, codes, mode: str = "infer") -> Tensor:
        p = self.params
        x = codes if isinstance(codes, Tensor) else Tensor(codes)
        x = ad.add(ad.matmul(x, p["w1"]), p["b1"])
        x = ad.relu(ad.batchnorm(x, p["g1"], p["s1"], self.bn[0], mode))
        x = ad.add(ad.matmul(x, p["w2"]), p["b2"])
        x = ad.relu(ad.batchnorm(x, p["g2"], p["s2"], self.bn[1], mode))
        x = ad.add(ad.matmul(x, p["w3"]), p["b3"])
        return ad.relu(x)

    def embed(self, node_ids) -> np.ndarray:
        """Inference-mode embeddings of raw node ids, shape (n, 64).

        Rows are computed independently, so an id's embedding does not depend
        on which other ids share the call.
        """
        p = {k: t.data for k, t in self.params.items()}
        bn1, bn2 = self.bn
        return encoder_infer(binary_encode(node_ids),
                             p["w1"], p["b1"], bn1.running_mean, bn1.running_var, p["g1"], p["s1"],
                             p["w2"], p["b2"], bn2.running_mean, bn2.running_var, p["g2"], p["s2"],
                             p["w3"], p["b3"], bn1.eps)

    def calibrate(self, codes: np.ndarray):
        """Set running statistics to the exact batch statistics of ``codes``."""
        saved = [bn.momentum for bn in self.bn]
        for bn in self.bn:
            bn.momentum = 1.0
        try:
            self.forward(codes, "train")
        finally:
            for bn, m in zip(self.bn, saved):
                bn.momentum = m

    def quantize(self):
        """Round parameters and running statistics to float32 precision."""
        for t in self.params.values():
            t.data = t.data.astype(np.float32).astype(np.float64)
        for bn in self.bn:
            bn.running_mean = bn.running_mean.astype(np.float32).astype(np.float64)
            bn.running_var = bn.running_var.astype(np.float32).astype(np.float64)


class LayerEncoders:
    """Independent (origin, destination) encoder pairs, one per memory layer."""

    def __init__(self, n_layers: int, rng: np.random.Generator, calibration_ids=None):
        self.origin = [EncoderNet(rng) for _ in range(n_layers)]
        self.destination = [EncoderNet(rng) for _ in range(n_layers)]
        if calibration_ids is not None:
            codes = binary_encode(calibration_ids)
            for net in self.nets():
                net.calibrate(codes)

    def __len__(self):
        return len(self.origin)

    def nets(self):
        """Networks in serialization order: layer by layer, origin before destination."""
        for o, d in zip(self.origin, self.destination):
            yield o
            yield d

    def parameters(self) -> list:
        return [t for net in self.nets() for t in net.parameters()]

    def embed_tables(self, origins, destinations, n_layers=None):
        """Embed unique ids once per layer.

        Returns ``(emb_o, emb_d, idx_o, idx_d)`` with ``emb_*`` shaped
        (layers, n_unique, 64) and ``idx_*`` mapping each input position to
        its row.
        """
        n_layers = len(self) if n_layers is None else n_layers
        uo, idx_o = np.unique(np.asarray(origins, dtype=np.uint64), return_inverse=True)
        ud, idx_d = np.unique(np.asarray(destinations, dtype=np.uint64), return_inverse=True)
        emb_o = np.zeros((len(self), len(uo), EMBED_DIM))
        emb_d = np.zeros((len(self), len(ud), EMBED_DIM))
        for i in range(n_layers):
            emb_o[i] = self.origin[i].embed(uo)
            emb_d[i] = self.destination[i].embed(ud)
        return emb_o, emb_d, idx_o.astype(np.int64), idx_d.astype(np.int64)
