"""Edge-list parsing, the binary model file, key=value configs and report files."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from crane.autodiff import BatchNormState
from crane.encoders import EMBED_DIM, LayerEncoders
from crane.rng import make_rng
from crane.sketch import CraneSketch, SketchConfig
from crane.synthetic import TaskConfig
from crane.training import TrainConfig

log = logging.getLogger(__name__)

MAGIC = b"CRNE"
FORMAT_VERSION = 1
ID_MODULUS = 2**32
_HEADER = struct.Struct("<4sHIIIIIBBfffQ")
_CARRY_MODES = ("minibatch", "sequential")


class ParseError(ValueError):
    """Malformed input line; ``line`` is 1-based."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = path, line


class ModelFormatError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# -- edge lists ------------------------------------------------------------

def _parse_id(token: str, path, line: int) -> tuple:
    if not token.isdigit():
        raise ParseError(path, line, f"node id {token!r} is not an unsigned decimal integer")
    value = int(token)
    return value % ID_MODULUS, value >= ID_MODULUS


def parse_edges(source, require_weight=True):
    """Parse ``origin destination [weight [timestamp]]`` lines.

    ``source`` is a path or an iterable of lines. Blank lines and lines
    starting with ``#`` are skipped. Ids of 2**32 or more are reduced modulo
    2**32 and counted. Returns ``(origins, destinations, weights, reduced)``.
    """
    path = str(source) if isinstance(source, (str, Path)) else "<lines>"
    lines = open(source, encoding="utf-8") if isinstance(source, (str, Path)) else source
    origins, destinations, weights = [], [], []
    reduced = 0
    try:
        for number, raw in enumerate(lines, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            cols = text.split()
            if len(cols) < (3 if require_weight else 2) or len(cols) > 4:
                raise ParseError(path, number, f"expected 3 or 4 columns, got {len(cols)}")
            o, ro = _parse_id(cols[0], path, number)
            d, rd = _parse_id(cols[1], path, number)
            reduced += ro + rd
            w = 1.0
            if len(cols) >= 3:
                try:
                    w = float(cols[2])
                except ValueError:
                    raise ParseError(path, number, f"weight {cols[2]!r} is not a number") from None
                if not math.isfinite(w) or w < 0:
                    raise ParseError(path, number, f"weight {cols[2]!r} must be finite and >= 0")
            origins.append(o)
            destinations.append(d)
            weights.append(w)
    finally:
        if lines is not source:
            lines.close()
    if reduced:
        log.warning("%s: %d node ids reduced modulo 2**32", path, reduced)
    return (np.array(origins, dtype=np.uint64), np.array(destinations, dtype=np.uint64),
            np.array(weights, dtype=np.float64), reduced)


def write_edges(path, origins, destinations, weights):
    with open(path, "w", encoding="utf-8") as fh:
        for o, d, w in zip(origins, destinations, weights):
            fh.write(f"{int(o)} {int(d)} {float(w)!r}\n")


# -- model file --------------------------------------------------------------

def _block(arr) -> bytes:
    data = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
    return struct.pack("<I", data.size) + data.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelFormatError("model file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def block(self, shape) -> np.ndarray:
        (n,) = struct.unpack("<I", self.take(4))
        expected = int(np.prod(shape))
        if n != expected:
            raise ModelFormatError(f"block of {n} values where {expected} were expected")
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)


def dumps_model(model: CraneSketch, updates_ingested: int = 0) -> bytes:
    """Serialise to the little-endian CRNE format.

    Header: magic, u16 version, u32 H, W, n_max, active layers, batch size,
    u8 carry mode, u8 expand flag, f32 theta, tau, eps, u64 update count.
    Then length-prefixed float32 blocks: per layer, origin then destination
    encoder (ten parameters, then running mean and variance of both
    batch-norm layers), decoder weights, decoder bias, the active layer
    memories, and the per-layer unit mass.
    """
    cfg = model.config
    out = [_HEADER.pack(MAGIC, FORMAT_VERSION, model.height, model.width, cfg.n_max,
                        model.layers, cfg.batch_size, _CARRY_MODES.index(cfg.carry_mode),
                        int(cfg.expand), cfg.theta, cfg.tau, cfg.eps, int(updates_ingested))]
    for net in model.encoders.nets():
        out.extend(_block(p.data) for p in net.parameters())
        for bn in net.bn:
            out.append(_block(bn.running_mean))
            out.append(_block(bn.running_var))
    out.append(_block(model.decoder_w.data))
    out.append(_block(model.decoder_b.data))
    out.extend(_block(model.memories[i]) for i in range(model.layers))
    out.append(_block(model.unit_mass))
    return b"".join(out)


def loads_model(buf: bytes):
    """Inverse of :func:`dumps_model`; returns ``(model, updates_ingested)``."""
    r = _Reader(buf)
    (magic, version, h, w, n_max, layers, batch, mode, expand, theta, tau, eps,
     updates) = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise ModelFormatError("not a CRNE model file")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    if h != EMBED_DIM or w != EMBED_DIM or not 1 <= layers <= n_max or mode > 1:
        raise ModelFormatError("inconsistent header")
    cfg = SketchConfig(theta=theta, tau=tau, n_max=n_max, eps=eps, batch_size=batch,
                       carry_mode=_CARRY_MODES[mode], expand=bool(expand))
    encoders = LayerEncoders(n_max, make_rng(0, "placeholder"))
    for net in encoders.nets():
        for p in net.parameters():
            p.data = r.block(p.data.shape)
        net.bn = [BatchNormState(r.block(bn.running_mean.shape), r.block(bn.running_var.shape))
                  for bn in net.bn]
    dec_w = r.block((n_max,))
    dec_b = r.block(())
    model = CraneSketch(encoders, dec_w, dec_b, cfg)
    for i in range(layers):
        model.memories[i] = r.block((h, w))
    model.unit_mass[:] = r.block((n_max,))
    model.layers = layers
    if r.pos != len(buf):
        raise ModelFormatError("trailing bytes after model data")
    return model, updates


def save_model(path, model: CraneSketch, updates_ingested: int = 0):
    Path(path).write_bytes(dumps_model(model, updates_ingested))


def load_model(path):
    return loads_model(Path(path).read_bytes())


# -- config ------------------------------------------------------------------

_SKETCH_KEYS = {"theta": "theta", "tau": "tau", "n_max": "n_max", "eps": "eps",
                "b_size": "batch_size", "batch_size": "batch_size", "carry_mode": "carry_mode",
                "expand": "expand"}
_TASK_KEYS = {"gamma": "max_length", "max_length": "max_length", "min_length": "min_length",
              "alpha_min": "alpha_min", "alpha_max": "alpha_max", "weight_min": "weight_min",
              "weight_max": "weight_max", "id_space": "id_space", "family": "family"}
_TRAIN_KEYS = {"lr": "lr", "steps": "steps_per_task", "steps_per_task": "steps_per_task",
               "tasks": "n_tasks", "n_tasks": "n_tasks", "batch_tasks": "tasks_per_step",
               "tasks_per_step": "tasks_per_step", "weight_decay": "weight_decay",
               "beta1": "beta1", "beta2": "beta2", "adam_eps": "adam_eps",
               "max_queries": "max_queries", "decoder_lr_scale": "decoder_lr_scale",
               "geometric_decoder_lr": "geometric_decoder_lr", "lr_schedule": "lr_schedule"}


def _coerce(value: str, kind, key: str):
    try:
        if kind is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    out = {}
    for f in fields(cls):
        name = str(f.type).split("|")[0].strip()
        out[f.name] = hints.get(name, str)
    return out


def parse_config(text: str, seed: int = 0):
    """Flat ``key = value`` config to ``(TrainConfig, TaskConfig)``."""
    sketch_kw, task_kw, train_kw = {}, {}, {}
    sk_types, task_types, tr_types = (_field_types(SketchConfig), _field_types(TaskConfig),
                                      _field_types(TrainConfig))
    tr_types.update(beta1=float, beta2=float, max_queries=int)
    sk_types["tau"] = float
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _SKETCH_KEYS:
            name = _SKETCH_KEYS[key]
            sketch_kw[name] = _coerce(value, sk_types[name], key)
        elif key in _TASK_KEYS:
            name = _TASK_KEYS[key]
            task_kw[name] = _coerce(value, task_types[name], key)
        elif key in _TRAIN_KEYS:
            name = _TRAIN_KEYS[key]
            train_kw[name] = _coerce(value, tr_types[name], key)
        else:
            raise ConfigError(f"line {number}: unknown key {key!r}")
    betas = (train_kw.pop("beta1", 0.9), train_kw.pop("beta2", 0.999))
    try:
        sketch = SketchConfig(**sketch_kw)
        return (TrainConfig(**train_kw, betas=betas, seed=seed, sketch=sketch),
                TaskConfig(**task_kw))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, seed: int = 0):
    return parse_config(Path(path).read_text(encoding="utf-8"), seed)


# -- reports -----------------------------------------------------------------

def write_trace(path, losses):
    with open(path, "w", encoding="utf-8") as fh:
        for step, loss in enumerate(losses):
            fh.write(f"{step}\t{loss!r}\n")
