"""Store-then-query meta-training on synthetic tasks.

The carry decisions of a task are made once by the same numba kernel the
sketch uses at run time, with every per-edge basis coefficient recorded.
Because carry factors are constants, each final layer memory is a fixed
linear combination of the edges' basis matrices, which the tape rebuilds from
those coefficients. Gradients therefore reach every encoder through both the
stored memories and the query bases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from crane import autodiff as ad
from crane._kernels import carry_stream
from crane.encoders import binary_encode
from crane.optim import AdamW
from crane.rng import make_rng
from crane.sketch import CraneSketch, SketchConfig
from crane.synthetic import Task, TaskConfig, generate_task

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""


@dataclass
class TrainConfig:
    n_tasks: int = 2000
    steps_per_task: int = 50
    tasks_per_step: int = 1
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 5e-6
    # decoder lr multiplier; with geometric_decoder_lr, w_i also gets theta**(i-1)
    decoder_lr_scale: float = 20.0
    geometric_decoder_lr: bool = True
    lr_schedule: str = "cosine"
    max_queries: int | None = None
    seed: int = 0
    sketch: SketchConfig = field(default_factory=SketchConfig)

    def __post_init__(self):
        for name in ("n_tasks", "steps_per_task", "tasks_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.weight_decay < 0 or self.decoder_lr_scale <= 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.max_queries is not None and self.max_queries < 1:
            raise ValueError("max_queries must be positive")


@dataclass
class TaskResult:
    loss: ad.Tensor
    predictions: np.ndarray
    truths: np.ndarray
    layer_estimates: np.ndarray
    active_layers: int


def _bn_mode(n_unique: int) -> str:
    return "train" if n_unique >= 2 else "infer"


def run_task(model: CraneSketch, task: Task, max_queries=None, rng=None,
             mode: str | None = None) -> TaskResult:
    """Reset, store the support stream in mini-batches, query, and build the MAE loss.

    Returns the loss tensor (call ``backward`` on it) together with the
    forward values. ``mode`` forces the batch-norm mode; by default it is
    train mode over the task's unique nodes.
    """
    cfg = model.config
    model.reset()
    uo, io = np.unique(np.asarray(task.origins, dtype=np.uint64), return_inverse=True)
    ud, idd = np.unique(np.asarray(task.destinations, dtype=np.uint64), return_inverse=True)
    io, idd = io.astype(np.int64), idd.astype(np.int64)
    mode_o = mode or _bn_mode(len(uo))
    mode_d = mode or _bn_mode(len(ud))
    codes_o, codes_d = binary_encode(uo), binary_encode(ud)
    enc = model.encoders
    emb_o = [enc.origin[i].forward(codes_o, mode_o) for i in range(cfg.n_max)]
    emb_d = [enc.destination[i].forward(codes_d, mode_d) for i in range(cfg.n_max)]

    weights = np.asarray(task.weights, dtype=np.float64)
    coef = np.zeros((cfg.n_max, len(weights)))
    memories = np.zeros_like(model.memories)
    active = carry_stream(memories, cfg.initial_layers,
                          np.stack([e.data for e in emb_o]), np.stack([e.data for e in emb_d]),
                          io, idd, weights, cfg.stream_batch, float(cfg.theta),
                          float(cfg.tau), float(cfg.eps), cfg.expand, coef, True)

    # collapse repeated (origin, destination) pairs
    pair_key = io * len(ud) + idd
    pairs, first, inverse = np.unique(pair_key, return_index=True, return_inverse=True)
    ro, rd = io[first], idd[first]
    pair_coef = np.stack([np.bincount(inverse, coef[i], len(pairs)) for i in range(cfg.n_max)])
    truths = np.bincount(inverse, weights, len(pairs))

    selected = np.arange(len(pairs))
    if max_queries is not None and len(pairs) > max_queries:
        rng = rng or make_rng(0, "queries")
        selected = np.sort(rng.choice(len(pairs), max_queries, replace=False))

    columns = []
    for i in range(cfg.n_max):
        if i >= active:
            columns.append(None)
            continue
        memory = ad.superpose(emb_o[i], emb_d[i], ro, rd, pair_coef[i], cfg.eps)
        columns.append(ad.min_ratio_rows(memory, ad.take_rows(emb_o[i], ro[selected]),
                                         ad.take_rows(emb_d[i], rd[selected]), cfg.eps))
    q = ad.stack_columns(columns, len(selected))
    pred = ad.add(ad.matvec(q, model.decoder_w), model.decoder_b)
    loss = ad.mae_loss(pred, truths[selected])
    return TaskResult(loss, pred.data, truths[selected], q.data, active)


def lr_factor(schedule: str, step: int, n_steps: int) -> float:
    """Multiplier on the base learning rate at 0-based ``step``."""
    if schedule == "constant":
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * step / n_steps))


def train(cfg: TrainConfig, task_cfg: TaskConfig, model: CraneSketch | None = None,
          trace=None, progress=None):
    """AdamW over mini-batches of freshly generated tasks.

    Each group of ``tasks_per_step`` tasks is reused for ``steps_per_task``
    optimizer steps. ``trace`` receives one ``(step, mean_loss)`` pair per
    step. Parameters are rounded to 32-bit precision at the end so the
    in-memory model equals its saved form.
    """
    model = model or CraneSketch.random(cfg.seed, cfg.sketch, id_space=task_cfg.id_space)
    params = model.parameters()
    scales = [1.0] * len(params)
    w_scale = cfg.decoder_lr_scale * np.ones(cfg.sketch.n_max)
    if cfg.geometric_decoder_lr:
        w_scale = w_scale * cfg.sketch.theta ** np.arange(cfg.sketch.n_max)
    scales[-2] = w_scale
    scales[-1] = cfg.decoder_lr_scale
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay, lr_scales=scales)
    query_rng = make_rng(cfg.seed, "query-sampling")
    losses = []
    n_groups = -(-cfg.n_tasks // cfg.tasks_per_step)
    n_steps = n_groups * cfg.steps_per_task
    step = 0
    for group in range(n_groups):
        first = group * cfg.tasks_per_step
        idx = range(first, min(first + cfg.tasks_per_step, cfg.n_tasks))
        tasks = [generate_task(task_cfg, cfg.seed, i) for i in idx]
        for _ in range(cfg.steps_per_task):
            opt.lr = cfg.lr * lr_factor(cfg.lr_schedule, step, n_steps)
            opt.zero_grad()
            total = 0.0
            for task in tasks:
                result = run_task(model, task, cfg.max_queries, query_rng)
                value = result.loss.item()
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at step {step}")
                result.loss.backward(np.array(1.0 / len(tasks)))
                total += value
            opt.step()
            mean_loss = total / len(tasks)
            losses.append(mean_loss)
            if trace is not None:
                trace(step, mean_loss)
            if progress is not None:
                progress(step, mean_loss)
            step += 1
    model.reset()
    model.quantize()
    return model, np.array(losses)
