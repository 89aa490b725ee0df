"""Monte-Carlo experiments for the sketch's analytic error properties.

Each experiment returns a :class:`TheoryResult`. ``theory_suite`` runs them
all; the ``crane theory`` command exits 0 only when every one passes.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from crane._kernels import carry_stream, min_ratio_rows
from crane.optim import AdamW
from crane.rng import make_rng
from crane.sketch import CraneSketch, SketchConfig
from crane.synthetic import Task, TaskConfig, aggregate_edges, generate_task, zipf_stream
from crane.training import run_task


@dataclass
class TheoryResult:
    name: str
    passed: bool
    detail: str
    values: dict


def _wilson(successes: int, n: int, z=1.96):
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    centre = (p + z * z / (2 * n)) / (1 + z * z / n)
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
    return centre - half, centre + half


# -- collision decay -----------------------------------------------------------

def _collision_events(emb_o, emb_d, n_background, n_memories, per_memory, eps, delta, rng):
    """Boolean (trials, layers) array: target estimate inflated by more than ``delta``.

    Every memory holds ``n_background`` unit edges drawn from the node pool; the
    same edges are written at every layer, each layer through its own encoders.
    """
    n_layers, pool = emb_o.shape[:2]
    events = np.zeros((n_memories * per_memory, n_layers), dtype=bool)
    for m in range(n_memories):
        bo = rng.integers(0, pool, n_background)
        bd = rng.integers(0, pool, n_background)
        to = rng.integers(0, pool, per_memory)
        td = rng.integers(0, pool, per_memory)
        rows = slice(m * per_memory, (m + 1) * per_memory)
        for layer in range(n_layers):
            memory = emb_o[layer][bo].T @ emb_d[layer][bd] + eps * n_background
            q, _ = min_ratio_rows(memory, emb_o[layer][to], emb_d[layer][td], eps)
            events[rows, layer] = q > delta
    return events


def _calibrate_background(emb_o, emb_d, eps, delta, target, rng, trials=4000):
    """Smallest background size whose layer-1 collision rate reaches ``target``."""
    def rate(n):
        ev = _collision_events(emb_o[:1], emb_d[:1], n, trials // 100, 100, eps, delta, rng)
        return ev.mean()

    lo, hi = 1, 2
    while rate(hi) < target and hi < 1 << 16:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def collision_decay(seed=0, trials=100_000, layers=3, p_target=0.1, delta=0.5,
                    pool=4096, per_memory=100) -> TheoryResult:
    """Joint k-layer collision rate against the product of per-layer rates.

    A collision at a layer is a target edge, absent from the memory, whose
    estimate exceeds ``delta`` because of background edges. The background
    size is calibrated so the per-layer rate is about ``p_target``; the joint
    rate over the first k layers must lie within [0.3, 3] times the predicted
    ``prod_l p_l``.
    """
    rng = make_rng(seed, "theory", "collision")
    model = CraneSketch.random(seed, SketchConfig(n_max=layers, initial_layers=layers))
    ids = rng.choice(2**20, 2 * pool, replace=False).astype(np.uint64)
    emb_o, emb_d, _, _ = model.encoders.embed_tables(ids[:pool], ids[pool:])
    eps = float(model.config.eps)
    n_bg = _calibrate_background(emb_o, emb_d, eps, delta, p_target, rng)
    events = _collision_events(emb_o, emb_d, n_bg, -(-trials // per_memory), per_memory,
                               eps, delta, rng)
    rates = events.mean(axis=0)
    ratios, parts, passed = [], [], True
    for k in range(1, layers + 1):
        joint_hits = int(np.all(events[:, :k], axis=1).sum())
        joint = joint_hits / len(events)
        predicted = float(np.prod(rates[:k]))
        ratio = joint / predicted if predicted > 0 else math.inf
        lo, hi = _wilson(joint_hits, len(events))
        ratios.append(ratio)
        passed &= 0.3 <= ratio <= 3.0
        parts.append(f"k={k} joint={joint:.2e} [{lo:.2e},{hi:.2e}] pred={predicted:.2e} "
                     f"ratio={ratio:.2f}")
    detail = f"background={n_bg} p_l={np.round(rates, 4).tolist()}; " + "; ".join(parts)
    return TheoryResult("collision_decay", passed, detail,
                        {"rates": rates, "ratios": ratios, "background": n_bg})


# -- interference isolation and residual dominance -------------------------------

def _residual_ratio(truths, theta) -> float:
    return float((truths % theta).sum() / truths.sum())


def interference_isolation(seed=0, n_updates=100_000, n_edges=10_000, alpha=1.1,
                           theta=4.0) -> TheoryResult:
    """Low-frequency-edge error of the bottom layer over a flat single-layer sketch.

    Both sketches share encoder initialisation seeds and see the same stream
    in sequential carry mode; the hierarchical one has all four layers active.
    The measured ratio must not exceed three times ``W_res / W_total``.
    """
    o, d, w = zipf_stream(seed, n_updates, alpha, n_edges)
    uo, ud, f = aggregate_edges(o, d, w)
    bound = _residual_ratio(f, theta)
    low = f < theta
    hier = CraneSketch.random(seed, SketchConfig(theta=theta, n_max=4, initial_layers=4,
                                                 expand=False, carry_mode="sequential"))
    flat = CraneSketch.random(seed, SketchConfig(theta=theta, n_max=1, expand=False,
                                                 carry_mode="sequential"))
    hier.ingest(o, d, w)
    flat.ingest(o, d, w)
    qh = hier.layer_estimates(uo[low], ud[low])
    qf = flat.layer_estimates(uo[low], ud[low])[:, 0]
    bottom = float(np.abs(qh[:, 0] - f[low]).mean())
    decoded = float(np.abs(qh @ hier.decoder_w.data - f[low]).mean())
    flat_err = float(np.abs(qf - f[low]).mean())
    ratio = bottom / flat_err
    detail = (f"bottom/flat={ratio:.4g} <= 3*W_res/W_total={3 * bound:.4g}; "
              f"low-frequency edges={int(low.sum())}; decoded/flat={decoded / flat_err:.4g}")
    return TheoryResult("interference_isolation", ratio <= 3 * bound, detail,
                        {"ratio": ratio, "bound": bound, "decoded_ratio": decoded / flat_err})


def layer_noise(model: CraneSketch, origins, destinations, weights):
    """Per-edge, per-layer collision noise ``theta**(l-1) * (q_l - own units)``.

    Each edge's own units at every layer come from the carry bookkeeping, and
    they sum, theta-weighted, to the edge's true frequency, so the row sums
    are exactly the geometric decoder's errors. Returns ``(noise, truths)``
    over distinct edges.
    """
    cfg = model.config
    model.reset()
    emb_o, emb_d, io, idd = model.encoders.embed_tables(origins, destinations)
    weights = np.asarray(weights, dtype=np.float64)
    coef = np.zeros((cfg.n_max, len(weights)))
    model.layers = carry_stream(model.memories, model.layers, emb_o, emb_d, io, idd, weights,
                                cfg.stream_batch, float(cfg.theta), float(cfg.tau),
                                float(cfg.eps), cfg.expand, coef, True)
    key = io.astype(np.int64) * (int(idd.max()) + 1) + idd
    pairs, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    own = np.stack([np.bincount(inverse, coef[i], len(pairs)) for i in range(cfg.n_max)], 1)
    truths = np.bincount(inverse, weights, len(pairs))
    q = model.layer_estimates(np.asarray(origins)[first], np.asarray(destinations)[first])
    return (q - own) * cfg.theta ** np.arange(cfg.n_max), truths


def residual_dominance(seed=0, n_updates=20_000, n_edges=4_000, alpha=1.1) -> TheoryResult:
    """Share of the bottom layer in the decoded estimate's collision noise.

    Passes when the bottom layer carries at least half of the mean absolute
    noise summed over layers.
    """
    o, d, w = zipf_stream(seed, n_updates, alpha, n_edges)
    model = CraneSketch.random(seed, SketchConfig(carry_mode="sequential"))
    noise, truths = layer_noise(model, o, d, w)
    per_layer = np.abs(noise).mean(axis=0)
    share = float(per_layer[0] / per_layer.sum())
    detail = (f"bottom share={share:.3f} (need >= 0.5); mean |noise| per layer="
              f"{np.round(per_layer, 3).tolist()}; W_res/W_total={_residual_ratio(truths, 4.0):.3f}")
    return TheoryResult("residual_dominance", share >= 0.5, detail,
                        {"share": share, "per_layer": per_layer})


# -- decoder variance ----------------------------------------------------------

def _task_features(model: CraneSketch, task: Task):
    model.reset()
    model.ingest(task.origins, task.destinations, task.weights)
    q = model.layer_estimates(task.query_origins, task.query_destinations)
    return q, np.asarray(task.truths, dtype=np.float64)


def decoder_variance(seed=0, model: CraneSketch | None = None, n_fit=20, n_test=50,
                     max_length=5000) -> TheoryResult:
    """Paired per-task MSE of a fitted linear decoder against geometric weights.

    With ``model`` given, its own trained decoder is compared; otherwise the
    decoder is the least-squares fit over ``n_fit`` training tasks, the
    minimiser of the squared-error objective. Passes when the fitted decoder
    wins on at least 60% of ``n_test`` held-out tasks.
    """
    cfg = TaskConfig(max_length=max_length)
    sketch = model if model is not None else CraneSketch.random(seed)
    sketch = _fresh_copy(sketch)
    theta = sketch.theta
    geometric = theta ** np.arange(sketch.config.n_max)
    if model is None:
        fit = [_task_features(sketch, generate_task(cfg, seed, i)) for i in range(n_fit)]
        x = np.vstack([np.c_[q, np.ones(len(q))] for q, _ in fit])
        y = np.concatenate([t for _, t in fit])
        beta = np.linalg.lstsq(x, y, rcond=None)[0]
        w, b = beta[:-1], beta[-1]
    else:
        w, b = sketch.decoder_w.data, float(sketch.decoder_b.data)
    wins = 0
    ratios = []
    for i in range(n_test):
        q, t = _task_features(sketch, generate_task(cfg, seed + 1, i))
        mse_fit = float(np.mean((q @ w + b - t) ** 2))
        mse_geo = float(np.mean((q @ geometric - t) ** 2))
        wins += mse_fit <= mse_geo
        ratios.append(mse_fit / mse_geo if mse_geo > 0 else 1.0)
    rate = wins / n_test
    detail = (f"win rate={rate:.2f} (need >= 0.6) over {n_test} tasks; median MSE ratio="
              f"{np.median(ratios):.3g}; decoder w={np.round(w, 4).tolist()} b={b:.4g}")
    return TheoryResult("decoder_variance", rate >= 0.6, detail,
                        {"win_rate": rate, "w": w, "b": b})


def _fresh_copy(model: CraneSketch) -> CraneSketch:
    out = copy.deepcopy(model)
    out.reset()
    return out


# -- orthogonality drift -------------------------------------------------------

def _basis_cosines(model: CraneSketch, origins, destinations, layer=0) -> float:
    eo = model.encoders.origin[layer].embed(origins)
    ed = model.encoders.destination[layer].embed(destinations)
    a = np.einsum("ip,iq->ipq", eo, ed).reshape(len(eo), -1) + model.config.eps
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    gram = a @ a.T
    return float(gram[np.triu_indices(len(a), 1)].mean())


def orthogonality_drift(seed=0, n_heavy=16, n_light=2000, steps=60, lr=1e-2) -> TheoryResult:
    """Mean pairwise cosine of heavy edges' layer-1 bases before and after training.

    A fixed set of heavy edges recurs in every task among fresh light edges;
    training the encoders on the task loss must lower their mutual overlap.
    """
    rng = make_rng(seed, "theory", "orthogonality")
    model = CraneSketch.random(seed, SketchConfig(n_max=1, expand=False))
    heavy_o = rng.integers(0, 2**20, n_heavy).astype(np.uint64)
    heavy_d = rng.integers(0, 2**20, n_heavy).astype(np.uint64)
    before = _basis_cosines(model, heavy_o, heavy_d)
    opt = AdamW(model.encoders.parameters(), lr=lr, weight_decay=0.0)
    for step in range(steps):
        light_o = rng.integers(0, 2**20, n_light).astype(np.uint64)
        light_d = rng.integers(0, 2**20, n_light).astype(np.uint64)
        heavy_w = rng.uniform(20, 60, n_heavy)
        o = np.concatenate([heavy_o, light_o])
        d = np.concatenate([heavy_d, light_d])
        w = np.concatenate([heavy_w, np.ones(n_light)])
        order = rng.permutation(len(o))
        o, d, w = o[order], d[order], w[order]
        task = Task(o, d, w, heavy_o, heavy_d, heavy_w, 0.0)
        opt.zero_grad()
        result = run_task(model, task)
        result.loss.backward()
        opt.step()
    after = _basis_cosines(model, heavy_o, heavy_d)
    detail = f"mean heavy-edge basis cosine {before:.4f} -> {after:.4f} after {steps} steps"
    return TheoryResult("orthogonality_drift", after < before, detail,
                        {"before": before, "after": after})


def theory_suite(seed=0, quick=False, model: CraneSketch | None = None) -> list:
    """Run every experiment; ``quick`` shrinks trial counts for smoke runs."""
    if quick:
        return [
            collision_decay(seed, trials=20_000),
            interference_isolation(seed, n_updates=20_000, n_edges=2_000),
            residual_dominance(seed, n_updates=5_000, n_edges=1_000),
            decoder_variance(seed, model, n_fit=8, n_test=20, max_length=2000),
            orthogonality_drift(seed, steps=20),
        ]
    return [
        collision_decay(seed),
        interference_isolation(seed),
        residual_dominance(seed),
        decoder_variance(seed, model),
        orthogonality_drift(seed),
    ]
