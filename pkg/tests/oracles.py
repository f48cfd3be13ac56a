"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np

from gpq.tensor import ComputeGraph, Tensor, float64_storage

FD_STEP = 1e-3
FD_RTOL = 1e-3
FD_FLOOR = 1e-5


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def softmax64(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def analytic_and_numeric(build, arrays, step=FD_STEP):
    """Gradients of the scalar ``build(*tensors)`` w.r.t. each input, both ways, in float64."""
    with float64_storage():
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        with ComputeGraph() as g:
            loss = build(*leaves)
        g.backward(loss)
        analytic = [np.zeros(l.shape) if l.grad is None else np.array(l.grad, dtype=np.float64)
                    for l in leaves]
        numeric = []
        for leaf in leaves:
            grad = np.zeros(leaf.shape)
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = build(*leaves).data.item()
                flat[i] = orig - step
                down = build(*leaves).data.item()
                flat[i] = orig
                grad.reshape(-1)[i] = (up - down) / (2 * step)
            numeric.append(grad)
    return analytic, numeric


def max_rel_error(analytic, numeric, floor=FD_FLOOR):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def brute_force_assignment(cost):
    """Minimum over all injective gt -> query maps; returns (total, lexicographically smallest queries)."""
    c = np.asarray(cost, dtype=np.float64)
    nq, m = c.shape
    best, best_seq = math.inf, None
    for seq in itertools.permutations(range(nq), m):
        total = sum(c[q, g] for g, q in enumerate(seq))
        if total < best - 1e-12:
            best, best_seq = total, seq
    return best, best_seq


def attention_per_head(q, k, v, wq, wk, wv, wo, bq, bk, bv, bo, heads):
    """Explicit per-head loop; each head attends with its own column block."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    Q, K, V = q @ wq + bq, k @ wk + bk, v @ wv + bv
    e, dv = Q.shape[1], V.shape[1]
    de, dh = e // heads, dv // heads
    outs = []
    for h in range(heads):
        qh, kh, vh = Q[:, h * de:(h + 1) * de], K[:, h * de:(h + 1) * de], V[:, h * dh:(h + 1) * dh]
        w = softmax64(qh @ kh.T / math.sqrt(dv / heads))
        outs.append(w @ vh)
    return np.concatenate(outs, axis=1) @ wo + bo


def encode_double_loop(scene, pos_embed, class_embed, grid, sigma):
    tokens = np.array(pos_embed, dtype=np.float64).copy()
    for i in range(grid):
        for j in range(grid):
            cx, cy = (j + 0.5) / grid, (i + 0.5) / grid
            for obj in scene.objects:
                d2 = (cx - obj.center[0]) ** 2 + (cy - obj.center[1]) ** 2
                tokens[i * grid + j] += math.exp(-d2 / (2 * sigma * sigma)) * np.asarray(class_embed[obj.class_id],
                                                                                          dtype=np.float64)
    return tokens


def focal_term(p, y, alpha=0.25, gamma=2.0):
    if y:
        return -alpha * (1 - p) ** gamma * math.log(p)
    return -(1 - alpha) * p ** gamma * math.log(1 - p)
