"""Bipartite prediction-to-ground-truth matching and the set-prediction loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gpq.detector import Prediction, Scene
from gpq.tensor import Tensor, logit, mul, sigmoid_focal_loss, tabs

_INF = float("inf")


@dataclass(frozen=True)
class LossConfig:
    w_cls: float = 2.0
    w_box: float = 0.25
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass(frozen=True)
class Assignment:
    """Matched (query_index, gt_index) pairs, ordered by gt_index.

    Query indices are row positions in the prediction, not original bank ids.
    """

    pairs: tuple[tuple[int, int], ...]

    @property
    def queries(self) -> list[int]:
        return [q for q, _ in self.pairs]

    def total(self, cost: np.ndarray) -> float:
        c = np.asarray(cost, dtype=np.float64)
        return float(sum(c[q, g] for q, g in self.pairs))


def build_cost(pred: Prediction, scene: Scene, w_cls: float = 2.0, w_box: float = 0.25) -> np.ndarray:
    """(Nq, M) cost: ``-w_cls * score[q, class(g)] + w_box * L1(box[q], box(g))``."""
    scores = pred.scores.data.astype(np.float64)
    boxes = pred.boxes.data.astype(np.float64)
    if scores.ndim != 2:
        raise ValueError("build_cost takes a single-scene prediction")
    if not scene.objects:
        raise ValueError("scene has no objects to match")
    gt = scene.boxes
    l1 = np.abs(boxes[:, None, :] - gt[None, :, :]).sum(-1)
    return -w_cls * scores[:, scene.classes] + w_box * l1


def _solve(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian for an (n, m) matrix with n <= m.

    Every row is assigned to a distinct column.  Returns the column of each
    row plus the row and column potentials (an optimal dual solution).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: 1-based row on column j, 0 if free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, _INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], _INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    cols, _, _ = _solve(cost)
    return float(cost[np.arange(cost.shape[0]), cols].sum())


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every ground truth (column) to a distinct query (row).

    Among optimal assignments the one whose query sequence, read in
    ground-truth order, is lexicographically smallest is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D (queries x ground truths) matrix")
    nq, m = c.shape
    if m > nq:
        raise ValueError(f"cannot match {m} ground truths to {nq} queries")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    if m == 0:
        return Assignment(())
    t = np.ascontiguousarray(c.T)  # rows: ground truths, cols: queries
    cols, u, v = _solve(t)
    best = float(t[np.arange(m), cols].sum())
    tol = 1e-9 * max(1.0, float(np.abs(t).max())) * m

    # Optimal assignments only use edges that are tight for the dual (u, v), so
    # only tight edges to a lower query index can improve the lexicographic order.
    taken: set[int] = set()
    prefix = 0.0
    for g in range(m):
        rc = t[g] - u[g] - v
        for q in np.flatnonzero(rc[: cols[g]] <= tol):
            q = int(q)
            if q in taken:
                continue
            rest_cols = [j for j in range(nq) if j not in taken and j != q]
            sub = t[g + 1:][:, rest_cols]
            if sub.shape[0]:
                sub_cols, _, _ = _solve(sub)
                sub_total = float(sub[np.arange(sub.shape[0]), sub_cols].sum())
            else:
                sub_cols, sub_total = np.empty(0, dtype=np.int64), 0.0
            if prefix + t[g, q] + sub_total <= best + tol:
                cols[g] = q
                cols[g + 1:] = np.asarray(rest_cols, dtype=np.int64)[sub_cols]
                break
        taken.add(int(cols[g]))
        prefix += t[g, cols[g]]
    return Assignment(tuple((int(cols[g]), g) for g in range(m)))


def match(pred: Prediction, scenes: Scene | Sequence[Scene], cfg: LossConfig = LossConfig()):
    """Per-scene (Assignment, cost matrix) for a possibly batched prediction."""
    if isinstance(scenes, Scene):
        return [(hungarian(c := build_cost(pred, scenes, cfg.w_cls, cfg.w_box)), c)]
    out = []
    for b, scene in enumerate(scenes):
        cost = build_cost(pred.sample(b), scene, cfg.w_cls, cfg.w_box)
        out.append((hungarian(cost), cost))
    return out


def set_loss(preds: Sequence[Prediction], scenes: Scene | Sequence[Scene], cfg: LossConfig = LossConfig(),
             matches=None) -> Tensor:
    """Deep-supervised set loss, averaged over decoder layers.

    Each layer contributes ``w_cls * focal + w_box * L1(matched boxes)``,
    both normalised by the number of ground-truth objects.  Unmatched
    queries are pushed towards all-zero class scores.
    """
    single = isinstance(scenes, Scene)
    batch = [scenes] if single else list(scenes)
    num_gt = max(1, sum(len(s.objects) for s in batch))
    if matches is None:
        matches = [match(p, scenes, cfg) for p in preds]
    total = None
    for pred, layer_matches in zip(preds, matches):
        shape = pred.scores.shape
        targets = np.zeros(shape)
        box_target = np.zeros(pred.boxes.shape)
        mask = np.zeros(pred.boxes.shape)
        for b, (assignment, _) in enumerate(layer_matches):
            scene = batch[b]
            idx = (b,) if not single else ()
            for q, g in assignment.pairs:
                targets[idx + (q, scene.objects[g].class_id)] = 1.0
                box_target[idx + (q,)] = scene.objects[g].box
                mask[idx + (q,)] = 1.0
        logits = pred.logits if pred.logits is not None else logit(pred.scores, eps=1e-7)
        focal = sigmoid_focal_loss(logits, targets, cfg.focal_alpha, cfg.focal_gamma).sum()
        l1 = mul(tabs(pred.boxes - Tensor(box_target)), Tensor(mask)).sum()
        layer = focal * (cfg.w_cls / num_gt) + l1 * (cfg.w_box / num_gt)
        total = layer if total is None else total + layer
    return total * (1.0 / len(preds))
