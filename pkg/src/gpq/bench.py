"""Compute and accuracy accounting: FLOPs, latency, selection frequency, mAP."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from gpq.detector import DetectorModel, QueryBank, Scene, select_topk
from gpq.fileio import read_csv, write_csv

PARTS = ("query_embed", "self_attention", "cross_attention", "kv_projection", "ffn", "heads")
SOFTMAX_FLOPS = 5  # per attention-weight element


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


@dataclass(frozen=True)
class FlopsConfig:
    num_queries: int
    num_keys: int
    embed_dim: int
    value_dim: int
    hidden_dim: int
    heads: int
    num_layers: int
    num_classes: int
    embed_in: int = 64  # width of the sinusoidal reference-point encoding

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")

    @classmethod
    def from_model(cls, model: DetectorModel) -> "FlopsConfig":
        c = model.config
        return cls(model.bank.size, c.num_keys, c.embed_dim, c.value_dim, c.hidden_dim, c.heads,
                   c.num_layers, c.num_classes, 4 * c.frequencies)


@dataclass(frozen=True)
class FlopsReport:
    config: FlopsConfig
    parts: dict

    @property
    def total(self) -> int:
        return sum(self.parts.values())

    @property
    def gflops(self) -> float:
        return self.total / 1e9

    def rows(self) -> list[tuple[str, int]]:
        return [(k, self.parts[k]) for k in PARTS] + [("total", self.total)]


def count_flops(cfg: FlopsConfig) -> FlopsReport:
    """Closed-form FLOP counts (2mnk per matmul, 5 per softmax element).

    Key/value projections of the image features do not depend on the query
    count and are reported separately as ``kv_projection``.
    """
    nq, nk, e, dv, h, H = (cfg.num_queries, cfg.num_keys, cfg.embed_dim, cfg.value_dim,
                           cfg.hidden_dim, cfg.heads)
    self_attn = (2 * matmul_flops(nq, e, e) + 2 * matmul_flops(nq, dv, dv)
                 + matmul_flops(nq, e, nq) + matmul_flops(nq, nq, dv)
                 + SOFTMAX_FLOPS * H * nq * nq)
    cross_attn = (matmul_flops(nq, e, e) + matmul_flops(nq, dv, dv)
                  + matmul_flops(nq, e, nk) + matmul_flops(nq, nk, dv)
                  + SOFTMAX_FLOPS * H * nq * nk)
    kv = matmul_flops(nk, e, e) + matmul_flops(nk, dv, dv)
    ffn = matmul_flops(nq, e, h) + matmul_flops(nq, h, e)
    heads = (matmul_flops(nq, e, e) + matmul_flops(nq, e, cfg.num_classes)
             + matmul_flops(nq, e, e) + matmul_flops(nq, e, 4))
    embed = matmul_flops(nq, cfg.embed_in, e) + matmul_flops(nq, e, e)
    n = cfg.num_layers
    parts = {
        "query_embed": embed,
        "self_attention": n * self_attn,
        "cross_attention": n * cross_attn,
        "kv_projection": n * kv,
        "ffn": n * ffn,
        "heads": n * heads,
    }
    return FlopsReport(cfg, parts)


def write_flops(path, report: FlopsReport):
    return write_csv(path, ("submodule", "count"), report.rows())


# ---------------------------------------------------------------------------
# latency


@dataclass(frozen=True)
class LatencyStats:
    trials: int
    median_ms: float
    p90_ms: float
    samples_ms: tuple[float, ...] = field(repr=False)


def measure_latency(model: DetectorModel, scenes: Sequence[Scene], trials: int = 30, warmup: int = 5) -> LatencyStats:
    """Wall time of decoder + heads on pre-encoded scenes, single-threaded.

    Scene encoding is data preparation and is excluded from the timed region.
    """
    if trials < 30:
        raise ValueError(f"need at least 30 trials, got {trials}")
    if warmup < 5:
        raise ValueError(f"need at least 5 warmup runs, got {warmup}")
    features = model.encode(scenes)
    samples = []
    with threadpool_limits(1):
        for _ in range(warmup):
            model.predict(features)
        for _ in range(trials):
            t0 = time.perf_counter()
            model.predict(features)
            samples.append((time.perf_counter() - t0) * 1e3)
    return LatencyStats(trials, statistics.median(samples), float(np.percentile(samples, 90)), tuple(samples))


# ---------------------------------------------------------------------------
# inference over scene sets


def final_predictions(model: DetectorModel, scenes: Sequence[Scene], batch: int = 64):
    """Yield the final-layer single-scene prediction for every scene, in order."""
    for i in range(0, len(scenes), batch):
        chunk = scenes[i:i + batch]
        pred = model.forward_batch(chunk)[-1]
        for b in range(len(chunk)):
            yield pred.sample(b)


def selection_frequency(model: DetectorModel, scenes: Sequence[Scene], k: int) -> list[tuple[int, int]]:
    """(original query index, top-k appearances) for every alive query, ascending by count."""
    counts = {q: 0 for q in model.bank.alive}
    for pred in final_predictions(model, scenes):
        for det in select_topk(pred, k):
            counts[det.query_index] += 1
    return sorted(counts.items(), key=lambda kv: (kv[1], kv[0]))


def write_frequency(path, counts: Sequence[tuple[int, int]]):
    return write_csv(path, ("query_index", "count"), counts)


# ---------------------------------------------------------------------------
# mAP


DEFAULT_THRESHOLDS = (0.05, 0.10, 0.20)


@dataclass
class EvalResult:
    mean_ap: float
    class_ap: dict                 # class -> AP averaged over thresholds
    table: list = field(default_factory=list)  # (class, threshold, ap)


def average_precision(scores, hits, num_gt: int) -> float:
    """101-point interpolated AP from per-detection scores and TP flags."""
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.asarray(hits, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    # envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recall, r, side="left")
        ap += envelope[idx] if idx < len(envelope) else 0.0
    return ap / 101.0


def _class_ap(dets, gts, threshold: float) -> float:
    """dets: (score, scene_idx, (x, y)); gts: scene_idx -> (M, 2) centres of one class."""
    num_gt = sum(len(g) for g in gts.values())
    dets = sorted(dets, key=lambda d: -d[0])
    taken = {s: np.zeros(len(g), dtype=bool) for s, g in gts.items()}
    hits = []
    for score, s, center in dets:
        hit = False
        g = gts.get(s)
        if g is not None and len(g):
            d = np.hypot(g[:, 0] - center[0], g[:, 1] - center[1])
            d[taken[s]] = np.inf
            j = int(np.argmin(d))
            if d[j] <= threshold:
                taken[s][j] = True
                hit = True
        hits.append(hit)
    return average_precision([d[0] for d in dets], hits, num_gt)


def map_from_detections(detections: Sequence[Sequence], scenes: Sequence[Scene], num_classes: int,
                        thresholds=DEFAULT_THRESHOLDS, score_floor: float = 0.0) -> EvalResult:
    """Centre-distance mAP.  ``detections[i]`` lists the Detections for ``scenes[i]``."""
    if not scenes:
        raise ValueError("empty evaluation set")
    table, class_ap = [], {}
    for c in range(num_classes):
        gts = {}
        for i, s in enumerate(scenes):
            m = s.classes == c
            if m.any():
                gts[i] = s.centers[m]
        if not gts:
            continue
        dets = [(d.score, i, d.box[:2]) for i, ds in enumerate(detections) for d in ds
                if d.class_id == c and d.score > score_floor]
        aps = []
        for th in thresholds:
            ap = _class_ap(dets, gts, th)
            table.append((c, th, ap))
            aps.append(ap)
        class_ap[c] = float(np.mean(aps))
    mean_ap = float(np.mean(list(class_ap.values()))) if class_ap else 0.0
    return EvalResult(mean_ap, class_ap, table)


def eval_map(model: DetectorModel, scenes: Sequence[Scene], thresholds=DEFAULT_THRESHOLDS, k: int = 100,
             score_floor: float = 0.0) -> EvalResult:
    if not scenes:
        raise ValueError("empty evaluation set")
    k = min(k, model.bank.size * model.config.num_classes)
    detections = [select_topk(p, k) for p in final_predictions(model, scenes)]
    return map_from_detections(detections, scenes, model.config.num_classes, thresholds, score_floor)


def write_eval(path, result: EvalResult):
    return write_csv(path, ("class", "threshold", "ap"), [(c, th, repr(ap)) for c, th, ap in result.table])


# ---------------------------------------------------------------------------
# reference points


def export_reference_points(bank: QueryBank, path):
    alive = set(bank.alive)
    pts = bank.ref_points.data
    rows = [(i, repr(float(x)), repr(float(y)), int(i in alive)) for i, (x, y) in enumerate(pts)]
    return write_csv(path, ("index", "x", "y", "alive"), rows)


def read_reference_points(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(points (N, 2), alive flags (N,))`` ordered by index."""
    _, rows = read_csv(path)
    rows.sort(key=lambda r: int(r[0]))
    pts = np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(-1, 2)
    alive = np.array([r[3] == "1" for r in rows], dtype=bool)
    return pts, alive
