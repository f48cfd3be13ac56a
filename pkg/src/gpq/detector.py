"""Query-based detector on synthetic scenes.

A scene is a handful of labelled boxes in the unit square.  The encoder
renders it onto a G x G grid of feature tokens; queries are generated from
trainable reference points and refined by the decoder; shared MLP heads
turn every layer's query state into per-class sigmoid scores and boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from gpq.attention import Decoder, Linear, decoder_forward
from gpq.tensor import (
    ShapeError,
    Tensor,
    concat,
    cos,
    logit,
    matmul,
    parameter,
    relu,
    reshape,
    sigmoid,
    sin,
    take_rows,
)


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple[float, float]
    size: tuple[float, float]

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (*self.center, *self.size)


@dataclass(frozen=True)
class Scene:
    id: int
    objects: tuple[SceneObject, ...]

    @property
    def classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @property
    def centers(self) -> np.ndarray:
        return self.boxes[:, :2]


@dataclass(frozen=True)
class SceneConfig:
    num_classes: int = 4
    max_objects: int = 8
    min_size: float = 0.05
    max_size: float = 0.3

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.max_objects < 1:
            raise ValueError("max_objects must be at least 1")


def generate_scene(seed: int, config: SceneConfig = SceneConfig(), scene_id: int | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, config.max_objects + 1))
    classes = rng.integers(0, config.num_classes, n)
    centers = rng.uniform(0.0, 1.0, (n, 2))
    sizes = rng.uniform(config.min_size, config.max_size, (n, 2))
    objects = tuple(
        SceneObject(int(c), (float(x), float(y)), (float(w), float(h)))
        for c, (x, y), (w, h) in zip(classes, centers, sizes)
    )
    return Scene(seed if scene_id is None else scene_id, objects)


def generate_scenes(rng: np.random.Generator, count: int, config: SceneConfig = SceneConfig()) -> list[Scene]:
    seeds = rng.integers(0, 2**63 - 1, count)
    return [generate_scene(int(s), config, scene_id=i) for i, s in enumerate(seeds)]


def write_scenes(path, scenes: Iterable[Scene]) -> None:
    """One scene per line: ``id`` then ``class_id,cx,cy,w,h`` per object."""
    lines = []
    for s in scenes:
        fields = [str(s.id)]
        for o in s.objects:
            fields += [str(o.class_id), *(repr(v) for v in o.box)]
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scenes(path) -> list[Scene]:
    scenes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if (len(parts) - 1) % 5:
            raise ValueError(f"{path}:{lineno}: expected id followed by groups of 5 fields")
        objs = []
        for i in range(1, len(parts), 5):
            c, cx, cy, w, h = parts[i:i + 5]
            objs.append(SceneObject(int(c), (float(cx), float(cy)), (float(w), float(h))))
        scenes.append(Scene(int(parts[0]), tuple(objs)))
    return scenes


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelConfig:
    num_queries: int = 64
    num_classes: int = 4
    grid: int = 8
    embed_dim: int = 64
    value_dim: int = 64
    hidden_dim: int = 128
    heads: int = 8
    num_layers: int = 2
    frequencies: int = 16
    sigma: float = 0.08

    def __post_init__(self):
        errors = []
        for name in ("num_queries", "num_classes", "grid", "embed_dim", "value_dim", "hidden_dim",
                     "heads", "num_layers", "frequencies"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be positive")
        if self.value_dim != self.embed_dim:
            errors.append("value_dim must equal embed_dim (features double as values)")
        if self.heads >= 1 and self.embed_dim % self.heads:
            errors.append(f"heads={self.heads} must divide embed_dim={self.embed_dim}")
        if self.hidden_dim <= self.value_dim:
            errors.append("hidden_dim must exceed value_dim")
        if self.num_classes < 2:
            errors.append("num_classes must be at least 2")
        if self.sigma <= 0:
            errors.append("sigma must be positive")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def num_keys(self) -> int:
        return self.grid * self.grid


@dataclass
class MLP:
    l1: Linear
    l2: Linear

    def __call__(self, x: Tensor) -> Tensor:
        return self.l2(relu(self.l1(x)))

    @classmethod
    def init(cls, rng, n_in: int, n_hidden: int, n_out: int) -> "MLP":
        return cls(Linear.init(rng, n_in, n_hidden), Linear.init(rng, n_hidden, n_out))


@dataclass
class SceneEncoder:
    pos_embed: Tensor    # (G*G, E)
    class_embed: Tensor  # (C, E)

    @property
    def grid(self) -> int:
        return math.isqrt(self.pos_embed.shape[0])


def cell_centers(grid: int) -> np.ndarray:
    """Token (i, j) -> index i*G + j, centre ((j+.5)/G, (i+.5)/G)."""
    c = (np.arange(grid) + 0.5) / grid
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def influence(scene: Scene, grid: int, num_classes: int, sigma: float) -> np.ndarray:
    """(G*G, C) matrix of summed Gaussian weights of each class's objects at each cell."""
    cells = cell_centers(grid)
    out = np.zeros((grid * grid, num_classes))
    if scene.objects:
        d2 = ((cells[:, None, :] - scene.centers[None, :, :]) ** 2).sum(-1)
        w = np.exp(-d2 / (2.0 * sigma * sigma))
        np.add.at(out.T, scene.classes, w.T)
    return out


def encode_scene(scene: Scene, enc: SceneEncoder, sigma: float = 0.08) -> Tensor:
    a = influence(scene, enc.grid, enc.class_embed.shape[0], sigma)
    return enc.pos_embed + matmul(Tensor(a), enc.class_embed)


def encode_scenes(scenes: Sequence[Scene], enc: SceneEncoder, sigma: float = 0.08) -> Tensor:
    a = np.stack([influence(s, enc.grid, enc.class_embed.shape[0], sigma) for s in scenes])
    return enc.pos_embed + matmul(Tensor(a), enc.class_embed)


def sinusoid_frequencies(n: int) -> np.ndarray:
    return math.pi * 2.0 ** (np.arange(n) / 3.0)


def sinusoid(points: Tensor, freqs: np.ndarray) -> Tensor:
    """(N, 2) points -> (N, 4F) features: sin and cos of each coordinate at F frequencies."""
    n = points.shape[0]
    x = reshape(points, (n, 2, 1)) * Tensor(freqs.reshape(1, 1, -1))
    return reshape(concat([sin(x), cos(x)], axis=-1), (n, 4 * len(freqs)))


@dataclass
class QueryBank:
    ref_points: Tensor  # (Nq_initial, 2), rows outside `alive` are never read
    embed_mlp: MLP
    alive: list[int] = field(default_factory=list)
    frequencies: int = 16

    def __post_init__(self):
        if not self.alive:
            self.alive = list(range(self.ref_points.shape[0]))
        self._check()

    def _check(self):
        a = np.asarray(self.alive)
        if np.any(np.diff(a) <= 0) or a[0] < 0 or a[-1] >= self.ref_points.shape[0]:
            raise ValueError("alive indices must be strictly increasing and within the bank")

    @property
    def size(self) -> int:
        return len(self.alive)

    def alive_points(self) -> Tensor:
        return take_rows(self.ref_points, self.alive)

    def queries(self) -> tuple[Tensor, Tensor]:
        """Return (query embeddings, alive reference points)."""
        if not self.alive:
            raise ShapeError("query bank has no alive queries")
        pts = self.alive_points()
        return self.embed_mlp(sinusoid(pts, sinusoid_frequencies(self.frequencies))), pts

    def remove(self, original_indices: Iterable[int]) -> None:
        drop = set(int(i) for i in original_indices)
        missing = drop.difference(self.alive)
        if missing:
            raise ValueError(f"queries {sorted(missing)} are not alive")
        self.alive = [i for i in self.alive if i not in drop]


@dataclass
class Prediction:
    scores: Tensor          # (..., Nq, C) sigmoid scores
    boxes: Tensor           # (..., Nq, 4) cx, cy, w, h
    layer_index: int
    logits: Tensor | None = None
    query_ids: tuple[int, ...] | None = None

    @property
    def num_queries(self) -> int:
        return self.scores.shape[-2]

    def sample(self, b: int) -> "Prediction":
        """Slice one scene out of a batched prediction (values only)."""
        lg = None if self.logits is None else Tensor(self.logits.data[b])
        return Prediction(Tensor(self.scores.data[b]), Tensor(self.boxes.data[b]), self.layer_index,
                          lg, self.query_ids)


@dataclass(frozen=True)
class Detection:
    query_index: int
    class_id: int
    score: float
    box: tuple[float, float, float, float]


@dataclass
class DetectorModel:
    config: ModelConfig
    encoder: SceneEncoder
    bank: QueryBank
    decoder: Decoder
    cls_head: MLP
    box_head: MLP

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "DetectorModel":
        e = config.embed_dim
        # cell embeddings start as a random projection of the same sinusoidal
        # code the queries see, so location matching is easy from step one
        pos = sinusoid(Tensor(cell_centers(config.grid)), sinusoid_frequencies(config.frequencies)).data
        proj = rng.normal(0.0, 1.0 / math.sqrt(pos.shape[1]), (pos.shape[1], e))
        encoder = SceneEncoder(parameter(pos @ proj),
                               parameter(rng.normal(0.0, 1.0, (config.num_classes, e))))
        bank = QueryBank(parameter(rng.uniform(0.0, 1.0, (config.num_queries, 2))),
                         MLP.init(rng, 4 * config.frequencies, e, e),
                         frequencies=config.frequencies)
        decoder = Decoder.init(rng, config.num_layers, e, config.hidden_dim, config.heads)
        cls_head = MLP.init(rng, e, e, config.num_classes)
        # prior probability 0.01 for every class, the usual focal-loss start
        cls_head.l2.b.data[:] = -math.log(99.0)
        box_head = MLP.init(rng, e, e, 4)
        return cls(config, encoder, bank, decoder, cls_head, box_head)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(iter_parameters(self))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in iter_parameters(self)]

    def encode(self, scenes: Sequence[Scene]) -> Tensor:
        return encode_scenes(scenes, self.encoder, self.config.sigma)

    def predict(self, features: Tensor, *, use_self_attention: bool = True) -> list[Prediction]:
        """Decoder and heads on pre-encoded features ``(Nk, E)`` or ``(B, Nk, E)``."""
        q, pts = self.bank.queries()
        if features.ndim == 3:
            q = reshape(q, (1, *q.shape))
        states = decoder_forward(q, features, self.decoder, use_self_attention=use_self_attention)
        n = pts.shape[0]
        anchor = concat([logit(pts), Tensor(np.zeros((n, 2)))], axis=-1)
        ids = tuple(self.bank.alive)
        preds = []
        for i, s in enumerate(states):
            lg = self.cls_head(s)
            boxes = sigmoid(self.box_head(s) + anchor)
            preds.append(Prediction(sigmoid(lg), boxes, i, lg, ids))
        return preds

    def forward(self, scene: Scene) -> list[Prediction]:
        return self.predict(encode_scene(scene, self.encoder, self.config.sigma))

    def forward_batch(self, scenes: Sequence[Scene]) -> list[Prediction]:
        return self.predict(self.encode(scenes))


def forward(model: DetectorModel, scene: Scene) -> list[Prediction]:
    return model.forward(scene)


def iter_parameters(obj, prefix: str = ""):
    """Yield ``(dotted_name, Tensor)`` for every trainable tensor, in a fixed order."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_parameters(item, f"{prefix}.{i}" if prefix else str(i))
        return
    fields = getattr(obj, "__dataclass_fields__", None)
    if fields is None:
        return
    for name in fields:
        yield from iter_parameters(getattr(obj, name), f"{prefix}.{name}" if prefix else name)


def select_topk(pred: Prediction, k: int) -> list[Detection]:
    """NMS-free selection: the k highest entries of the flattened (Nq*C) score table.

    Ties go to the lower query index, then the lower class id.
    """
    scores = pred.scores.data
    if scores.ndim != 2:
        raise ShapeError("select_topk takes a single-scene prediction")
    nq, c = scores.shape
    if not 1 <= k <= nq * c:
        raise ValueError(f"k={k} outside [1, {nq * c}]")
    flat = scores.ravel()
    # flat index q*C + c already orders ties by (query, class); a stable sort keeps it
    order = np.argsort(-flat, kind="stable")[:k]
    ids = pred.query_ids
    boxes = pred.boxes.data
    out = []
    for i in order:
        q, cls_id = divmod(int(i), c)
        out.append(Detection(ids[q] if ids is not None else q, cls_id, float(flat[i]),
                             tuple(float(v) for v in boxes[q])))
    return out
