"""Transformer decoder: multi-head attention, FFN, and the stacked layer recurrence.

All functions accept optional leading batch axes: a query tensor may be
``(Nq, E)`` or ``(B, Nq, E)``.  Heads are a reshape of the projected
features, so the head count changes per-head width and nothing else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from gpq.tensor import (
    ShapeError,
    Tensor,
    layer_norm,
    matmul,
    parameter,
    permute,
    relu,
    reshape,
    softmax_rows,
)


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "Linear":
        bound = math.sqrt(6.0 / (n_in + n_out))
        return cls(parameter(rng.uniform(-bound, bound, (n_in, n_out))),
                   parameter(np.zeros(n_out)))


@dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    @classmethod
    def init(cls, n: int) -> "LayerNorm":
        return cls(parameter(np.ones(n)), parameter(np.zeros(n)))


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int
    bq: Tensor = None
    bk: Tensor = None
    bv: Tensor = None
    bo: Tensor = None

    def __post_init__(self):
        e, dv = self.wq.shape[0], self.wv.shape[0]
        for name, w, n in (("wq", self.wq, e), ("wk", self.wk, e), ("wv", self.wv, dv), ("wo", self.wo, dv)):
            if w.shape != (n, n):
                raise ShapeError(f"{name} must be {n}x{n}, got {w.shape}")
        if self.heads < 1 or e % self.heads or dv % self.heads:
            raise ShapeError(f"heads={self.heads} must divide E={e} and Dv={dv}")
        # biases default to zero and stay trainable
        for name, n in (("bq", e), ("bk", e), ("bv", dv), ("bo", dv)):
            if getattr(self, name) is None:
                setattr(self, name, parameter(np.zeros(n)))

    @property
    def embed_dim(self) -> int:
        return self.wq.shape[0]

    @property
    def value_dim(self) -> int:
        return self.wv.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, embed_dim: int, value_dim: int, heads: int) -> "AttentionParams":
        def xavier(n):
            bound = math.sqrt(6.0 / (2 * n))
            return parameter(rng.uniform(-bound, bound, (n, n)))

        return cls(xavier(embed_dim), xavier(embed_dim), xavier(value_dim), xavier(value_dim), heads)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return permute(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    k = len(lead)
    x = permute(x, (*range(k), k + 1, k, k + 2))
    return reshape(x, (*lead, n, h * d))


def attention(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams, *, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention of ``q`` over ``(k, v)``.

    Scores are scaled by ``sqrt(Dv / H)`` per head.  When ``weights_out`` is
    a list, the ``(..., H, Nq, Nk)`` attention weights are appended to it.
    """
    e, dv = p.embed_dim, p.value_dim
    if q.shape[-1] != e or k.shape[-1] != e:
        raise ShapeError(f"query/key width must be E={e}, got {q.shape[-1]} and {k.shape[-1]}")
    if v.shape[-1] != dv:
        raise ShapeError(f"value width must be Dv={dv}, got {v.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys ({k.shape[-2]}) and values ({v.shape[-2]}) differ in count")
    if q.shape[-2] < 1 or k.shape[-2] < 1:
        raise ShapeError("attention needs at least one query and one key")

    h = p.heads
    qh = _split_heads(matmul(q, p.wq) + p.bq, h)
    kh = _split_heads(matmul(k, p.wk) + p.bk, h)
    vh = _split_heads(matmul(v, p.wv) + p.bv, h)
    kt = permute(kh, (*range(kh.ndim - 2), kh.ndim - 1, kh.ndim - 2))
    scores = matmul(qh, kt) * (1.0 / math.sqrt(dv / h))
    w = softmax_rows(scores)
    if weights_out is not None:
        weights_out.append(w.data)
    out = _merge_heads(matmul(w, vh))
    return matmul(out, p.wo) + p.bo


def self_attention(q: Tensor, p: AttentionParams, **kw) -> Tensor:
    if p.value_dim != p.embed_dim:
        raise ShapeError("self-attention needs Dv == E")
    return attention(q, q, q, p, **kw)


@dataclass
class DecoderLayer:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn1: Linear
    ffn2: Linear
    norm1: LayerNorm
    norm2: LayerNorm
    norm3: LayerNorm

    def __post_init__(self):
        if self.hidden_dim <= self.cross_attn.value_dim:
            raise ShapeError(f"FFN hidden width {self.hidden_dim} must exceed Dv={self.cross_attn.value_dim}")

    @property
    def hidden_dim(self) -> int:
        return self.ffn1.w.shape[1]

    @classmethod
    def init(cls, rng, embed_dim: int, hidden_dim: int, heads: int) -> "DecoderLayer":
        return cls(
            AttentionParams.init(rng, embed_dim, embed_dim, heads),
            AttentionParams.init(rng, embed_dim, embed_dim, heads),
            Linear.init(rng, embed_dim, hidden_dim),
            Linear.init(rng, hidden_dim, embed_dim),
            LayerNorm.init(embed_dim),
            LayerNorm.init(embed_dim),
            LayerNorm.init(embed_dim),
        )

    def ffn(self, x: Tensor) -> Tensor:
        return self.ffn2(relu(self.ffn1(x)))

    def __call__(self, q: Tensor, features: Tensor, *, use_self_attention: bool = True,
                 use_norm: bool = True, weights_out: dict | None = None) -> Tensor:
        def norm(ln, x):
            return ln(x) if use_norm else x

        sa_w = ca_w = None
        if weights_out is not None:
            sa_w, ca_w = weights_out.setdefault("self", []), weights_out.setdefault("cross", [])
        if use_self_attention:
            q = norm(self.norm1, q + self_attention(q, self.self_attn, weights_out=sa_w))
        q = norm(self.norm2, q + attention(q, features, features, self.cross_attn, weights_out=ca_w))
        return norm(self.norm3, q + self.ffn(q))


@dataclass
class Decoder:
    layers: list[DecoderLayer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a decoder needs at least one layer")
        dims = {(l.self_attn.embed_dim, l.cross_attn.value_dim, l.hidden_dim) for l in self.layers}
        if len(dims) != 1:
            raise ShapeError(f"all layers must share E, Dv and h, got {sorted(dims)}")

    @classmethod
    def init(cls, rng, num_layers: int, embed_dim: int, hidden_dim: int, heads: int) -> "Decoder":
        return cls([DecoderLayer.init(rng, embed_dim, hidden_dim, heads) for _ in range(num_layers)])


def decoder_forward(queries: Tensor, features: Tensor, d: Decoder, *, use_self_attention: bool = True,
                    use_norm: bool = True, weights_out: dict | None = None) -> list[Tensor]:
    """Run the layer recurrence and return every layer's query state."""
    if queries.shape[-2] == 0:
        raise ShapeError("decoder_forward needs at least one query")
    states = []
    q = queries
    for layer in d.layers:
        q = layer(q, features, use_self_attention=use_self_attention, use_norm=use_norm,
                  weights_out=weights_out)
        states.append(q)
    return states
