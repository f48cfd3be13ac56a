"""AdamW, cosine learning-rate decay and the shared training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from gpq.detector import DetectorModel, Prediction, Scene
from gpq.matching import LossConfig, match, set_loss
from gpq.seeding import stream
from gpq.tensor import ComputeGraph, Tensor

NO_DECAY = ("bank.ref_points",)


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-3
    weight_decay: float = 1e-2
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    warmup: int = 50
    cosine: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def lr_at(cfg: OptimizerConfig, t: int, total: int) -> float:
    """Linear warmup then cosine decay to zero; ``t`` counts from 1."""
    if cfg.warmup and t <= cfg.warmup:
        return cfg.lr * t / cfg.warmup
    if not cfg.cosine or total <= cfg.warmup:
        return cfg.lr
    frac = (t - cfg.warmup) / (total - cfg.warmup)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(1.0, frac)))


class AdamW:
    def __init__(self, named_params: Sequence[tuple[str, Tensor]], cfg: OptimizerConfig):
        self.cfg = cfg
        self.params = dict(named_params)
        self.m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in self.params.items()}
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clip_gradients(self) -> float:
        sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params.values() if p.grad is not None)
        norm = math.sqrt(sq)
        if self.cfg.grad_clip and norm > self.cfg.grad_clip:
            scale = self.cfg.grad_clip / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * np.float32(scale)
        return norm

    def step(self, lr: float) -> None:
        self.steps += 1
        b1, b2 = self.cfg.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w = p.data.astype(np.float64)
            if self.cfg.weight_decay and p.ndim >= 2 and name not in NO_DECAY:
                w *= 1.0 - lr * self.cfg.weight_decay
            w -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
            p.data = w.astype(np.float32)

    def forget_rows(self, name: str, rows: Sequence[int]) -> None:
        """Drop the moment estimates of deleted rows of a parameter."""
        rows = list(rows)
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0


class StepHook(Protocol):
    def __call__(self, t: int, preds: list[Prediction], matches: list, optimizer: AdamW) -> None: ...


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)


def fit(model: DetectorModel, scenes: Sequence[Scene], iterations: int, opt: OptimizerConfig, seed: int,
        loss_cfg: LossConfig = LossConfig(), hooks: Sequence[StepHook] = (),
        progress: Callable[[int, float], None] | None = None) -> TrainLog:
    """Minibatch training; each hook runs after the parameter update of every iteration."""
    if not scenes:
        raise ValueError("no training scenes")
    rng = stream(seed, "shuffle")
    optimizer = AdamW(model.named_parameters(), opt)
    log = TrainLog()
    order = rng.permutation(len(scenes))
    cursor = 0
    for t in range(1, iterations + 1):
        if cursor + opt.batch_size > len(order):
            order, cursor = rng.permutation(len(scenes)), 0
        batch = [scenes[i] for i in order[cursor:cursor + opt.batch_size]]
        cursor += opt.batch_size

        with ComputeGraph() as graph:
            preds = model.forward_batch(batch)
            matches = [match(p, batch, loss_cfg) for p in preds]
            loss = set_loss(preds, batch, loss_cfg, matches=matches)
        graph.backward(loss)
        log.grad_norms.append(optimizer.clip_gradients())
        optimizer.step(lr_at(opt, t, iterations))
        optimizer.zero_grad()
        np.clip(model.bank.ref_points.data, 0.0, 1.0, out=model.bank.ref_points.data)
        log.losses.append(loss.data.item())
        for hook in hooks:
            hook(t, preds, matches, optimizer)
        if progress is not None:
            progress(t, loss.data.item())
    return log
