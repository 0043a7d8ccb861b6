"""Nesterov-momentum SGD with a step learning-rate schedule."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import rng as rngmod
from .augment import AugmentSpec, apply_policy
from .model import Network, backprop


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 1500
    batch_size: int = 256
    base_lr: float = 0.1
    lr_drop_every: int = 250
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_bn: bool = True
    seed: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec(**self.augment)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batchnorm statistics)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lr_drop_factor <= 0 or self.lr_drop_every < 1:
            raise ValueError("lr_drop_factor must be > 0 and lr_drop_every >= 1")


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = epoch // cfg.lr_drop_every
    # divide rather than multiply by factor**-drops so 0.1/10 is exactly 0.01
    try:
        return cfg.base_lr / cfg.lr_drop_factor ** drops
    except OverflowError:
        return 0.0


class OptimizerState:
    """One zero-initialized velocity per parameter."""

    def __init__(self, params):
        self.velocity = {name: np.zeros_like(p) for name, p in params.items()}


def nesterov_step(params, grads, state, lr, momentum, weight_decay, no_decay=()):
    """In-place update: g' = g + wd*theta; v = mu*v + g'; theta -= lr*(g' + mu*v)."""
    for name, theta in params.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ValueError(f"shape mismatch for parameter {name}")
        wd = 0.0 if name in no_decay else weight_decay
        g = g + wd * theta if wd else g
        v *= momentum
        v += g
        theta -= lr * (g + momentum * v)
    return params, state


def images_to_batch(images):
    return np.ascontiguousarray(np.stack(images).transpose(0, 3, 1, 2))


def channel_mean(samples):
    return np.mean([s.image.mean(axis=(0, 1)) for s in samples], axis=0)


def fit(net: Network, samples, cfg: TrainConfig, workers=1, on_epoch=None):
    """Train a copy of ``net``; returns (trained network, per-epoch log records)."""
    if not samples:
        raise ValueError("fit needs a non-empty dataset")
    if cfg.batch_size > len(samples):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {len(samples)}")
    net = net.copy()
    net.seed_lineage = {**net.seed_lineage, "train_seed": int(cfg.seed)}
    spec = cfg.augment
    fill = spec.fill_value if spec.fill_value is not None else channel_mean(samples).tolist()
    state = OptimizerState(net.params)
    no_decay = () if cfg.decay_bn else {n for n in net.params if ".gamma" in n or ".beta" in n}
    labels_all = np.array([s.label for s in samples])
    log = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None

    def augment(epoch, idx):
        stream = rngmod.substream(cfg.seed, rngmod.AUGMENT, epoch, int(idx))
        return apply_policy(spec, samples[idx].image, stream, fill_value=fill)

    try:
        with threadpool_limits(1), np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(cfg.epochs):
                t0 = time.perf_counter()
                lr = lr_at_epoch(cfg, epoch)
                perm = rngmod.substream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(len(samples))
                losses = []
                for start in range(0, len(perm) - cfg.batch_size + 1, cfg.batch_size):
                    idx = perm[start:start + cfg.batch_size]
                    jobs = [(epoch, i) for i in idx]
                    imgs = list(pool.map(lambda a: augment(*a), jobs)) if pool else [augment(*a) for a in jobs]
                    loss, _, grads = backprop(net, images_to_batch(imgs), labels_all[idx])
                    if not np.isfinite(loss):
                        raise TrainingDivergedError(epoch, loss)
                    nesterov_step(net.params, grads, state, lr, cfg.momentum, cfg.weight_decay, no_decay)
                    if not all(np.isfinite(p).all() for p in net.params.values()):
                        raise TrainingDivergedError(epoch, "non-finite parameters")
                    losses.append(loss)
                record = {"epoch": epoch, "lr": lr, "mean_loss": float(np.mean(losses)),
                          "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
                log.append(record)
                if on_epoch is not None:
                    on_epoch(record)
    finally:
        if pool:
            pool.shutdown()
    return net, log
