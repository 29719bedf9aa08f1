"""Deterministic training loop: seeded shuffling, per-batch mixup negatives,
SGD with classical momentum, and a step learning-rate schedule.

Everything downstream of (seed, data, config) is reproducible: shuffle and
negative-sampling generators are derived from (seed, epoch, batch) seed
sequences, parameters update in a fixed order, and float64 does the math
while parameters stay float32.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import persist
from .encoders import EmbeddingMatrix
from .errors import ConfigError, InvalidArgumentError
from .head import MlpHead
from .losses import (
    HeadGrads,
    LossBreakdown,
    LossConfig,
    NegativeSet,
    TrainingBatch,
    build_negative_set,
    loss_and_grad,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 160
    batch_size: int = 32
    lr: float = 1e-5
    momentum: float = 0.99
    step_size: int = 30
    gamma: float = 0.25
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.momentum < 0:
            raise ConfigError(f"momentum must be >= 0, got {self.momentum}")
        if self.step_size < 1:
            raise ConfigError(f"step_size must be >= 1, got {self.step_size}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")


@dataclass
class EpochStats:
    epoch: int
    lr: float
    total: float
    pcc_layers: tuple[float, ...]
    ce: float
    batches: int
    skipped: int


@dataclass
class TrainingState:
    head: MlpHead
    velocities: dict[str, np.ndarray]
    epoch: int = 0
    history: list[EpochStats] = field(default_factory=list)

    @classmethod
    def fresh(cls, head: MlpHead) -> "TrainingState":
        vel = {name: np.zeros(arr.shape, dtype=np.float64) for name, arr in head.param_items()}
        return cls(head=head, velocities=vel)


def lr_at(epoch: int, cfg: TrainingConfig) -> float:
    """Step schedule: lr * gamma ** floor(epoch / step_size)."""
    if epoch < 0:
        raise InvalidArgumentError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


def sgd_step(state: TrainingState, grads: HeadGrads, lr: float, momentum: float) -> TrainingState:
    """Classical momentum update: v <- momentum*v + g; theta <- theta - lr*v.

    Buffers accumulate in float64; parameters are written back in their own
    dtype. Mutates and returns the state.
    """
    for (name, param), (gname, grad) in zip(state.head.param_items(), grads.param_items()):
        if name != gname or param.shape != grad.shape:
            raise InvalidArgumentError(f"gradient {gname}{grad.shape} does not match {name}{param.shape}")
        v = state.velocities[name]
        v *= momentum
        v += grad
        updated = param.astype(np.float64) - lr * v
        param[...] = updated.astype(param.dtype)
    return state


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, epoch)))


def _batch_rng(seed: int, epoch: int, batch_idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3, epoch, batch_idx)))


def train(
    features: EmbeddingMatrix | np.ndarray,
    labels: np.ndarray,
    class_text_features: np.ndarray,
    peer_text_features: dict[int, np.ndarray],
    head: MlpHead,
    cfg: TrainingConfig,
) -> TrainingState:
    """Train the head on frozen features.

    class_text_features row c is the encoded description of class c;
    peer_text_features maps class index -> (n_peers, dim) matrix. Batches
    are drawn by a seeded shuffle each epoch, the last partial batch is
    dropped, and single-class batches are skipped with a warning.
    """
    x = features.values if isinstance(features, EmbeddingMatrix) else features
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    class_text = np.asarray(class_text_features, dtype=np.float64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise InvalidArgumentError("features must be (n, dim) with one label per row")
    n_classes = class_text.shape[0]
    present = np.unique(labels)
    if present.size < 2:
        raise ConfigError("training data must cover at least 2 classes")
    if present.max() >= n_classes:
        raise ConfigError("a label indexes past the class description matrix")
    if cfg.loss.use_pcc and cfg.loss.use_mixup:
        for cls in present:
            peers = peer_text_features.get(int(cls))
            if peers is None or len(peers) == 0:
                raise ConfigError(f"class {int(cls)} has no peer description features")

    state = TrainingState.fresh(head)
    n = x.shape[0]
    n_batches = n // cfg.batch_size
    if cfg.epochs > 0 and n_batches == 0:
        raise ConfigError(
            f"dataset of {n} rows yields no full batch of size {cfg.batch_size}"
        )

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        perm = _epoch_rng(cfg.seed, epoch).permutation(n)
        sums: dict[str, float] = {}
        used = 0
        skipped = 0
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch_labels = labels[idx]
            if np.unique(batch_labels).size < 2:
                skipped += 1
                logger.warning("epoch %d batch %d: single-class batch skipped", epoch, b)
                continue
            batch = TrainingBatch(
                image_features=x[idx],
                labels=batch_labels,
                text_features=class_text[batch_labels],
            )
            negatives: NegativeSet | None = None
            if cfg.loss.use_pcc and cfg.loss.use_mixup:
                negatives = build_negative_set(
                    batch, peer_text_features, cfg.loss.mix_lambda,
                    _batch_rng(cfg.seed, epoch, b),
                )
            breakdown, grads = loss_and_grad(state.head, batch, negatives, cfg.loss)
            sgd_step(state, grads, lr, cfg.momentum)
            for key, val in breakdown.as_row().items():
                sums[key] = sums.get(key, 0.0) + val
            used += 1

        if used == 0:
            means = {key: float("nan") for key in ("total", "pcc1", "pcc2", "pcc3", "ce")}
        else:
            means = {key: val / used for key, val in sums.items()}
        state.epoch = epoch + 1
        state.head.epoch = epoch + 1
        state.history.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                total=means.get("total", float("nan")),
                pcc_layers=tuple(means.get(f"pcc{i}", float("nan")) for i in (1, 2, 3)),
                ce=means.get("ce", float("nan")),
                batches=used,
                skipped=skipped,
            )
        )
    return state


def write_loss_history(history: list[EpochStats], path: str | Path) -> None:
    """CSV with one row per epoch: epoch, lr, total, pcc1, pcc2, pcc3, ce."""
    rows = ["epoch,lr,total,pcc1,pcc2,pcc3,ce"]
    for st in history:
        p = list(st.pcc_layers) + [float("nan")] * (3 - len(st.pcc_layers))
        rows.append(
            f"{st.epoch},{st.lr!r},{st.total!r},{p[0]!r},{p[1]!r},{p[2]!r},{st.ce!r}"
        )
    persist.atomic_write_text(path, "\n".join(rows) + "\n")
