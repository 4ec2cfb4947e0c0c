"""Loss, Adam, the epoch loop, and improvement-gated checkpointing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Volume
from .errors import ConfigError, DataError, NumericError, UsageError
from .rng import Rng, derive_seed

MONITORS = ("val_loss", "val_acc")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters. Defaults are the reference setup."""

    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 1500
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0
    monitor: str = "val_loss"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("Adam epsilon must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.monitor not in MONITORS:
            raise ConfigError(f"monitor must be one of {MONITORS}")


class AdamState:
    """First/second-moment accumulators mirroring the parameter arrays."""

    def __init__(self, params: M.ModelParams):
        self.m = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
        self.step_count = 0

    @property
    def scalar_count(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())


def sparse_ce_loss(probs: np.ndarray, labels) -> float:
    """Mean of -ln p[label] over the batch, straight from probabilities.

    Evaluation-side definition; the trainer uses the fused logits form
    below, which computes the same quantity stably.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise UsageError(f"got probs {probs.shape} and labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise DataError(f"label out of range [0, {probs.shape[1]})")
    picked = probs[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        return float(np.mean(-np.log(picked)))


def sparse_ce_loss_from_logits(logits: T.Tensor, labels) -> T.Tensor:
    """Differentiable fused cross-entropy (logsumexp-stabilized)."""
    return T.softmax_cross_entropy(logits, labels)


def adam_step(params: M.ModelParams, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update in place.

    All gradients are checked for finiteness before anything mutates, so
    a bad step aborts cleanly (NumericError) with params and state intact.
    """
    grads = []
    for name, tensor in params.named_parameters():
        g = tensor.grad
        if g is None:
            raise UsageError(f"no gradient for '{name}'; run backward first")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in '{name}'; step aborted")
        grads.append((name, tensor, g))
    t = state.step_count + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, tensor, g in grads:
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    state.step_count = t


def _stack(volumes: Sequence[Volume]) -> tuple[np.ndarray, np.ndarray]:
    voxels = np.stack([v.voxels for v in volumes]).astype(np.float32)
    labels = np.array([v.label for v in volumes], dtype=np.int64)
    return voxels, labels


def evaluate(params: M.ModelParams, config: M.ModelConfig, volumes: Sequence[Volume],
             batch_size: int = 128) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) over a volume list, without a tape."""
    if not volumes:
        raise DataError("cannot evaluate an empty set")
    voxels, labels = _stack(volumes)
    total_loss = 0.0
    correct = 0
    for start in range(0, len(volumes), batch_size):
        vb = voxels[start : start + batch_size]
        lb = labels[start : start + batch_size]
        logits = M.forward_logits(vb, params, config)
        loss = T.softmax_cross_entropy(logits, lb)
        total_loss += float(loss.data) * len(lb)
        correct += int((M.predict_classes(logits.data) == lb).sum())
    return total_loss / len(volumes), correct / len(volumes)


def predict_probs(params: M.ModelParams, config: M.ModelConfig,
                  volumes: Sequence[Volume], batch_size: int = 128) -> np.ndarray:
    """Class probabilities [n, classes] for a volume list."""
    voxels = np.stack([v.voxels for v in volumes]).astype(np.float32)
    chunks = []
    for start in range(0, len(volumes), batch_size):
        probs = M.forward(voxels[start : start + batch_size], params, config)
        chunks.append(probs.data)
    return np.concatenate(chunks, axis=0)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_value: float = float("nan")
    checkpoint_path: Optional[str] = None


def write_history(history: Sequence[dict], path) -> None:
    """History JSONL: one {"epoch", "train_loss", "val_loss", "val_acc",
    "checkpointed"} record per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps({
                "epoch": row["epoch"],
                "train_loss": row["train_loss"],
                "val_loss": row["val_loss"],
                "val_acc": row["val_acc"],
                "checkpointed": row["checkpointed"],
            }) + "\n")


def train(params: M.ModelParams, config: M.ModelConfig,
          train_set: Sequence[Volume], val_set: Sequence[Volume],
          cfg: TrainConfig, checkpoint_path=None, history_path=None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run the epoch loop with improvement-gated checkpointing.

    Each epoch reshuffles the training set from a stream derived from
    cfg.seed (derive_seed(seed, 1)), walks it in batches of
    cfg.batch_size (last partial batch kept), and evaluates the
    validation set. A checkpoint is written only when the monitored
    metric strictly improves. Identical seeds give bit-identical
    histories and checkpoint bytes.
    """
    if not train_set or not val_set:
        raise DataError("train and validation sets must be non-empty")
    voxels, labels = _stack(train_set)
    n = len(train_set)
    leaves = params.tensors()
    state = AdamState(params)
    shuffle_rng = Rng(derive_seed(cfg.seed, 1))
    minimize = cfg.monitor == "val_loss"
    best = float("inf") if minimize else float("-inf")
    result = TrainResult(checkpoint_path=checkpoint_path)
    order = list(range(n))
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            with T.Tape() as tape:
                logits = M.forward_logits(voxels[batch_idx], params, config)
                loss = T.softmax_cross_entropy(logits, labels[batch_idx])
            tape.backward(loss, leaves=leaves)
            adam_step(params, state, cfg)
            epoch_loss += float(loss.data) * len(batch_idx)
        val_loss, val_acc = evaluate(params, config, val_set, cfg.batch_size)
        metric = val_loss if minimize else val_acc
        improved = metric < best if minimize else metric > best
        if improved:
            best = metric
            result.best_epoch = epoch
            result.best_value = metric
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, params)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / n,
            "val_loss": val_loss,
            "val_acc": val_acc,
            "checkpointed": bool(improved and checkpoint_path is not None),
        }
        result.history.append(row)
        if on_epoch is not None:
            on_epoch(row)
    if history_path is not None:
        write_history(result.history, history_path)
    return result
