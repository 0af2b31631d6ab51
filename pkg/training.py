"""
Shared training-loop helpers: seeded epoch batching, batched evaluation,
accuracy and per-epoch logging used by every trainer.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterator, Optional, Tuple

import numpy as np

from datasets import Batch, Dataset, IDENTITY_POLICY, AugmentPolicy, batches
from errors import ConfigError, NonFiniteError
from numerics import RngStream, softmax_crossentropy

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 1000


def epoch_batches(ds: Dataset, batch_size: int, streams: dict, epoch: int,
                  policy: AugmentPolicy = IDENTITY_POLICY, *keys) -> Iterator[Batch]:
    """Shuffled batches for one epoch; ``keys`` separate phases that share a seed."""
    shuffle: RngStream = streams['shuffle'].child(*keys, epoch)
    augment: RngStream = streams['augment'].child(*keys, epoch)
    return batches(ds, batch_size, shuffle=True, rng=shuffle, policy=policy, augment_rng=augment)


def eval_batches(ds: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> Iterator[Batch]:
    return batches(ds, batch_size, shuffle=False)


def accuracy_pct(predictions: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(100.0 * np.mean(predictions == labels))


def evaluate_logits(logits_fn: Callable[[np.ndarray], np.ndarray], ds: Dataset,
                    batch_size: int = EVAL_BATCH_SIZE, dtype=None) -> Tuple[float, float]:
    """Mean cross-entropy and accuracy (%) of ``logits_fn`` over ``ds``."""
    total_loss, correct = 0.0, 0
    for x, y in eval_batches(ds, batch_size):
        if dtype is not None:
            x = x.astype(dtype, copy=False)
        logits = logits_fn(x)
        loss, _ = softmax_crossentropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    n = max(len(ds), 1)
    return total_loss / n, 100.0 * correct / n


def predict_in_batches(predict_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                       batch_size: int = EVAL_BATCH_SIZE) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([predict_fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def guard_loss(loss: float, algo: str, **context) -> float:
    if not np.isfinite(loss):
        raise NonFiniteError(f"{algo}: non-finite training loss", context)
    return loss


def require_epochs(max_epochs: int, what: str = "training") -> None:
    if max_epochs < 1:
        raise ConfigError(f"{what}: at least one epoch is required, got {max_epochs}")


def log_epoch(tag: str, epoch: int, train_loss: float, val_loss: Optional[float] = None,
              val_acc: Optional[float] = None, signal: str = "") -> None:
    parts = [f"[{tag}] epoch {epoch:4d}", f"loss={train_loss:.4f}"]
    if val_loss is not None:
        parts.append(f"val_loss={val_loss:.4f}")
    if val_acc is not None:
        parts.append(f"val_acc={val_acc:.2f}%")
    if signal:
        parts.append(f"({signal})")
    logger.info(" ".join(parts))
