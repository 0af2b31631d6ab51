"""
Backpropagation baseline trainer for the MLP catalog and the 3-block CNN.

End-to-end softmax cross-entropy, one optimizer over every parameter, early
stopping on validation accuracy, and test evaluation from the restored best
checkpoint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, List, Optional

from datasets import Batch, DataBundle, Dataset
from errors import ConfigError, NonFiniteError
from model_specs import ModelSpec, parse_architecture
from nn import Module, build_model
from numerics import make_streams, resolve_dtype, softmax_crossentropy
from optim import EarlyStopper, Optimizer, StopSignal, early_stop_update
from results import EpochRecord, RunResult
from training import epoch_batches, evaluate_logits, guard_loss, log_epoch, require_epochs

if TYPE_CHECKING:
    from harness import ExperimentConfig

logger = logging.getLogger(__name__)


@dataclass
class BPRunState:
    model: Module
    optimizer: Optimizer
    stopper: EarlyStopper
    epoch: int = 0
    best_state: Optional[dict] = None
    trace: List[EpochRecord] = field(default_factory=list)


def bp_train_epoch(state: BPRunState, train_batches: Iterable[Batch]) -> float:
    """One pass over ``train_batches`` with one optimizer step per batch; returns mean loss."""
    model = state.model
    model.set_mode('train')
    dtype = next(iter(model.named_parameters().values())).dtype
    total, count = 0.0, 0
    for i, (x, y) in enumerate(train_batches):
        try:
            logits, caches = model.forward(x.astype(dtype, copy=False))
            loss, grad_logits = softmax_crossentropy(logits, y)
        except NonFiniteError as e:
            raise e.with_context(algo='bp', epoch=state.epoch, batch=i)
        guard_loss(loss, 'bp', epoch=state.epoch, batch=i)
        state.optimizer.step(model.backward(caches, grad_logits))
        total += loss * len(y)
        count += len(y)
    return total / max(count, 1)


def evaluate(model: Module, ds: Dataset):
    """(mean loss, accuracy %) with BatchNorm in eval mode."""
    model.set_mode('eval')
    dtype = next(iter(model.named_parameters().values())).dtype
    return evaluate_logits(model.predict_logits, ds, dtype=dtype)


def _stopper_value(metric: str, val_loss: float, val_acc: float) -> float:
    return val_loss if metric == 'val_loss' else val_acc / 100.0


def train_bp(config: "ExperimentConfig", data: DataBundle, seed: int,
             spec: Optional[ModelSpec] = None) -> RunResult:
    hp = config.hyperparameters
    es = config.early_stopping
    require_epochs(hp.max_epochs, "bp")
    streams = make_streams(seed)
    spec = spec or parse_architecture(config.architecture, data.meta, final_head=True)
    if not spec.final_head:
        raise ConfigError("bp needs a model with a final classification head")
    model = build_model(spec, streams['weight-init'], resolve_dtype(config.precision))
    optimizer = Optimizer(model.named_parameters(), hp.optimizer, hp.lr, hp.weight_decay, hp.momentum)
    state = BPRunState(model, optimizer, EarlyStopper(es.mode, es.patience, es.min_delta))
    logger.info(f"[bp] {spec.name} on {data.meta.name}: {model.parameter_count():,} parameters, "
                f"{hp.optimizer} lr={hp.lr:g} wd={hp.weight_decay:g}")

    best_val_acc = 0.0
    for epoch in range(1, hp.max_epochs + 1):
        state.epoch = epoch
        train_loss = bp_train_epoch(state, epoch_batches(data.train, config.batch_size, streams, epoch, data.policy))
        val_loss, val_acc = evaluate(model, data.val)
        signal = early_stop_update(state.stopper, epoch, _stopper_value(es.metric, val_loss, val_acc))
        if signal is StopSignal.IMPROVED:
            state.best_state = model.state_dict()
            best_val_acc = val_acc
        state.trace.append(EpochRecord('global', epoch, train_loss, val_loss, val_acc))
        log_epoch('bp', epoch, train_loss, val_loss, val_acc, signal.value)
        if signal is StopSignal.STOP:
            break

    model.load_state_dict(state.best_state)
    _, test_acc = evaluate(model, data.test)
    logger.info(f"[bp] best epoch {state.stopper.best_epoch}, test_acc={test_acc:.2f}% after {state.epoch} epochs")
    return RunResult(
        algo='bp', dataset=data.meta.name, arch=spec.name, seed=seed, test_acc=test_acc,
        effective_epochs=state.epoch, variant=config.variant or '', val_acc=best_val_acc,
        trace=state.trace, extras={'best_epoch': state.stopper.best_epoch,
                                   'parameters': model.parameter_count()},
    )
