"""
Cascaded-Forward trainer on the 3-block CNN.

Blocks are either kept at their random initialization (``rand``) or
pre-trained with direct feedback alignment (``dfa``) and then frozen. Each
block gets its own linear predictor trained with cross-entropy and its own
early stopping; inference sums the three predictors' logits.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

from config import config as env_config
from datasets import IDENTITY_POLICY, DataBundle, Dataset
from errors import ConfigError, NonFiniteError, ShapeError
from model_specs import CNNSpec, cnn_block_flat_dims, cnn_block_shapes, parse_architecture
from nn import (
    BlockCache,
    ConvBlock,
    Module,
    Predictor,
    block_backward,
    block_forward,
    init_conv_blocks,
    init_predictor,
    predictor_backward,
    predictor_forward,
)
from numerics import RngStream, make_streams, resolve_dtype, softmax_crossentropy
from optim import EarlyStopper, Optimizer, StopSignal, early_stop_update
from results import EpochRecord, RunResult
from training import (
    EVAL_BATCH_SIZE,
    accuracy_pct,
    epoch_batches,
    eval_batches,
    guard_loss,
    log_epoch,
    predict_in_batches,
    require_epochs,
)

if TYPE_CHECKING:
    from harness import ExperimentConfig

logger = logging.getLogger(__name__)

CAFO_VARIANTS = ('rand', 'dfa')


# ============================================================================
# MODEL
# ============================================================================

class CaFoModel(Module):
    def __init__(self, spec: CNNSpec, blocks: List[ConvBlock], predictors: List[Predictor], variant: str):
        if variant not in CAFO_VARIANTS:
            raise ConfigError(f"cafo variant must be one of {CAFO_VARIANTS}, got '{variant}'")
        self.spec = spec
        self.blocks = blocks
        self.predictors = predictors
        self.variant = variant
        self.blocks_frozen = False

    def named_parameters(self):
        params = OrderedDict(self.block_parameters())
        for k, pred in enumerate(self.predictors):
            params[f'predictor{k}.W'] = pred.W
            params[f'predictor{k}.b'] = pred.b
        return params

    def block_parameters(self):
        params = OrderedDict()
        for i, block in enumerate(self.blocks):
            params[f'block{i}.kernels'] = block.kernels
            params[f'block{i}.bias'] = block.bias
            params[f'block{i}.gamma'] = block.bn.gamma
            params[f'block{i}.beta'] = block.bn.beta
        return params

    def named_buffers(self):
        buffers = OrderedDict()
        for i, block in enumerate(self.blocks):
            buffers[f'block{i}.running_mean'] = block.bn.running_mean
            buffers[f'block{i}.running_var'] = block.bn.running_var
        return buffers

    def set_mode(self, mode: str) -> None:
        for block in self.blocks:
            block.bn.mode = mode

    def freeze(self) -> None:
        self.set_mode('eval')
        self.blocks_frozen = True

    @property
    def dtype(self):
        return self.blocks[0].kernels.dtype

    def block_outputs(self, x: np.ndarray, upto: Optional[int] = None) -> List[np.ndarray]:
        """Outputs of blocks 0..upto (all by default) with running BatchNorm statistics."""
        if not self.blocks_frozen:
            raise ShapeError("block_outputs is for frozen blocks; call freeze() first")
        upto = len(self.blocks) - 1 if upto is None else upto
        outs = []
        h = x.astype(self.dtype, copy=False)
        for block in self.blocks[:upto + 1]:
            h, _ = block_forward(block, h, update_running=False)
            outs.append(h)
        return outs


def build_cafo_model(spec: CNNSpec, streams: Dict[str, RngStream], variant: str, dtype=np.float32) -> CaFoModel:
    blocks = init_conv_blocks(spec, streams['weight-init'].child('blocks'), dtype)
    predictors = [init_predictor(flat, spec.num_classes, streams['weight-init'].child('predictor', k), dtype)
                  for k, flat in enumerate(cnn_block_flat_dims(spec))]
    return CaFoModel(spec, blocks, predictors, variant)


def cafo_logits(model: CaFoModel, x: np.ndarray) -> np.ndarray:
    outs = model.block_outputs(x)
    return sum(predictor_forward(pred, out) for pred, out in zip(model.predictors, outs))


def cafo_predict(model: CaFoModel, x: np.ndarray) -> np.ndarray:
    """Argmax of the summed predictor logits; ties go to the lowest class index."""
    return cafo_logits(model, x).argmax(axis=1)


# ============================================================================
# DIRECT FEEDBACK ALIGNMENT
# ============================================================================

@dataclass
class DFAFeedback:
    """Fixed random matrices B_k (flat_dim_k x num_classes), one per block."""
    matrices: List[np.ndarray]
    seed: int

    @classmethod
    def create(cls, spec: CNNSpec, rng: RngStream, scale: float = 1.0, dtype=np.float32) -> "DFAFeedback":
        bound = scale * np.sqrt(6.0 / spec.num_classes)
        matrices = [rng.uniform(-bound, bound, size=(flat, spec.num_classes)).astype(dtype)
                    for flat in cnn_block_flat_dims(spec)]
        for m in matrices:
            m.setflags(write=False)
        return cls(matrices, rng.seed)

    def project(self, k: int, error: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """delta_k = e B_k^T reshaped to block k's output."""
        return (error @ self.matrices[k].T).reshape(shape)


def dfa_block_gradients(model: CaFoModel, caches: List[BlockCache], outputs: List[np.ndarray],
                        error: np.ndarray, feedback: DFAFeedback) -> Dict[str, np.ndarray]:
    """Inject each block's projected error at its output and backprop only through that block."""
    grads = {}
    for k, (block, cache, out) in enumerate(zip(model.blocks, caches, outputs)):
        delta = feedback.project(k, error, out.shape).astype(out.dtype, copy=False)
        block_grads, _ = block_backward(block, cache, delta)
        for name, value in block_grads.items():
            grads[f'block{k}.{name}'] = value
    return grads


def dfa_pretrain_blocks(model: CaFoModel, data: DataBundle, hp, streams: Dict[str, RngStream],
                        batch_size: int, feedback: Optional[DFAFeedback] = None
                        ) -> Tuple[int, List[EpochRecord], DFAFeedback]:
    """
    Train the blocks with DFA through a temporary linear head on block 3.

    Returns:
        (block epochs completed, trace, feedback matrices)
    """
    if model.variant != 'dfa':
        raise ConfigError("dfa_pretrain_blocks needs the 'dfa' variant")
    require_epochs(hp.epochs_per_block, "cafo dfa blocks")
    spec = model.spec
    feedback = feedback or DFAFeedback.create(spec, streams['dfa-feedback'], hp.dfa_scale, model.dtype)
    head = init_predictor(cnn_block_flat_dims(spec)[-1], spec.num_classes,
                          streams['weight-init'].child('dfa-head'), model.dtype)
    block_opt = Optimizer(model.block_parameters(), 'adam', hp.block_lr, hp.block_weight_decay)
    head_opt = Optimizer({'W': head.W, 'b': head.b}, 'adam', hp.block_lr, hp.block_weight_decay)
    stopper = EarlyStopper('minimize', hp.patience, 0.0)
    trace: List[EpochRecord] = []
    best = None
    epoch = 0

    for epoch in range(1, hp.epochs_per_block + 1):
        model.set_mode('train')
        total, count = 0.0, 0
        for b, (x, y) in enumerate(epoch_batches(data.train, batch_size, streams, epoch, data.policy, 'dfa')):
            h = x.astype(model.dtype, copy=False)
            caches, outputs = [], []
            for block in model.blocks:
                h, cache = block_forward(block, h)
                caches.append(cache)
                outputs.append(h)
            logits = predictor_forward(head, h)
            loss, error = softmax_crossentropy(logits, y)
            if not np.all(np.isfinite(error)):
                raise NonFiniteError("cafo dfa: non-finite error signal", {'epoch': epoch, 'batch': b})
            guard_loss(loss, 'cafo-dfa', epoch=epoch, batch=b)
            grads = dfa_block_gradients(model, caches, outputs, error, feedback)
            gW, gb, _ = predictor_backward(head, h, error)
            block_opt.step(grads)
            head_opt.step({'W': gW, 'b': gb})
            total += loss * len(y)
            count += len(y)

        model.set_mode('eval')
        val_loss, val_acc = _head_eval(model, head, data.val)
        signal = early_stop_update(stopper, epoch, val_loss)
        if signal is StopSignal.IMPROVED:
            best = model.state_dict()
        train_loss = total / max(count, 1)
        trace.append(EpochRecord('dfa', epoch, train_loss, val_loss, val_acc))
        log_epoch('cafo-dfa', epoch, train_loss, val_loss, val_acc, signal.value)
        if signal is StopSignal.STOP:
            break

    model.load_state_dict(best)
    return epoch, trace, feedback


def _head_eval(model: CaFoModel, head: Predictor, ds: Dataset) -> Tuple[float, float]:
    total, correct = 0.0, 0
    for x, y in eval_batches(ds):
        h = x.astype(model.dtype, copy=False)
        for block in model.blocks:
            h, _ = block_forward(block, h, update_running=False)
        logits = predictor_forward(head, h)
        loss, _ = softmax_crossentropy(logits, y)
        total += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    n = max(len(ds), 1)
    return total / n, 100.0 * correct / n


def calibrate_batchnorm(model: CaFoModel, ds: Dataset, batch_size: int, streams: Dict[str, RngStream]) -> None:
    """One train-mode pass that only refreshes BatchNorm running statistics."""
    model.set_mode('train')
    for x, _ in epoch_batches(ds, batch_size, streams, 0, IDENTITY_POLICY, 'bn-calibration'):
        h = x.astype(model.dtype, copy=False)
        for block in model.blocks:
            h, _ = block_forward(block, h, update_running=True)
    model.set_mode('eval')


# ============================================================================
# PREDICTORS
# ============================================================================

@dataclass
class FeatureCache:
    """Frozen block-k features for the train and validation sets."""
    train: np.ndarray
    val: np.ndarray


def compute_features(model: CaFoModel, k: int, ds: Dataset) -> np.ndarray:
    chunks = []
    for x, _ in eval_batches(ds):
        chunks.append(model.block_outputs(x, upto=k)[k])
    return np.concatenate(chunks)


def feature_cache_fits(model: CaFoModel, k: int, data: DataBundle, budget_mib: int) -> bool:
    c, h, w = cnn_block_shapes(model.spec)[k]
    nbytes = (len(data.train) + len(data.val)) * c * h * w * np.dtype(model.dtype).itemsize
    return nbytes <= budget_mib * 1024 * 1024


@dataclass
class PredictorResult:
    index: int
    epochs: int
    best_val_loss: float
    trace: List[EpochRecord] = field(default_factory=list)


def _predictor_val(model: CaFoModel, k: int, pred: Predictor, ds: Dataset,
                   cache: Optional[FeatureCache]) -> Tuple[float, float]:
    total, correct = 0.0, 0
    if cache is not None:
        chunks = [(cache.val[i:i + EVAL_BATCH_SIZE], ds.labels[i:i + EVAL_BATCH_SIZE])
                  for i in range(0, len(ds), EVAL_BATCH_SIZE)]
    else:
        chunks = ((model.block_outputs(x, upto=k)[k], y) for x, y in eval_batches(ds))
    for feats, y in chunks:
        logits = predictor_forward(pred, feats)
        loss, _ = softmax_crossentropy(logits, y)
        total += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    n = max(len(ds), 1)
    return total / n, 100.0 * correct / n


def train_predictor(k: int, model: CaFoModel, data: DataBundle, hp, streams: Dict[str, RngStream],
                    batch_size: int, cache: Optional[FeatureCache] = None) -> PredictorResult:
    """
    Train predictor ``k`` on frozen block-k features with its own Adam optimizer
    and early stopping on its validation loss; the best predictor is restored.
    """
    if not model.blocks_frozen:
        raise ConfigError("predictors train on frozen blocks; call freeze() first")
    require_epochs(hp.epochs_per_block, f"cafo predictor {k + 1}")
    pred = model.predictors[k]
    opt = Optimizer({'W': pred.W, 'b': pred.b}, 'adam', hp.predictor_lr, hp.predictor_weight_decay)
    stopper = EarlyStopper('minimize', hp.patience, 0.0)
    trace: List[EpochRecord] = []
    best = (pred.W.copy(), pred.b.copy())
    tag = f'predictor{k + 1}'
    epoch = 0

    for epoch in range(1, hp.epochs_per_block + 1):
        total, count = 0.0, 0
        if cache is not None:
            order = streams['shuffle'].child('predictor', k, epoch).permutation(len(data.train))
            source = ((cache.train[idx], data.train.labels[idx])
                      for idx in (order[i:i + batch_size] for i in range(0, len(order), batch_size)))
        else:
            source = ((model.block_outputs(x, upto=k)[k], y)
                      for x, y in epoch_batches(data.train, batch_size, streams, epoch, data.policy, 'predictor', k))
        for b, (feats, y) in enumerate(source):
            logits = predictor_forward(pred, feats)
            loss, grad_logits = softmax_crossentropy(logits, y)
            guard_loss(loss, 'cafo', predictor=k + 1, epoch=epoch, batch=b)
            gW, gb, _ = predictor_backward(pred, feats, grad_logits)
            opt.step({'W': gW, 'b': gb})
            total += loss * len(y)
            count += len(y)

        val_loss, val_acc = _predictor_val(model, k, pred, data.val, cache)
        signal = early_stop_update(stopper, epoch, val_loss)
        if signal is StopSignal.IMPROVED:
            best = (pred.W.copy(), pred.b.copy())
        train_loss = total / max(count, 1)
        trace.append(EpochRecord(tag, epoch, train_loss, val_loss, val_acc))
        log_epoch(f'cafo-{tag}', epoch, train_loss, val_loss, val_acc, signal.value)
        if signal is StopSignal.STOP:
            break

    np.copyto(pred.W, best[0])
    np.copyto(pred.b, best[1])
    return PredictorResult(k, epoch, float(stopper.best_value), trace)


def _predictor_phase(k: int, model: CaFoModel, data: DataBundle, hp, streams, batch_size: int,
                     use_cache: bool) -> PredictorResult:
    cache = None
    if use_cache and not data.policy.enabled and feature_cache_fits(model, k, data, env_config.BENCH_FEATURE_CACHE_MIB):
        cache = FeatureCache(compute_features(model, k, data.train), compute_features(model, k, data.val))
        logger.info(f"[cafo] cached block {k + 1} features: {cache.train.nbytes / 2 ** 20:,.1f} MiB")
    return train_predictor(k, model, data, hp, streams, batch_size, cache)


def train_cafo(config: "ExperimentConfig", data: DataBundle, seed: int,
               spec: Optional[CNNSpec] = None) -> RunResult:
    hp = config.hyperparameters
    variant = config.variant or 'rand'
    if spec is None:
        spec = parse_architecture(config.architecture, data.meta, final_head=False)
    if not isinstance(spec, CNNSpec):
        raise ConfigError(f"cafo runs on the 3-block CNN, got {spec.name}")
    require_epochs(hp.epochs_per_block, "cafo")

    streams = make_streams(seed)
    model = build_cafo_model(spec, streams, variant, resolve_dtype(config.precision))
    logger.info(f"[cafo-{variant}] {data.meta.name}: {model.parameter_count():,} parameters")

    trace: List[EpochRecord] = []
    block_epochs = 0
    if variant == 'dfa':
        block_epochs, dfa_trace, _ = dfa_pretrain_blocks(model, data, hp, streams, config.batch_size)
        trace.extend(dfa_trace)
    elif hp.calibrate_batchnorm:
        calibrate_batchnorm(model, data.train, config.batch_size, streams)
    model.freeze()

    phases = range(len(model.blocks))
    if hp.parallel_predictors:
        with ThreadPoolExecutor(max_workers=len(model.blocks)) as pool:
            futures = [pool.submit(_predictor_phase, k, model, data, hp, streams, config.batch_size,
                                   hp.cache_features) for k in phases]
            results = [f.result() for f in futures]
    else:
        results = [_predictor_phase(k, model, data, hp, streams, config.batch_size, hp.cache_features)
                   for k in phases]
    for r in results:
        trace.extend(r.trace)

    predictor_epochs = [r.epochs for r in results]
    test_x = data.test.images
    test_acc = accuracy_pct(predict_in_batches(lambda x: cafo_predict(model, x), test_x), data.test.labels)
    per_predictor = []
    for k, pred in enumerate(model.predictors):
        preds = predict_in_batches(
            lambda x, k=k, pred=pred: predictor_forward(pred, model.block_outputs(x, upto=k)[k]).argmax(axis=1),
            test_x)
        per_predictor.append(accuracy_pct(preds, data.test.labels))
    val_acc = accuracy_pct(predict_in_batches(lambda x: cafo_predict(model, x), data.val.images), data.val.labels)
    logger.info(f"[cafo-{variant}] epochs blocks={block_epochs} predictors={predictor_epochs}, "
                f"test_acc={test_acc:.2f}%")
    return RunResult(
        algo='cafo', dataset=data.meta.name, arch=spec.name, seed=seed, test_acc=test_acc,
        effective_epochs=block_epochs + sum(predictor_epochs), variant=variant, val_acc=val_acc, trace=trace,
        extras={'block_epochs': block_epochs, 'predictor_epochs': predictor_epochs,
                'predictor_test_acc': per_predictor,
                'predictor_best_val_loss': [r.best_val_loss for r in results]},
    )
