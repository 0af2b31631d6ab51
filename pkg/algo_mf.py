"""
Mono-Forward trainer.

Every hidden layer carries a projection matrix M (one row per class) that turns
its activations into class goodness scores G = a M^T. A layer learns from the
cross-entropy of its own scores only; layers train one after another, each on
the outputs of the already frozen layers below it, with per-layer early
stopping on the local validation loss. Inference is a single forward pass and
the argmax of the last layer's scores.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, Iterator, List, Optional, Tuple

import numpy as np

from datasets import DataBundle, Dataset
from errors import ConfigError, NonFiniteError, ShapeError
from model_specs import MLPSpec, parse_architecture
from nn import Module, bias_uniform_init
from numerics import (
    RngStream,
    kaiming_uniform_init,
    make_streams,
    matmul,
    relu,
    relu_grad,
    resolve_dtype,
    softmax_crossentropy,
)
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

MF_ARCHITECTURES = ('mlp_2x1000', 'mlp_3x2000')
MF_BATCH_SIZE = 128


# ============================================================================
# LAYERS
# ============================================================================

@dataclass
class MFLayer:
    W: np.ndarray
    b: np.ndarray
    M: np.ndarray
    use_bias: bool = True
    frozen: bool = False

    def __post_init__(self):
        n_out, _ = self.W.shape
        if self.b.shape != (n_out,) or self.M.ndim != 2 or self.M.shape[1] != n_out:
            raise ShapeError(f"inconsistent MF layer shapes W{self.W.shape} b{self.b.shape} M{self.M.shape}")

    @property
    def num_classes(self) -> int:
        return self.M.shape[0]

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        params = OrderedDict(W=self.W)
        if self.use_bias:
            params['b'] = self.b
        params['M'] = self.M
        return params

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.parameters().items()}

    def restore(self, snapshot: Dict[str, np.ndarray]) -> None:
        for name, value in snapshot.items():
            np.copyto(getattr(self, name), value)


def mf_layer_forward(layer: MFLayer, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(z, a) with z = x W^T + b and a = relu(z)."""
    z = matmul(x, layer.W.T)
    if layer.use_bias:
        z = z + layer.b
    return z, relu(z)


def mf_goodness(a: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Class goodness scores G = a M^T, shape B x m."""
    if a.ndim != 2 or M.ndim != 2 or a.shape[1] != M.shape[1]:
        raise ShapeError(f"goodness needs B x n activations and m x n projection, got {a.shape} and {M.shape}")
    return matmul(a, M.T)


class MFModel(Module):
    def __init__(self, spec: MLPSpec, layers: List[MFLayer]):
        self.spec = spec
        self.layers = layers

    def named_parameters(self):
        params = OrderedDict()
        for i, layer in enumerate(self.layers):
            for name, value in layer.parameters().items():
                params[f'layer{i}.{name}'] = value
        return params

    @property
    def dtype(self):
        return self.layers[0].W.dtype

    def hidden(self, x: np.ndarray, upto: int) -> np.ndarray:
        """Activations after layers 0..upto-1 (the input itself when ``upto`` is 0)."""
        h = x.reshape(len(x), -1).astype(self.dtype, copy=False)
        for layer in self.layers[:upto]:
            _, h = mf_layer_forward(layer, h)
        return h

    def goodness_scores(self, x: np.ndarray) -> List[np.ndarray]:
        h = x.reshape(len(x), -1).astype(self.dtype, copy=False)
        scores = []
        for layer in self.layers:
            _, h = mf_layer_forward(layer, h)
            scores.append(mf_goodness(h, layer.M))
        return scores


def build_mf_model(spec: MLPSpec, rng: RngStream, dtype=np.float32, use_bias: bool = True) -> MFModel:
    """W and M are Kaiming uniform (M with fan_in = layer width); biases uniform on +-1/sqrt(fan_in)."""
    if spec.final_head:
        raise ConfigError("mono-forward models have no final head; use final_head=False")
    dt = resolve_dtype(dtype)
    layers = []
    for i, (n_in, n_out) in enumerate(spec.layer_dims()):
        layer_rng = rng.child('layer', i)
        W = kaiming_uniform_init((n_out, n_in), n_in, layer_rng, dt)
        b = bias_uniform_init(n_out, n_in, layer_rng, dt) if use_bias else np.zeros(n_out, dt)
        M = kaiming_uniform_init((spec.num_classes, n_out), n_out, layer_rng, dt)
        layers.append(MFLayer(W, b, M, use_bias))
    return MFModel(spec, layers)


# ============================================================================
# LOCAL LEARNING RULE
# ============================================================================

def mf_local_gradients(layer: MFLayer, x: np.ndarray, labels: np.ndarray
                       ) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Local cross-entropy on the layer's goodness scores and its gradients.

    Returns:
        (loss, {'W', 'b', 'M'} gradients); 'b' is left out for bias-free layers
    """
    z, a = mf_layer_forward(layer, x)
    G = mf_goodness(a, layer.M)
    loss, grad_G = softmax_crossentropy(G, labels)
    grad_M = grad_G.T @ a
    grad_z = (grad_G @ layer.M) * relu_grad(z)
    grads = {'W': grad_z.T @ x, 'M': grad_M}
    if layer.use_bias:
        grads['b'] = grad_z.sum(axis=0)
    return loss, grads


def mf_local_step(layer: MFLayer, x: np.ndarray, labels: np.ndarray, optimizer: Optimizer) -> float:
    """One optimizer step on this layer's W, b and M; ``x`` comes from the frozen layers below."""
    if layer.frozen:
        raise ConfigError("layer is frozen")
    loss, grads = mf_local_gradients(layer, x, labels)
    if not np.isfinite(loss):
        raise NonFiniteError("mono-forward: non-finite local loss")
    optimizer.step(grads)
    return loss


def mf_local_loss(model: MFModel, i: int, ds: Dataset, cached: Optional[np.ndarray] = None) -> Tuple[float, float]:
    """Mean local cross-entropy and accuracy (%) of layer ``i`` over ``ds``."""
    layer = model.layers[i]
    total, correct = 0.0, 0
    for x, y in _chunks(model, i, ds, cached):
        _, a = mf_layer_forward(layer, x)
        G = mf_goodness(a, layer.M)
        loss, _ = softmax_crossentropy(G, y)
        total += loss * len(y)
        correct += int((G.argmax(axis=1) == y).sum())
    n = max(len(ds), 1)
    return total / n, 100.0 * correct / n


def _chunks(model: MFModel, i: int, ds: Dataset, cached: Optional[np.ndarray]) -> Iterator:
    if cached is not None:
        for start in range(0, len(ds), EVAL_BATCH_SIZE):
            yield cached[start:start + EVAL_BATCH_SIZE], ds.labels[start:start + EVAL_BATCH_SIZE]
    else:
        for x, y in eval_batches(ds):
            yield model.hidden(x, i), y


def layer_inputs(model: MFModel, i: int, ds: Dataset) -> np.ndarray:
    """Inputs of layer ``i`` for the whole of ``ds``, computed through the frozen layers."""
    if len(ds) == 0:
        return np.zeros((0, model.layers[i].W.shape[1]), model.dtype)
    return np.concatenate([model.hidden(x, i) for x, _ in eval_batches(ds)])


# ============================================================================
# INFERENCE
# ============================================================================

def mf_predict(model: MFModel, x: np.ndarray, aggregate: bool = False) -> np.ndarray:
    """
    Argmax of the last layer's goodness scores (ties go to the lowest class).
    With ``aggregate`` the scores of every layer are summed first.
    """
    scores = model.goodness_scores(x)
    G = sum(scores) if aggregate else scores[-1]
    return G.argmax(axis=1)


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class LayerResult:
    index: int
    epochs: int
    best_val_loss: float
    trace: List[EpochRecord] = field(default_factory=list)


def train_mf_layer(model: MFModel, i: int, data: DataBundle, hp, streams: Dict[str, RngStream],
                   batch_size: int, cache: bool = False) -> LayerResult:
    """
    Train layer ``i`` on the frozen layers below it, restore its best-validation
    checkpoint and freeze it.
    """
    layer = model.layers[i]
    if any(not below.frozen for below in model.layers[:i]):
        raise ConfigError(f"layer {i + 1} trains only after every layer below it is frozen")
    opt = Optimizer(layer.parameters(), 'adam', hp.lr, hp.weight_decay)
    stopper = EarlyStopper('minimize', hp.patience, hp.min_delta)
    tag = f'layer{i + 1}'

    train_in = val_in = None
    if cache and i > 0:
        if data.policy.enabled:
            logger.warning(f"[mf] activation cache ignored for {tag}: training inputs are augmented")
        else:
            train_in, val_in = layer_inputs(model, i, data.train), layer_inputs(model, i, data.val)
            logger.debug(f"[mf] cached {tag} inputs: {train_in.nbytes / 2 ** 20:,.1f} MiB")

    best = layer.snapshot()
    trace: List[EpochRecord] = []
    epoch = 0
    for epoch in range(1, hp.epochs_per_layer + 1):
        total, count = 0.0, 0
        if train_in is not None:
            order = streams['shuffle'].child('layer', i, epoch).permutation(len(data.train))
            source = ((train_in[idx], data.train.labels[idx])
                      for idx in (order[s:s + batch_size] for s in range(0, len(order), batch_size)))
        else:
            source = ((model.hidden(x, i), y)
                      for x, y in epoch_batches(data.train, batch_size, streams, epoch, data.policy, 'layer', i))
        for b, (x, y) in enumerate(source):
            try:
                loss = mf_local_step(layer, x, y, opt)
            except NonFiniteError as e:
                raise e.with_context(algo='mf', layer=i + 1, epoch=epoch, batch=b)
            guard_loss(loss, 'mf', layer=i + 1, epoch=epoch, batch=b)
            total += loss * len(y)
            count += len(y)

        val_loss, val_acc = mf_local_loss(model, i, data.val, val_in)
        signal = early_stop_update(stopper, epoch, val_loss)
        if signal is StopSignal.IMPROVED:
            best = layer.snapshot()
        train_loss = total / max(count, 1)
        trace.append(EpochRecord(tag, epoch, train_loss, val_loss, val_acc))
        log_epoch(f'mf-{tag}', epoch, train_loss, val_loss, val_acc, signal.value)
        if signal is StopSignal.STOP:
            break

    layer.restore(best)
    layer.frozen = True
    return LayerResult(i, epoch, float(stopper.best_value), trace)


def train_mf(config: "ExperimentConfig", data: DataBundle, seed: int,
             spec: Optional[MLPSpec] = None) -> RunResult:
    hp = config.hyperparameters
    require_epochs(hp.epochs_per_layer, "mf")
    if spec is None:
        spec = parse_architecture(config.architecture, data.meta, final_head=False)
        if spec.name not in MF_ARCHITECTURES:
            raise ConfigError(f"mf runs on {MF_ARCHITECTURES}, got {spec.name}")
    if not isinstance(spec, MLPSpec):
        raise ConfigError(f"mf runs on MLPs, got {spec.name}")
    if config.batch_size != MF_BATCH_SIZE:
        logger.warning(f"[mf] batch size {config.batch_size} differs from the reference {MF_BATCH_SIZE}")

    streams = make_streams(seed)
    model = build_mf_model(spec, streams['weight-init'], resolve_dtype(config.precision), hp.use_bias)
    logger.info(f"[mf] {spec.name} on {data.meta.name}: {model.parameter_count():,} parameters, "
                f"adam lr={hp.lr:g}, {hp.epochs_per_layer} epochs/layer")

    layers = [train_mf_layer(model, i, data, hp, streams, config.batch_size, hp.cache_activations)
              for i in range(len(model.layers))]
    trace = [rec for r in layers for rec in r.trace]
    epochs = [r.epochs for r in layers]

    predict = lambda x: mf_predict(model, x, hp.aggregate_inference)
    test_acc = accuracy_pct(predict_in_batches(predict, data.test.images), data.test.labels)
    val_acc = accuracy_pct(predict_in_batches(predict, data.val.images), data.val.labels)
    logger.info(f"[mf] layer epochs {epochs}, test_acc={test_acc:.2f}%")
    return RunResult(
        algo='mf', dataset=data.meta.name, arch=spec.name, seed=seed, test_acc=test_acc,
        effective_epochs=sum(epochs), variant=config.variant or '', val_acc=val_acc, trace=trace,
        extras={'layer_epochs': epochs, 'layer_best_val_loss': [r.best_val_loss for r in layers],
                'aggregate_inference': bool(hp.aggregate_inference)},
    )
