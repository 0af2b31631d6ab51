"""
Forward-Forward trainer.

Each hidden layer learns from its own logistic goodness loss on a positive
stream (true label embedded in the input) and a negative stream (a wrong
label), plus a peer-normalization term. Layers hand length-normalized,
detached activations to the next layer. A linear downstream classifier reads
the concatenated normalized activations of a neutral-label pass.

Inference embeds every candidate label, sums goodness over the hidden layers
and takes the argmax.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from datasets import DataBundle
from errors import ConfigError, LabelError, NonFiniteError, ShapeError
from model_specs import MLPSpec, parse_architecture
from nn import DenseLayer, Module, dense_backward, dense_forward, init_dense, length_normalize
from numerics import RngStream, make_streams, resolve_dtype, softmax_crossentropy
from optim import EarlyStopper, Optimizer, StopSignal, early_stop_update
from results import EpochRecord, RunResult
from training import (
    accuracy_pct,
    epoch_batches,
    guard_loss,
    log_epoch,
    predict_in_batches,
    require_epochs,
)

if TYPE_CHECKING:
    from harness import ExperimentConfig

logger = logging.getLogger(__name__)

FF_ARCHITECTURES = ('mlp_3x1000', 'mlp_4x2000')
FF_BATCH_SIZE = 100


# ============================================================================
# LABELS AND GOODNESS
# ============================================================================

def embed_value(x: np.ndarray) -> np.ndarray:
    """Per-image maximum pixel value, the default label intensity."""
    return x.max(axis=1)


def embed_label(x: np.ndarray, labels: np.ndarray, value: Union[float, np.ndarray, None] = None,
                num_classes: int = 10) -> np.ndarray:
    """Zero the first ``num_classes`` entries and set entry ``label`` to ``value``."""
    if x.ndim != 2 or x.shape[1] < num_classes:
        raise ShapeError(f"embed_label needs flattened inputs wider than {num_classes}, got {x.shape}")
    labels = np.asarray(labels)
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label out of range [0, {num_classes})")
    if value is None:
        value = embed_value(x)
    out = x.copy()
    out[:, :num_classes] = 0
    out[np.arange(len(x)), labels] = value
    return out


def embed_neutral(x: np.ndarray, value: Union[float, np.ndarray, None] = None,
                  num_classes: int = 10) -> np.ndarray:
    """Spread the label intensity evenly across all label slots."""
    if value is None:
        value = embed_value(x)
    out = x.copy()
    out[:, :num_classes] = np.reshape(np.asarray(value, dtype=x.dtype), (-1, 1)) / num_classes
    return out


def sample_negative_labels(labels: np.ndarray, rng: RngStream, num_classes: int = 10) -> np.ndarray:
    """Uniform over the wrong classes: (label + k) mod C with k in [1, C)."""
    if num_classes < 2:
        raise ConfigError("negative labels need at least 2 classes")
    labels = np.asarray(labels)
    offsets = rng.integers(1, num_classes, size=labels.shape)
    return (labels + offsets) % num_classes


def goodness(a: np.ndarray) -> np.ndarray:
    return (a * a).sum(axis=1)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ff_layer_loss(g_pos: np.ndarray, g_neg: np.ndarray, theta: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Batch-mean of softplus(-(g+ - theta)) + softplus(g- - theta).

    Returns:
        (loss, dL/dg_pos, dL/dg_neg), gradients of the batch mean
    """
    batch = len(g_pos)
    loss = float(np.mean(_softplus(-(g_pos - theta)) + _softplus(g_neg - theta)))
    grad_pos = -_sigmoid(-(g_pos - theta)) / batch
    grad_neg = _sigmoid(g_neg - theta) / batch
    return loss, grad_pos, grad_neg


def peer_normalization_terms(a: np.ndarray, running_mean: np.ndarray, factor: float,
                             momentum: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Pure form of the peer-normalization term.

    Returns:
        (loss, grad_a, updated_running_mean)
    """
    if factor < 0:
        raise ConfigError(f"peer normalization factor must be >= 0, got {factor}")
    updated = momentum * running_mean + (1.0 - momentum) * a.mean(axis=0)
    if factor == 0:
        return 0.0, np.zeros_like(a), updated
    deviation = updated.mean() - updated
    loss = float(factor * np.sum(deviation ** 2))
    # d/d(rm_i) = -2 f (mean - rm_i); rm_i depends on a[:, i] through (1 - momentum) / B
    grad_rm = -2.0 * factor * deviation
    grad_a = np.broadcast_to(grad_rm * (1.0 - momentum) / len(a), a.shape).astype(a.dtype)
    return loss, grad_a, updated


def peer_normalization_loss(a: np.ndarray, running_mean: np.ndarray, factor: float,
                            momentum: float) -> Tuple[float, np.ndarray]:
    """Update ``running_mean`` in place and return (loss, grad_a)."""
    loss, grad, updated = peer_normalization_terms(a, running_mean, factor, momentum)
    running_mean[...] = updated
    return loss, grad


# ============================================================================
# NETWORK
# ============================================================================

class FFNetwork(Module):
    def __init__(self, spec: MLPSpec, layers: List[DenseLayer], classifier: DenseLayer,
                 threshold_mode: str = 'dynamic', threshold: float = 2.0,
                 include_first_layer: bool = True, embed: Optional[float] = None,
                 norm_eps: float = 1e-8):
        if threshold_mode not in ('dynamic', 'fixed'):
            raise ConfigError(f"threshold_mode must be 'dynamic' or 'fixed', got '{threshold_mode}'")
        self.spec = spec
        self.layers = layers
        self.classifier = classifier
        self.running_means = [np.zeros(layer.out_features, dtype=layer.W.dtype) for layer in layers]
        self.threshold_mode = threshold_mode
        self.threshold = threshold
        self.include_first_layer = include_first_layer
        self.embed = embed
        self.norm_eps = norm_eps
        self.num_classes = spec.num_classes
        self.forward_passes = 0

    def theta(self, index: int) -> float:
        if self.threshold_mode == 'dynamic':
            return float(self.layers[index].out_features)
        return float(self.threshold)

    def named_parameters(self):
        params = OrderedDict()
        for i, layer in enumerate(self.layers):
            params[f'layer{i}.W'] = layer.W
            params[f'layer{i}.b'] = layer.b
        params['classifier.W'] = self.classifier.W
        params['classifier.b'] = self.classifier.b
        return params

    def layer_parameters(self):
        return OrderedDict((k, v) for k, v in self.named_parameters().items() if k.startswith('layer'))

    def classifier_parameters(self):
        return OrderedDict((k, v) for k, v in self.named_parameters().items() if k.startswith('classifier'))

    def named_buffers(self):
        return OrderedDict((f'layer{i}.running_mean', rm) for i, rm in enumerate(self.running_means))

    def embed_values(self, x: np.ndarray):
        return embed_value(x) if self.embed is None else self.embed

    def scored_layers(self) -> range:
        return range(0 if self.include_first_layer else 1, len(self.layers))

    def forward_activations(self, x_embedded: np.ndarray) -> List[np.ndarray]:
        """Post-ReLU activations of every layer for already-embedded inputs."""
        acts = []
        h = x_embedded
        for layer in self.layers:
            _, a = dense_forward(layer, h)
            acts.append(a)
            h = length_normalize(a, self.norm_eps)
        return acts

    def classifier_features(self, acts: Sequence[np.ndarray]) -> np.ndarray:
        return np.concatenate([length_normalize(a, self.norm_eps) for a in acts], axis=1)


def build_ff_network(spec: MLPSpec, rng: RngStream, dtype=np.float32, **options) -> FFNetwork:
    layers = [init_dense(i, o, rng, 'relu', dtype) for i, o in spec.layer_dims()]
    classifier = init_dense(sum(spec.hidden), spec.num_classes, rng, 'none', dtype)
    return FFNetwork(spec, layers, classifier, **options)


def ff_compute_gradients(net: FFNetwork, x_pos: np.ndarray, x_neg: np.ndarray,
                         peer_factor: float = 0.0, peer_momentum: float = 0.9,
                         active_layers: Optional[Set[int]] = None
                         ) -> Tuple[Dict[str, np.ndarray], List[float], List[float], List[float], List[np.ndarray]]:
    """
    Local gradients for every active layer from one positive/negative batch.

    The whole forward pass runs with the current parameters before any update.
    Returns (grads, layer_losses, peer_losses, goodness_gaps, positive activations).
    """
    batch = len(x_pos)
    grads: Dict[str, np.ndarray] = {}
    layer_losses, peer_losses, gaps, pos_acts = [], [], [], []
    h = np.concatenate([x_pos, x_neg], axis=0)
    for i, layer in enumerate(net.layers):
        z, a = dense_forward(layer, h)
        a_pos, a_neg = a[:batch], a[batch:]
        g_pos, g_neg = goodness(a_pos), goodness(a_neg)
        pos_acts.append(a_pos)
        gaps.append(float(g_pos.mean() - g_neg.mean()))
        if active_layers is None or i in active_layers:
            loss, d_pos, d_neg = ff_layer_loss(g_pos, g_neg, net.theta(i))
            peer_loss, peer_grad = peer_normalization_loss(a_pos, net.running_means[i], peer_factor, peer_momentum)
            if not np.isfinite(loss + peer_loss):
                raise NonFiniteError("ff: non-finite layer loss", {'layer': i})
            grad_a = np.empty_like(a)
            grad_a[:batch] = 2.0 * a_pos * d_pos[:, None] + peer_grad
            grad_a[batch:] = 2.0 * a_neg * d_neg[:, None]
            gW, gb, _ = dense_backward(layer, h, z, grad_a)
            grads[f'layer{i}.W'], grads[f'layer{i}.b'] = gW, gb
            layer_losses.append(loss + peer_loss)
            peer_losses.append(peer_loss)
        else:
            layer_losses.append(0.0)
            peer_losses.append(0.0)
        h = length_normalize(a, net.norm_eps)
    return grads, layer_losses, peer_losses, gaps, pos_acts


# ============================================================================
# INFERENCE
# ============================================================================

def ff_goodness_scores(net: FFNetwork, x: np.ndarray) -> np.ndarray:
    """B x C matrix of goodness summed over the scored layers, one pass per candidate label."""
    values = net.embed_values(x)
    scores = np.zeros((len(x), net.num_classes), dtype=np.float64)
    for c in range(net.num_classes):
        labels = np.full(len(x), c, dtype=np.int64)
        acts = net.forward_activations(embed_label(x, labels, values, net.num_classes))
        net.forward_passes += len(x)
        for i in net.scored_layers():
            scores[:, c] += goodness(acts[i])
    return scores


def ff_predict(net: FFNetwork, x: np.ndarray) -> np.ndarray:
    """Argmax of aggregated goodness; ties go to the lowest class index."""
    x = x.reshape(len(x), -1).astype(net.layers[0].W.dtype, copy=False)
    return ff_goodness_scores(net, x).argmax(axis=1)


def ff_classifier_predict(net: FFNetwork, x: np.ndarray) -> np.ndarray:
    x = x.reshape(len(x), -1).astype(net.layers[0].W.dtype, copy=False)
    acts = net.forward_activations(embed_neutral(x, net.embed_values(x), net.num_classes))
    _, logits = dense_forward(net.classifier, net.classifier_features(acts))
    return logits.argmax(axis=1)


# ============================================================================
# TRAINING
# ============================================================================

@dataclass
class FFEpochStats:
    loss: float
    classifier_loss: float
    gaps: List[float] = field(default_factory=list)


def ff_train_epoch(net: FFNetwork, batches_iter, layer_opt: Optimizer, clf_opt: Optimizer,
                   neg_rng: RngStream, peer_factor: float, peer_momentum: float, epoch: int) -> FFEpochStats:
    total, clf_total, count = 0.0, 0.0, 0
    gap_sums = np.zeros(len(net.layers))
    n_batches = 0
    dtype = net.layers[0].W.dtype
    for b, (x, y) in enumerate(batches_iter):
        x = x.reshape(len(x), -1).astype(dtype, copy=False)
        values = net.embed_values(x)
        y_neg = sample_negative_labels(y, neg_rng, net.num_classes)
        x_pos = embed_label(x, y, values, net.num_classes)
        x_neg = embed_label(x, y_neg, values, net.num_classes)
        x_neutral = embed_neutral(x, values, net.num_classes)

        grads, losses, _, gaps, _ = ff_compute_gradients(net, x_pos, x_neg, peer_factor, peer_momentum)
        neutral_acts = net.forward_activations(x_neutral)

        features = net.classifier_features(neutral_acts)
        z, logits = dense_forward(net.classifier, features)
        clf_loss, grad_logits = softmax_crossentropy(logits, y)
        gW, gb, _ = dense_backward(net.classifier, features, z, grad_logits)

        guard_loss(sum(losses) + clf_loss, 'ff', epoch=epoch, batch=b)
        layer_opt.step(grads)
        clf_opt.step({'classifier.W': gW, 'classifier.b': gb})

        total += sum(losses) * len(y)
        clf_total += clf_loss * len(y)
        count += len(y)
        gap_sums += gaps
        n_batches += 1
    return FFEpochStats(total / max(count, 1), clf_total / max(count, 1),
                        list(gap_sums / max(n_batches, 1)))


def train_ff(config: "ExperimentConfig", data: DataBundle, seed: int,
             spec: Optional[MLPSpec] = None) -> RunResult:
    hp = config.hyperparameters
    es = config.early_stopping
    require_epochs(hp.max_epochs, "ff")
    if spec is None:
        spec = parse_architecture(config.architecture, data.meta, final_head=False)
        if spec.name not in FF_ARCHITECTURES:
            raise ConfigError(f"ff runs on {FF_ARCHITECTURES}, got {spec.name}")
    if config.batch_size != FF_BATCH_SIZE:
        logger.warning(f"[ff] batch size {config.batch_size} differs from the reference {FF_BATCH_SIZE}")

    streams = make_streams(seed)
    net = build_ff_network(
        spec, streams['weight-init'], resolve_dtype(config.precision),
        threshold_mode=hp.threshold_mode, threshold=hp.threshold,
        include_first_layer=hp.include_first_layer, embed=hp.embed_value,
        norm_eps=hp.length_norm_eps,
    )
    layer_opt = Optimizer(net.layer_parameters(), hp.optimizer, hp.ff_lr, hp.ff_weight_decay, hp.ff_momentum)
    clf_opt = Optimizer(net.classifier_parameters(), hp.optimizer, hp.downstream_lr,
                        hp.downstream_weight_decay, hp.downstream_momentum)
    stopper = EarlyStopper(es.mode, es.patience, es.min_delta)
    logger.info(f"[ff] {spec.name} on {data.meta.name}: {hp.optimizer}, threshold {hp.threshold_mode}, "
                f"peer factor {hp.peer_factor}")

    trace: List[EpochRecord] = []
    best_state, best_val_acc, epoch = None, 0.0, 0
    val_x = data.val.flat()
    for epoch in range(1, hp.max_epochs + 1):
        stats = ff_train_epoch(
            net, epoch_batches(data.train, config.batch_size, streams, epoch, data.policy),
            layer_opt, clf_opt, streams['negative-labels'].child(epoch),
            hp.peer_factor, hp.peer_momentum, epoch,
        )
        val_acc = accuracy_pct(predict_in_batches(lambda x: ff_predict(net, x), val_x), data.val.labels)
        aux_acc = accuracy_pct(predict_in_batches(lambda x: ff_classifier_predict(net, x), val_x), data.val.labels)
        signal = early_stop_update(stopper, epoch, val_acc / 100.0)
        if signal is StopSignal.IMPROVED:
            best_state = net.state_dict()
            best_val_acc = val_acc
        extra = {'classifier_loss': stats.classifier_loss, 'classifier_val_acc': aux_acc}
        extra.update({f'goodness_gap_layer{i + 1}': g for i, g in enumerate(stats.gaps)})
        trace.append(EpochRecord('global', epoch, stats.loss, None, val_acc, extra))
        log_epoch('ff', epoch, stats.loss, None, val_acc, signal.value)
        if signal is StopSignal.STOP:
            break

    net.load_state_dict(best_state)
    test_x = data.test.flat()
    test_acc = accuracy_pct(predict_in_batches(lambda x: ff_predict(net, x), test_x), data.test.labels)
    aux_test = accuracy_pct(predict_in_batches(lambda x: ff_classifier_predict(net, x), test_x), data.test.labels)
    logger.info(f"[ff] best epoch {stopper.best_epoch}: goodness test_acc={test_acc:.2f}%, "
                f"classifier test_acc={aux_test:.2f}%")
    return RunResult(
        algo='ff', dataset=data.meta.name, arch=spec.name, seed=seed, test_acc=test_acc,
        effective_epochs=epoch, variant=config.variant or hp.optimizer, val_acc=best_val_acc, trace=trace,
        extras={'best_epoch': stopper.best_epoch, 'classifier_test_acc': aux_test,
                'threshold_mode': hp.threshold_mode, 'forward_passes': net.forward_passes},
    )
