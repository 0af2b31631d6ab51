"""
Layers and Models
=================

Dense layers, the conv block (Conv -> ReLU -> MaxPool -> BatchNorm), batch and
length normalization, linear predictors, and the MLP / CNN model containers
used by the backprop baseline. Every forward has a hand-derived backward.

Parameters are plain numpy arrays held by the layer dataclasses; optimizers
update them in place, so references taken through ``named_parameters`` stay
valid for the lifetime of a model.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from errors import ShapeError, UnknownSpecError
from model_specs import CNNSpec, MLPSpec, ModelSpec, cnn_block_flat_dims, require_valid
from numerics import (
    PoolIndices,
    RngStream,
    conv2d_backward,
    conv2d_forward,
    kaiming_uniform_init,
    matmul,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu,
    relu_grad,
    resolve_dtype,
)
from tensor_cache import read_container, write_container

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LENGTH_NORM_EPS = 1e-8

Params = Dict[str, np.ndarray]


# ============================================================================
# DENSE
# ============================================================================

@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = 'relu'

    def __post_init__(self):
        if self.activation not in ('relu', 'none'):
            raise ShapeError(f"activation must be 'relu' or 'none', got '{self.activation}'")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f"inconsistent dense shapes W{self.W.shape} b{self.b.shape}")

    @property
    def in_features(self) -> int:
        return self.W.shape[1]

    @property
    def out_features(self) -> int:
        return self.W.shape[0]


def dense_forward(layer: DenseLayer, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """z = x W^T + b, a = relu(z) (or z for a linear layer)."""
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"dense input {x.shape} does not match in_features {layer.in_features}")
    z = matmul(x, layer.W.T) + layer.b
    a = relu(z) if layer.activation == 'relu' else z
    return z, a


def dense_backward(layer: DenseLayer, x: Optional[np.ndarray], z: Optional[np.ndarray],
                   grad_a: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (grad_W, grad_b, grad_x)
    """
    if x is None or z is None:
        raise ShapeError("dense_backward called without the forward cache")
    if grad_a.shape != z.shape:
        raise ShapeError(f"grad shape {grad_a.shape} != activation shape {z.shape}")
    grad_z = grad_a * relu_grad(z) if layer.activation == 'relu' else grad_a
    grad_W = grad_z.T @ x
    grad_b = grad_z.sum(axis=0)
    grad_x = grad_z @ layer.W
    return grad_W, grad_b, grad_x


# ============================================================================
# NORMALIZATION
# ============================================================================

@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: str = 'train'

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    mode: str


def batchnorm_forward(bn: BatchNormState, x: np.ndarray,
                      update_running: bool = True) -> Tuple[np.ndarray, BatchNormCache]:
    """
    Per-channel normalization of N x C x H x W. Train mode normalizes with batch
    statistics and folds them into the running averages (unbiased variance);
    eval mode uses the running statistics only.
    """
    if x.ndim != 4 or x.shape[1] != bn.gamma.shape[0]:
        raise ShapeError(f"batchnorm input {x.shape} does not match {bn.gamma.shape[0]} channels")
    shape = (1, -1, 1, 1)
    if bn.mode == 'train':
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * count / max(count - 1, 1)
            bn.running_mean[...] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean
            bn.running_var[...] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = x_hat * bn.gamma.reshape(shape) + bn.beta.reshape(shape)
    return y.astype(x.dtype, copy=False), BatchNormCache(x_hat, inv_std.astype(x.dtype), bn.mode)


def batchnorm_backward(bn: BatchNormState, cache: BatchNormCache,
                       grad_y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (grad_gamma, grad_beta, grad_x)
    """
    shape = (1, -1, 1, 1)
    grad_gamma = (grad_y * cache.x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_y.sum(axis=(0, 2, 3))
    grad_xhat = grad_y * bn.gamma.reshape(shape)
    if cache.mode == 'train':
        m = grad_y.shape[0] * grad_y.shape[2] * grad_y.shape[3]
        grad_x = (cache.inv_std.reshape(shape) / m) * (
            m * grad_xhat
            - grad_xhat.sum(axis=(0, 2, 3), keepdims=True)
            - cache.x_hat * (grad_xhat * cache.x_hat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        grad_x = grad_xhat * cache.inv_std.reshape(shape)
    return grad_gamma, grad_beta, grad_x


def length_normalize(x: np.ndarray, eps: float = LENGTH_NORM_EPS) -> np.ndarray:
    """Divide each row by its L2 norm plus ``eps``."""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / (norms + eps)


# ============================================================================
# CONV BLOCK
# ============================================================================

@dataclass
class ConvBlock:
    kernels: np.ndarray
    bias: np.ndarray
    bn: BatchNormState

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]


@dataclass
class BlockCache:
    x: np.ndarray
    conv_z: np.ndarray
    pool: PoolIndices
    bn: BatchNormCache


def block_forward(block: ConvBlock, x: np.ndarray, update_running: bool = True) -> Tuple[np.ndarray, BlockCache]:
    """Conv(3x3, pad 1) -> ReLU -> MaxPool(2x2) -> BatchNorm."""
    if x.ndim != 4 or min(x.shape[2:]) < 2:
        raise ShapeError(f"block input must be N x C x H x W with H, W >= 2, got {x.shape}")
    conv_z = conv2d_forward(x, block.kernels, block.bias)
    pooled, indices = maxpool2x2_forward(relu(conv_z))
    y, bn_cache = batchnorm_forward(block.bn, pooled, update_running)
    return y, BlockCache(x, conv_z, indices, bn_cache)


def block_backward(block: ConvBlock, cache: BlockCache, grad_y: np.ndarray) -> Tuple[Params, np.ndarray]:
    """
    Returns:
        ({'kernels', 'bias', 'gamma', 'beta'} gradients, grad_x)
    """
    grad_gamma, grad_beta, grad_pooled = batchnorm_backward(block.bn, cache.bn, grad_y)
    grad_r = maxpool2x2_backward(cache.pool, grad_pooled)
    grad_z = grad_r * relu_grad(cache.conv_z)
    grad_x, grad_k = conv2d_backward(cache.x, block.kernels, grad_z)
    grads = {'kernels': grad_k, 'bias': grad_z.sum(axis=(0, 2, 3)), 'gamma': grad_gamma, 'beta': grad_beta}
    return grads, grad_x


# ============================================================================
# PREDICTOR
# ============================================================================

@dataclass
class Predictor:
    """Flatten + single fully connected layer to class logits."""
    W: np.ndarray
    b: np.ndarray

    @property
    def flat_dim(self) -> int:
        return self.W.shape[1]


def predictor_forward(pred: Predictor, features: np.ndarray) -> np.ndarray:
    flat = features.reshape(len(features), -1)
    if flat.shape[1] != pred.flat_dim:
        raise ShapeError(f"predictor expects {pred.flat_dim} features, got {flat.shape[1]}")
    return matmul(flat, pred.W.T) + pred.b


def predictor_backward(pred: Predictor, features: np.ndarray,
                       grad_logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Returns:
        (grad_W, grad_b, grad_features) with grad_features shaped like ``features``
    """
    flat = features.reshape(len(features), -1)
    grad_W = grad_logits.T @ flat
    grad_b = grad_logits.sum(axis=0)
    grad_x = (grad_logits @ pred.W).reshape(features.shape)
    return grad_W, grad_b, grad_x


# ============================================================================
# INITIALIZATION
# ============================================================================

def bias_uniform_init(size: int, fan_in: int, rng: RngStream, dtype) -> np.ndarray:
    """Bias draw used by every builder: uniform on +-1/sqrt(fan_in), the PyTorch layer default."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(size,)).astype(dtype)


def init_dense(in_features: int, out_features: int, rng: RngStream, activation: str = 'relu',
               dtype=np.float32, bias: bool = True) -> DenseLayer:
    W = kaiming_uniform_init((out_features, in_features), in_features, rng, dtype)
    b = bias_uniform_init(out_features, in_features, rng, dtype) if bias else np.zeros(out_features, dtype)
    return DenseLayer(W, b, activation)


def init_predictor(flat_dim: int, num_classes: int, rng: RngStream, dtype=np.float32) -> Predictor:
    W = kaiming_uniform_init((num_classes, flat_dim), flat_dim, rng, dtype)
    return Predictor(W, bias_uniform_init(num_classes, flat_dim, rng, dtype))


def init_conv_blocks(spec: CNNSpec, rng: RngStream, dtype=np.float32) -> List[ConvBlock]:
    blocks = []
    in_c = spec.input_shape[0]
    k = spec.kernel_size
    for out_c in spec.channels:
        fan_in = in_c * k * k
        kernels = kaiming_uniform_init((out_c, in_c, k, k), fan_in, rng, dtype)
        blocks.append(ConvBlock(kernels, bias_uniform_init(out_c, fan_in, rng, dtype), BatchNormState.create(out_c, dtype)))
        in_c = out_c
    return blocks


# ============================================================================
# MODEL CONTAINERS
# ============================================================================

class Module:
    """Named parameter/buffer bookkeeping shared by every trainable model."""

    spec: ModelSpec

    def named_parameters(self) -> "OrderedDict[str, np.ndarray]":
        raise NotImplementedError

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict()

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def state_dict(self) -> Params:
        """Deep copy of parameters and buffers."""
        state = OrderedDict((k, v.copy()) for k, v in self.named_parameters().items())
        state.update((k, v.copy()) for k, v in self.named_buffers().items())
        return state

    def load_state_dict(self, state: Params) -> None:
        """Copy ``state`` into the existing arrays in place."""
        targets = OrderedDict(self.named_parameters())
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        unexpected = set(state) - set(targets)
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, target in targets.items():
            if state[name].shape != target.shape:
                raise ShapeError(f"{name}: shape {state[name].shape} != {target.shape}")
            np.copyto(target, state[name])

    def set_mode(self, mode: str) -> None:
        pass


class MLPModel(Module):
    def __init__(self, spec: MLPSpec, layers: List[DenseLayer], head: Optional[DenseLayer]):
        self.spec = spec
        self.layers = layers
        self.head = head

    def named_parameters(self):
        params = OrderedDict()
        for i, layer in enumerate(self.layers):
            params[f'layer{i}.W'] = layer.W
            params[f'layer{i}.b'] = layer.b
        if self.head is not None:
            params['head.W'] = self.head.W
            params['head.b'] = self.head.b
        return params

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, list]:
        if self.head is None:
            raise ShapeError("model has no classification head")
        h = x.reshape(len(x), -1)
        caches = []
        for layer in self.layers:
            z, a = dense_forward(layer, h)
            caches.append((h, z))
            h = a
        z, logits = dense_forward(self.head, h)
        caches.append((h, z))
        return logits, caches

    def backward(self, caches: list, grad_logits: np.ndarray) -> Params:
        grads = {}
        gW, gb, g = dense_backward(self.head, *caches[-1], grad_logits)
        grads['head.W'], grads['head.b'] = gW, gb
        for i in range(len(self.layers) - 1, -1, -1):
            gW, gb, g = dense_backward(self.layers[i], *caches[i], g)
            grads[f'layer{i}.W'], grads[f'layer{i}.b'] = gW, gb
        return grads

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


class CNNModel(Module):
    def __init__(self, spec: CNNSpec, blocks: List[ConvBlock], head: Optional[Predictor]):
        self.spec = spec
        self.blocks = blocks
        self.head = head

    def named_parameters(self):
        params = OrderedDict()
        for i, block in enumerate(self.blocks):
            params[f'block{i}.kernels'] = block.kernels
            params[f'block{i}.bias'] = block.bias
            params[f'block{i}.gamma'] = block.bn.gamma
            params[f'block{i}.beta'] = block.bn.beta
        if self.head is not None:
            params['head.W'] = self.head.W
            params['head.b'] = self.head.b
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

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, list]:
        if self.head is None:
            raise ShapeError("model has no classification head")
        h = x
        caches = []
        for block in self.blocks:
            h, cache = block_forward(block, h)
            caches.append(cache)
        caches.append(h)
        return predictor_forward(self.head, h), caches

    def backward(self, caches: list, grad_logits: np.ndarray) -> Params:
        grads = {}
        gW, gb, g = predictor_backward(self.head, caches[-1], grad_logits)
        grads['head.W'], grads['head.b'] = gW, gb
        for i in range(len(self.blocks) - 1, -1, -1):
            block_grads, g = block_backward(self.blocks[i], caches[i], g)
            for name, value in block_grads.items():
                grads[f'block{i}.{name}'] = value
        return grads

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def build_model(spec: ModelSpec, rng: RngStream, dtype: Union[str, type, None] = None) -> Module:
    """
    Build a catalog model. Weights are Kaiming uniform; biases are uniform on
    +-1/sqrt(fan_in); BatchNorm starts at gamma=1, beta=0.
    """
    require_valid(spec)
    dt = resolve_dtype(dtype)
    if isinstance(spec, CNNSpec):
        blocks = init_conv_blocks(spec, rng, dt)
        head = init_predictor(cnn_block_flat_dims(spec)[-1], spec.num_classes, rng, dt) if spec.final_head else None
        return CNNModel(spec, blocks, head)
    layers = [init_dense(i, o, rng, 'relu', dt) for i, o in spec.layer_dims()]
    head = None
    if spec.final_head:
        head = init_dense(spec.hidden[-1], spec.num_classes, rng, 'none', dt)
    return MLPModel(spec, layers, head)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def spec_descriptor(spec: ModelSpec) -> dict:
    return {'kind': spec.kind, **asdict(spec)}


def spec_from_descriptor(desc: dict) -> ModelSpec:
    desc = dict(desc)
    kind = desc.pop('kind', None)
    if kind == 'mlp':
        return MLPSpec(desc['input_dim'], tuple(desc['hidden']), desc['num_classes'], desc['final_head'])
    if kind == 'cnn':
        return CNNSpec(tuple(desc['input_shape']), desc['num_classes'], tuple(desc['channels']),
                       desc['kernel_size'], desc['padding'], desc['final_head'])
    raise UnknownSpecError(f"checkpoint has unknown model kind '{kind}'")


def save_checkpoint(path: Union[str, Path], model: Module, optimizer_state: Optional[Params] = None,
                    extra: Optional[dict] = None) -> None:
    """Write parameters, buffers and (optionally) optimizer buffers to one container."""
    tensors = model.state_dict()
    for name, value in (optimizer_state or {}).items():
        tensors[f'optim/{name}'] = np.asarray(value)
    descriptor = {'spec': spec_descriptor(model.spec), 'extra': extra or {}}
    write_container(path, tensors, descriptor)
    logger.debug(f"Saved checkpoint {path} ({len(tensors)} tensors)")


def load_checkpoint(path: Union[str, Path], model: Optional[Module] = None) -> Tuple[Module, Params, dict]:
    """
    Returns:
        (model, optimizer_buffers, extra). When ``model`` is None one is rebuilt
        from the stored spec before loading.
    """
    tensors, descriptor = read_container(path)
    spec = spec_from_descriptor(descriptor['spec'])
    if model is None:
        first = next(iter(tensors.values()))
        model = build_model(spec, RngStream('weight-init', 0), first.dtype)
    optim = {k[len('optim/'):]: v for k, v in tensors.items() if k.startswith('optim/')}
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith('optim/')})
    return model, optim, descriptor.get('extra', {})
