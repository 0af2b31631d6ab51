"""
Numerics
========

Dense-array kernels with analytic backward companions, plus named,
independently seeded random streams.

All kernels are pure functions of their inputs. Reductions go through numpy's
BLAS-backed ``tensordot``/``matmul`` so the summation order is fixed for a given
build. Training runs in float32; the same kernels accept float64 arrays, which
the gradient-check tests use.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import LabelError, NonFiniteError, ShapeError

DEFAULT_DTYPE = np.float32
DTYPES = {"float32": np.float32, "float64": np.float64}

STREAM_NAMES = (
    "weight-init",
    "shuffle",
    "augment",
    "negative-labels",
    "dfa-feedback",
    "search",
)


def resolve_dtype(name: Union[str, np.dtype, type, None]) -> np.dtype:
    if name is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(name, str):
        if name not in DTYPES:
            raise ShapeError(f"unsupported precision '{name}', expected one of {sorted(DTYPES)}")
        return np.dtype(DTYPES[name])
    return np.dtype(name)


def _key_code(key: Union[int, str]) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class RngStream:
    """
    Named random stream.

    The generator is derived from ``(seed, name, *keys)`` through a numpy
    ``SeedSequence``, so two streams with the same identity produce the same
    sequence and drawing from one never advances another.
    """

    def __init__(self, name: str, seed: int, keys: Sequence[Union[int, str]] = ()):
        if name not in STREAM_NAMES:
            raise ValueError(f"unknown stream '{name}', expected one of {STREAM_NAMES}")
        if int(seed) < 0 or int(seed) >= 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.name = name
        self.seed = int(seed)
        self.keys: Tuple[Union[int, str], ...] = tuple(keys)
        spawn_key = (_key_code(name),) + tuple(_key_code(k) for k in self.keys)
        self._seq = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def child(self, *keys: Union[int, str]) -> "RngStream":
        """Deterministic substream, e.g. ``stream.child(epoch)``."""
        return RngStream(self.name, self.seed, self.keys + tuple(keys))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: Optional[int] = None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def random(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        suffix = "".join(f"/{k}" for k in self.keys)
        return f"RngStream({self.name}{suffix}, seed={self.seed})"


def make_streams(seed: int) -> dict:
    """All named streams for one run seed."""
    return {name: RngStream(name, seed) for name in STREAM_NAMES}


def check_finite(array, where: str, **context) -> None:
    """Raise ``NonFiniteError`` if ``array`` holds NaN or Inf."""
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {where}", context)


# ============================================================================
# DENSE KERNELS
# ============================================================================

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a @ b
    check_finite(out, "matmul")
    return out


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def relu_grad(z: np.ndarray) -> np.ndarray:
    # relu'(0) = 0
    return (z > 0).astype(z.dtype)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_crossentropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Returns:
        (loss, grad_logits) where grad_logits = (softmax - onehot) / B
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be B x m, got shape {logits.shape}")
    batch, classes = logits.shape
    if classes < 2:
        raise ShapeError(f"need at least 2 classes, got {classes}")
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"label out of range [0, {classes})")

    logp = log_softmax(logits)
    rows = np.arange(batch)
    loss = float(-logp[rows, labels].mean())
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite cross-entropy loss")
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= batch
    return loss, grad.astype(logits.dtype, copy=False)


def kaiming_uniform_init(shape: Sequence[int], fan_in: int, rng: RngStream,
                         dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform on [-b, b] with b = sqrt(6 / fan_in)."""
    if fan_in <= 0:
        raise ShapeError(f"fan_in must be positive, got {fan_in}")
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


# ============================================================================
# CONVOLUTION
# ============================================================================

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: Optional[np.ndarray] = None,
                   stride: int = 1, padding: int = 1) -> np.ndarray:
    """Cross-correlation N x C x H x W with O x C x kh x kw kernels, zero padding."""
    if x.ndim != 4 or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernels, got {x.shape} and {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernels expect {kernels.shape[1]}")
    kh, kw = kernels.shape[2:]
    if conv_output_size(x.shape[2], kh, stride, padding) < 1 or conv_output_size(x.shape[3], kw, stride, padding) < 1:
        raise ShapeError(f"input {x.shape[2:]} too small for kernel {kh}x{kw}")
    win = _windows(x, kh, kw, stride, padding)
    # (N, C, H', W', kh, kw) . (O, C, kh, kw) -> (N, H', W', O)
    out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    check_finite(out, "conv2d_forward")
    return out


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, padding: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Adjoint of ``conv2d_forward`` (bias gradient is ``grad_out.sum((0, 2, 3))``).

    Returns:
        (grad_input, grad_kernels)
    """
    n, c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernels expect {kc}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, o, ho, wo)}")

    win = _windows(x, kh, kw, stride, padding)
    grad_kernels = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))

    grad_padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.result_type(x, grad_out))
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, kernels[:, :, i, j], axes=([1], [0]))
            grad_padded[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                contrib.transpose(0, 3, 1, 2)
    grad_input = grad_padded[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(grad_input), grad_kernels


# ============================================================================
# POOLING
# ============================================================================

@dataclass
class PoolIndices:
    """Argmax position (0..3, row-major inside the 2x2 window) per output cell."""
    argmax: np.ndarray
    input_shape: Tuple[int, int, int, int]


def maxpool2x2_forward(x: np.ndarray) -> Tuple[np.ndarray, PoolIndices]:
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool needs spatial dims >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    cells = (x[:, :, :2 * ho, :2 * wo]
             .reshape(n, c, ho, 2, wo, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(n, c, ho, wo, 4))
    # np.argmax keeps the first maximum, i.e. row-major first on ties
    argmax = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolIndices(argmax.astype(np.int8), (n, c, h, w))


def maxpool2x2_backward(indices: PoolIndices, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = indices.input_shape
    ho, wo = h // 2, w // 2
    if grad_out.shape != (n, c, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {(n, c, ho, wo)}")
    cells = np.zeros((n, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(cells, indices.argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    grad = np.zeros((n, c, h, w), dtype=grad_out.dtype)
    grad[:, :, :2 * ho, :2 * wo] = (cells.reshape(n, c, ho, wo, 2, 2)
                                    .transpose(0, 1, 2, 4, 3, 5)
                                    .reshape(n, c, 2 * ho, 2 * wo))
    return grad
