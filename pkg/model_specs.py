# model_specs.py
"""
Architecture specs and catalog validation.
MLP widths and the 3-block CNN, with closed-form parameter counts and shapes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, List, Tuple, Union

from datasets import DatasetMeta
from errors import UnknownSpecError

# ============================================================================
# CATALOG
# ============================================================================

MLP_CATALOG: Dict[str, Tuple[int, ...]] = {
    'mlp_2x1000': (1000, 1000),
    'mlp_3x1000': (1000, 1000, 1000),
    'mlp_3x2000': (2000, 2000, 2000),
    'mlp_4x2000': (2000, 2000, 2000, 2000),
}
CNN_CHANNELS: Tuple[int, int, int] = (32, 128, 512)
CNN_NAME = 'cnn_3block'


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: Tuple[int, ...]
    num_classes: int
    final_head: bool = True

    @property
    def name(self) -> str:
        return f"mlp_{len(self.hidden)}x{self.hidden[0]}" if self.hidden else "mlp_0"

    @property
    def kind(self) -> str:
        return 'mlp'

    def layer_dims(self) -> List[Tuple[int, int]]:
        """(in, out) for each hidden layer."""
        dims = (self.input_dim,) + tuple(self.hidden)
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class CNNSpec:
    input_shape: Tuple[int, int, int]
    num_classes: int
    channels: Tuple[int, ...] = CNN_CHANNELS
    kernel_size: int = 3
    padding: int = 1
    final_head: bool = True

    @property
    def name(self) -> str:
        return CNN_NAME

    @property
    def kind(self) -> str:
        return 'cnn'


ModelSpec = Union[MLPSpec, CNNSpec]


def canonical_architecture(name: str) -> str:
    key = name.strip().lower().replace('-', '_')
    if key in MLP_CATALOG or key == CNN_NAME:
        return key
    if re.fullmatch(r'\d+x\d+', key):
        key = f"mlp_{key}"
    if key in ('cnn', 'cnn3', 'cafo_cnn'):
        key = CNN_NAME
    if key not in MLP_CATALOG and key != CNN_NAME:
        raise UnknownSpecError(
            f"unknown architecture '{name}', expected one of {sorted(MLP_CATALOG) + [CNN_NAME]}")
    return key


def parse_architecture(name: str, meta: DatasetMeta, final_head: bool = True) -> ModelSpec:
    key = canonical_architecture(name)
    if key == CNN_NAME:
        return CNNSpec(meta.shape, meta.num_classes, final_head=final_head)
    return MLPSpec(meta.input_dim, MLP_CATALOG[key], meta.num_classes, final_head)


# ============================================================================
# VALIDATION UTILITIES
# ============================================================================

def validate_mlp_spec(spec: MLPSpec) -> Tuple[bool, str]:
    """Validate an MLP spec against the catalog."""
    if not isinstance(spec, MLPSpec):
        return False, "Spec must be an MLPSpec"
    if spec.input_dim <= 0:
        return False, "input_dim must be positive"
    if spec.num_classes < 2:
        return False, "num_classes must be at least 2"
    if tuple(spec.hidden) not in MLP_CATALOG.values():
        return False, f"hidden widths {tuple(spec.hidden)} are not in the catalog"
    return True, ""


def validate_cnn_spec(spec: CNNSpec) -> Tuple[bool, str]:
    """Validate a CNN spec against the catalog."""
    if not isinstance(spec, CNNSpec):
        return False, "Spec must be a CNNSpec"
    if tuple(spec.channels) != CNN_CHANNELS:
        return False, f"channel chain must be {CNN_CHANNELS}, got {tuple(spec.channels)}"
    if spec.kernel_size != 3 or spec.padding != 1:
        return False, "blocks use 3x3 kernels with padding 1"
    if spec.num_classes < 2:
        return False, "num_classes must be at least 2"
    c, h, w = spec.input_shape
    if c <= 0 or h < 2 ** len(spec.channels) or w < 2 ** len(spec.channels):
        return False, f"input shape {spec.input_shape} too small for {len(spec.channels)} pooling stages"
    return True, ""


def validate_spec(spec: ModelSpec) -> Tuple[bool, str]:
    if isinstance(spec, CNNSpec):
        return validate_cnn_spec(spec)
    return validate_mlp_spec(spec)


def require_valid(spec: ModelSpec) -> None:
    ok, message = validate_spec(spec)
    if not ok:
        raise UnknownSpecError(message)


# ============================================================================
# SHAPES AND PARAMETER COUNTS
# ============================================================================

def cnn_block_shapes(spec: CNNSpec) -> List[Tuple[int, int, int]]:
    """Output (C, H, W) of each block: same-padded conv keeps H, W; 2x2 pooling floors."""
    shapes = []
    _, h, w = spec.input_shape
    for out_c in spec.channels:
        h, w = h // 2, w // 2
        shapes.append((out_c, h, w))
    return shapes


def cnn_block_flat_dims(spec: CNNSpec) -> List[int]:
    return [c * h * w for c, h, w in cnn_block_shapes(spec)]


def cnn_block_parameter_count(spec: CNNSpec) -> int:
    total = 0
    in_c = spec.input_shape[0]
    for out_c in spec.channels:
        total += out_c * in_c * spec.kernel_size ** 2 + out_c  # conv
        total += 2 * out_c  # bn gamma, beta
        in_c = out_c
    return total


def predictor_parameter_count(spec: CNNSpec) -> int:
    return sum(flat * spec.num_classes + spec.num_classes for flat in cnn_block_flat_dims(spec))


def expected_parameter_count(spec: ModelSpec) -> int:
    """Trainable parameters of the model ``build_model`` creates for ``spec``."""
    if isinstance(spec, CNNSpec):
        total = cnn_block_parameter_count(spec)
        if spec.final_head:
            total += cnn_block_flat_dims(spec)[-1] * spec.num_classes + spec.num_classes
        return total
    total = sum(i * o + o for i, o in spec.layer_dims())
    if spec.final_head:
        last = spec.hidden[-1] if spec.hidden else spec.input_dim
        total += last * spec.num_classes + spec.num_classes
    return total
