"""
Shared fixtures: a small separable image set, dataset file writers and a
central-difference gradient helper.
"""

import gzip
import os
import struct
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from datasets import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, DataBundle, Dataset, DatasetMeta  # noqa: E402

CONFIG_DIR = ROOT / 'configs'

# 3 classes of 1x8x8 images, each class lights up its own horizontal band
TOY_META = DatasetMeta('toy', 3, 1, 8, 8, (0.0,), (1.0,), 96, 30)


def make_toy_dataset(n: int, seed: int, meta: DatasetMeta = TOY_META, dtype=np.float32) -> Dataset:
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % meta.num_classes
    rng.shuffle(labels)
    images = rng.normal(0.0, 0.3, size=(n, meta.channels, meta.height, meta.width))
    band = meta.height // meta.num_classes
    for c in range(meta.num_classes):
        images[labels == c, :, c * band:(c + 1) * band, :] += 1.5
    return Dataset(images.astype(dtype), labels.astype(np.int64), meta, normalized=True)


@pytest.fixture
def toy_bundle() -> DataBundle:
    return DataBundle(make_toy_dataset(96, 1), make_toy_dataset(30, 2), make_toy_dataset(30, 3), TOY_META)


@pytest.fixture
def toy_bundle64() -> DataBundle:
    return DataBundle(make_toy_dataset(48, 1, dtype=np.float64), make_toy_dataset(15, 2, dtype=np.float64),
                      make_toy_dataset(15, 3, dtype=np.float64), TOY_META)


@pytest.fixture
def experiment_factory():
    """Build a validated ExperimentConfig from keyword fields."""
    from harness import config_from_dict

    def _make(algorithm: str, architecture: str = 'mlp_2x1000', dataset: str = 'mnist', **fields):
        return config_from_dict({'algorithm': algorithm, 'dataset': dataset, 'architecture': architecture,
                                 **fields})
    return _make


# ============================================================================
# GRADIENT CHECKS
# ============================================================================

def numerical_gradient(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = f()
        x[idx] = orig - eps
        f_minus = f()
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


# ============================================================================
# DATASET FILES
# ============================================================================

def write_idx(path: Path, array: np.ndarray, compress: bool = False) -> Path:
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    payload = struct.pack('>I', magic) + struct.pack(f'>{array.ndim}I', *array.shape) + array.tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    if compress:
        path = path.with_name(path.name + '.gz')
        with gzip.open(path, 'wb') as f:
            f.write(payload)
    else:
        path.write_bytes(payload)
    return path


def write_idx_split(root: Path, name: str, split: str, n: int, seed: int = 0, size: int = 28) -> None:
    rng = np.random.default_rng(seed)
    prefix = 'train' if split == 'train' else 't10k'
    write_idx(root / name / f'{prefix}-images-idx3-ubyte', rng.integers(0, 256, size=(n, size, size)))
    write_idx(root / name / f'{prefix}-labels-idx1-ubyte', np.arange(n) % 10)


def write_cifar(path: Path, images: np.ndarray, labels: np.ndarray, coarse=None) -> Path:
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8)[:, None])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.concatenate(cols + [images], axis=1).tobytes())
    return path


# ============================================================================
# REAL DATA
# ============================================================================

@pytest.fixture(scope='session')
def mnist_data_dir() -> Path:
    root = Path(os.environ.get('BENCH_DATA_DIR', ROOT / 'data'))
    images = root / 'mnist' / 'train-images-idx3-ubyte'
    if not (images.is_file() or images.with_name(images.name + '.gz').is_file()):
        pytest.skip(f"MNIST not found under {root}")
    return root


# ============================================================================
# ENVIRONMENT
# ============================================================================

@pytest.fixture
def bench_env(monkeypatch):
    """Set (or with ``None`` unset) BENCH_* variables and drop the config cache."""
    from config import config

    def _set(**values):
        for key, value in values.items():
            if value is None:
                monkeypatch.delenv(key, raising=False)
            else:
                monkeypatch.setenv(key, str(value))
        config.clear_cache()
    yield _set
    config.clear_cache()
