"""
Datasets
========

Readers for MNIST / Fashion-MNIST IDX files and CIFAR-10/100 binary batches,
the train/validation split policies, per-channel normalization, CIFAR
augmentation and batching.

Files are read from a local data directory laid out as::

    <data_dir>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
    <data_dir>/fashion_mnist/  (same file names)
    <data_dir>/cifar-10-batches-bin/{data_batch_1..5,test_batch}.bin
    <data_dir>/cifar-100-binary/{train,test}.bin

Nothing is downloaded.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigError, DatasetError, ShapeError, UnknownSpecError
from numerics import RngStream
from tensor_cache import TensorCache

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_BYTES = 3072


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    num_classes: int
    channels: int
    height: int
    width: int
    mean: Tuple[float, ...]
    std: Tuple[float, ...]
    train_size: int
    test_size: int

    @property
    def input_dim(self) -> int:
        return self.channels * self.height * self.width

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.channels, self.height, self.width


DATASET_CATALOG: Dict[str, DatasetMeta] = {
    'mnist': DatasetMeta('mnist', 10, 1, 28, 28, (0.1307,), (0.3081,), 60000, 10000),
    'fashion_mnist': DatasetMeta('fashion_mnist', 10, 1, 28, 28, (0.2860,), (0.3530,), 60000, 10000),
    'cifar10': DatasetMeta('cifar10', 10, 3, 32, 32,
                           (0.4914, 0.4822, 0.4465), (0.2023, 0.1994, 0.2010), 50000, 10000),
    'cifar100': DatasetMeta('cifar100', 100, 3, 32, 32,
                            (0.5071, 0.4867, 0.4408), (0.2675, 0.2565, 0.2761), 50000, 10000),
}

_ALIASES = {
    'fmnist': 'fashion_mnist',
    'f-mnist': 'fashion_mnist',
    'fashion-mnist': 'fashion_mnist',
    'fashionmnist': 'fashion_mnist',
    'cifar-10': 'cifar10',
    'cifar_10': 'cifar10',
    'cifar-100': 'cifar100',
    'cifar_100': 'cifar100',
}

IDX_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}
CIFAR_FILES = {
    'cifar10': ('cifar-10-batches-bin',
                {'train': [f'data_batch_{i}.bin' for i in range(1, 6)], 'test': ['test_batch.bin']}),
    'cifar100': ('cifar-100-binary', {'train': ['train.bin'], 'test': ['test.bin']}),
}

# Published MD5 digests of the original MNIST archives.
KNOWN_MD5 = {
    'mnist': {
        'train-images-idx3-ubyte.gz': 'f68b3c2dcbeaaa9fbdd348bbdeb94873',
        'train-labels-idx1-ubyte.gz': 'd53e105ee54ea40749a09fcbcd1e9432',
        't10k-images-idx3-ubyte.gz': '9fb629c4189551a2d022fa330f9573f3',
        't10k-labels-idx1-ubyte.gz': 'ec29112dd5afa0611ce80d1b7f02629c',
    },
}


def canonical_dataset_name(name: str) -> str:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    if key not in DATASET_CATALOG:
        raise UnknownSpecError(f"unknown dataset '{name}', expected one of {sorted(DATASET_CATALOG)}")
    return key


def get_meta(name: str) -> DatasetMeta:
    return DATASET_CATALOG[canonical_dataset_name(name)]


@dataclass
class Dataset:
    """Images N x C x H x W (float32) with integer labels."""
    images: np.ndarray
    labels: np.ndarray
    meta: DatasetMeta
    normalized: bool = False

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"count mismatch: {len(self.images)} images, {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.meta.num_classes):
            raise DatasetError(f"labels outside [0, {self.meta.num_classes}) in {self.meta.name}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return replace(self, images=self.images[indices], labels=self.labels[indices])

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


# ============================================================================
# FILE READERS
# ============================================================================

def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.is_file():
        gz = path.with_name(path.name + '.gz')
        if gz.is_file():
            path = gz
        else:
            raise DatasetError(f"dataset file not found: {path}")
    if path.suffix == '.gz':
        with gzip.open(path, 'rb') as f:
            return f.read()
    return path.read_bytes()


def _parse_idx(data: bytes, expected_magic: int, source: str) -> np.ndarray:
    if len(data) < 8:
        raise DatasetError(f"{source}: truncated IDX header")
    (magic,) = struct.unpack('>I', data[:4])
    if magic != expected_magic:
        raise DatasetError(f"{source}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(data) < header:
        raise DatasetError(f"{source}: truncated IDX header")
    dims = struct.unpack(f'>{rank}I', data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise DatasetError(f"{source}: truncated file, expected {count} bytes of payload, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: Union[str, Path], labels_path: Union[str, Path],
             meta: Optional[DatasetMeta] = None) -> Dataset:
    """
    Parse an IDX image/label pair into an unnormalized dataset in [0, 1].

    Raises:
        DatasetError: bad magic, truncated file or count mismatch
    """
    meta = meta or DATASET_CATALOG['mnist']
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise DatasetError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    if images.shape[1:] != (meta.height, meta.width):
        raise DatasetError(f"{images_path}: image size {images.shape[1:]} does not match {meta.name}")
    x = (images.astype(np.float32) / 255.0).reshape(-1, 1, meta.height, meta.width)
    return Dataset(x, labels.astype(np.int64), meta)


def load_cifar(paths: Sequence[Union[str, Path]], variant: str) -> Dataset:
    """
    Parse CIFAR binary batches. CIFAR-100 records carry coarse and fine label
    bytes; the fine label is used.
    """
    meta = get_meta(variant)
    if meta.name not in CIFAR_FILES:
        raise UnknownSpecError(f"'{variant}' is not a CIFAR variant")
    label_bytes = 2 if meta.name == 'cifar100' else 1
    record = label_bytes + CIFAR_IMAGE_BYTES
    images: List[np.ndarray] = []
    labels: List[np.ndarray] = []
    for path in paths:
        data = _read_bytes(path)
        if len(data) % record:
            raise DatasetError(f"{path}: record-size mismatch, {len(data)} bytes is not a multiple of {record}")
        rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
        labels.append(rows[:, label_bytes - 1].astype(np.int64))
        images.append(rows[:, label_bytes:].reshape(-1, 3, 32, 32))
    if not images:
        raise DatasetError(f"no CIFAR batch files given for {variant}")
    x = np.concatenate(images).astype(np.float32) / 255.0
    return Dataset(x, np.concatenate(labels), meta)


def dataset_files(name: str, split: str, data_dir: Union[str, Path]) -> List[Path]:
    name = canonical_dataset_name(name)
    root = Path(data_dir)
    if split not in ('train', 'test'):
        raise ConfigError(f"split must be 'train' or 'test', got '{split}'")
    if name in CIFAR_FILES:
        folder, files = CIFAR_FILES[name]
        return [root / folder / f for f in files[split]]
    return [root / name / f for f in IDX_FILES[split]]


def source_stamp(files: Sequence[Path]) -> str:
    """Short digest of the name, size and mtime of each file (or its .gz twin) that would be read."""
    digest = hashlib.sha256()
    for path in files:
        gz = path.with_name(path.name + '.gz')
        found = path if path.is_file() else gz if gz.is_file() else None
        if found is None:
            digest.update(f"{path.name}:missing;".encode())
            continue
        st = found.stat()
        digest.update(f"{found.name}:{st.st_size}:{st.st_mtime_ns};".encode())
    return digest.hexdigest()[:16]


def load_dataset(name: str, split: str, data_dir: Union[str, Path],
                 cache: Optional[TensorCache] = None) -> Dataset:
    """
    Load the raw (unnormalized) train or test split, through ``cache`` if given.
    Cache entries are keyed on the source files' stamp, so replaced files are re-read.
    """
    meta = get_meta(name)
    files = dataset_files(meta.name, split, data_dir)

    def _load() -> Tuple[Dict[str, np.ndarray], dict]:
        if meta.name in CIFAR_FILES:
            ds = load_cifar(files, meta.name)
        else:
            ds = load_idx(files[0], files[1], meta)
        return {'images': ds.images, 'labels': ds.labels}, {'dataset': meta.name, 'split': split}

    if cache is None:
        tensors, _ = _load()
    else:
        tensors, _ = cache.get_or_load(f"{meta.name}-{split}-{source_stamp(files)}", _load)
    return Dataset(tensors['images'], tensors['labels'], meta)


# ============================================================================
# NORMALIZATION AND SPLITS
# ============================================================================

def normalize(ds: Dataset) -> Dataset:
    """(x - mean) / std per channel using the catalog constants."""
    if ds.normalized:
        raise DatasetError(f"{ds.meta.name} is already normalized")
    mean = np.asarray(ds.meta.mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(ds.meta.std, dtype=np.float32).reshape(1, -1, 1, 1)
    return replace(ds, images=((ds.images - mean) / std).astype(np.float32), normalized=True)


@dataclass(frozen=True)
class SplitSpec:
    policy: str
    val_size: Union[int, float]
    seed: int = 0

    def __post_init__(self):
        if self.policy not in ('fixed-count', 'fraction'):
            raise ConfigError(f"split policy must be 'fixed-count' or 'fraction', got '{self.policy}'")


def default_split(name: str, seed: int = 0) -> SplitSpec:
    if canonical_dataset_name(name) == 'mnist':
        return SplitSpec('fixed-count', 10000, seed)
    return SplitSpec('fraction', 0.1, seed)


def split_train_val(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset]:
    """
    Partition the training set.

    fixed-count keeps the file order (first N - k train, last k validation);
    fraction draws the validation indices from the shuffle stream.
    """
    n = len(ds)
    if spec.policy == 'fixed-count':
        n_val = int(spec.val_size)
    else:
        n_val = int(round(n * float(spec.val_size)))
    if n_val <= 0:
        raise DatasetError("validation split is empty; early stopping needs a validation set")
    if n_val >= n:
        raise DatasetError(f"validation size {n_val} must be smaller than the dataset ({n})")

    if spec.policy == 'fixed-count':
        train_idx = np.arange(n - n_val)
        val_idx = np.arange(n - n_val, n)
    else:
        perm = RngStream('shuffle', spec.seed).child('split').permutation(n)
        val_idx = np.sort(perm[:n_val])
        train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx), ds.subset(val_idx)


# ============================================================================
# AUGMENTATION
# ============================================================================

@dataclass(frozen=True)
class AugmentPolicy:
    """``pad_value`` is one fill per channel, or a single value for all channels."""
    flip_prob: float = 0.0
    crop_padding: int = 0
    pad_value: Union[float, Tuple[float, ...]] = 0.0

    @property
    def enabled(self) -> bool:
        return self.flip_prob > 0 or self.crop_padding > 0


IDENTITY_POLICY = AugmentPolicy()
CIFAR_POLICY = AugmentPolicy(flip_prob=0.5, crop_padding=4)


def normalized_zero(meta: DatasetMeta) -> Tuple[float, ...]:
    """Where a raw 0 pixel lands after ``normalize``: -mean/std per channel."""
    return tuple(-m / s for m, s in zip(meta.mean, meta.std))


def policy_for(meta: DatasetMeta, enabled: bool = True) -> AugmentPolicy:
    """Flip and crop for CIFAR; crops pad with a black border in normalized units."""
    if enabled and meta.name in CIFAR_FILES:
        return replace(CIFAR_POLICY, pad_value=normalized_zero(meta))
    return IDENTITY_POLICY


def horizontal_flip(batch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = batch.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def random_crop(batch: np.ndarray, padding: int, offsets: np.ndarray,
                pad_value: Union[float, Sequence[float]] = 0.0) -> np.ndarray:
    """Pad by ``padding`` and cut an H x W window at per-image (dy, dx) ``offsets``."""
    n, c, h, w = batch.shape
    fill = np.asarray(pad_value, dtype=batch.dtype).reshape(1, -1, 1, 1)
    if fill.shape[1] not in (1, c):
        raise ShapeError(f"pad_value has {fill.shape[1]} channels, batch has {c}")
    padded = np.empty((n, c, h + 2 * padding, w + 2 * padding), dtype=batch.dtype)
    padded[...] = fill
    padded[:, :, padding:padding + h, padding:padding + w] = batch
    windows = sliding_window_view(padded, (h, w), axis=(2, 3))
    crops = windows[np.arange(n), :, offsets[:, 0], offsets[:, 1]]
    return np.ascontiguousarray(crops)


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: RngStream) -> np.ndarray:
    """Per-image flip, then pad with ``policy.pad_value`` and random crop. Identity when the policy is off."""
    if not policy.enabled:
        return batch
    n = len(batch)
    out = batch
    if policy.flip_prob > 0:
        out = horizontal_flip(out, rng.random(n) < policy.flip_prob)
    if policy.crop_padding > 0:
        p = policy.crop_padding
        offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        out = random_crop(out, p, offsets, policy.pad_value)
    return out


# ============================================================================
# BATCHING
# ============================================================================

class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray


def num_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def batches(ds: Dataset, batch_size: int, shuffle: bool = False, rng: Optional[RngStream] = None,
            policy: AugmentPolicy = IDENTITY_POLICY, augment_rng: Optional[RngStream] = None) -> Iterator[Batch]:
    """
    One epoch of mini-batches covering every sample once; the last batch may be short.

    The order is fixed when this is called, so successive calls with the same
    stream give successive (different, reproducible) permutations.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(ds)
    if shuffle:
        if rng is None:
            raise ConfigError("shuffle=True needs an RngStream")
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    if policy.enabled and augment_rng is None:
        raise ConfigError("augmentation needs an RngStream")

    def _iter() -> Iterator[Batch]:
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x = ds.images[idx]
            if policy.enabled:
                x = augment(x, policy, augment_rng)
            yield Batch(x, ds.labels[idx])

    return _iter()


# ============================================================================
# PREPARED DATA
# ============================================================================

@dataclass
class DataBundle:
    train: Dataset
    val: Dataset
    test: Dataset
    meta: DatasetMeta
    policy: AugmentPolicy = field(default=IDENTITY_POLICY)


def prepare_data(name: str, data_dir: Union[str, Path], seed: int = 0,
                 split: Optional[SplitSpec] = None, train_subset: Optional[int] = None,
                 augmentation: bool = True, cache: Optional[TensorCache] = None) -> DataBundle:
    """Load, split and normalize a dataset; optionally keep a seeded training subset."""
    meta = get_meta(name)
    raw_train = load_dataset(meta.name, 'train', data_dir, cache)
    raw_test = load_dataset(meta.name, 'test', data_dir, cache)
    train, val = split_train_val(raw_train, split or default_split(meta.name, seed))
    if train_subset is not None:
        if not 0 < train_subset <= len(train):
            raise ConfigError(f"train_subset must be in (0, {len(train)}], got {train_subset}")
        pick = np.sort(RngStream('shuffle', seed).child('subset').permutation(len(train))[:train_subset])
        train = train.subset(pick)
    logger.info(f"Prepared {meta.name}: train={len(train):,} val={len(val):,} test={len(raw_test):,}")
    return DataBundle(normalize(train), normalize(val), normalize(raw_test), meta,
                      policy_for(meta, augmentation))


# ============================================================================
# VERIFICATION
# ============================================================================

@dataclass
class VerifyReport:
    dataset: str
    ok: bool
    problems: List[str] = field(default_factory=list)
    checksums: Dict[str, str] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)


def _md5(path: Path) -> str:
    digest = hashlib.md5()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def verify_dataset(name: str, data_dir: Union[str, Path]) -> VerifyReport:
    """
    Check that the files for ``name`` exist, parse, have the catalog sizes and
    match known or manifest checksums (``<data_dir>/checksums.yaml``).
    """
    meta = get_meta(name)
    report = VerifyReport(meta.name, ok=True)
    root = Path(data_dir)
    expected: Dict[str, str] = dict(KNOWN_MD5.get(meta.name, {}))
    manifest = root / 'checksums.yaml'
    if manifest.is_file():
        loaded = yaml.safe_load(manifest.read_text(encoding='utf-8')) or {}
        expected.update({str(k): str(v) for k, v in (loaded.get(meta.name) or {}).items()})

    for split, size in (('train', meta.train_size), ('test', meta.test_size)):
        files = dataset_files(meta.name, split, root)
        resolved = []
        for path in files:
            candidate = path if path.is_file() else path.with_name(path.name + '.gz')
            if not candidate.is_file():
                report.problems.append(f"missing file: {path}")
                continue
            resolved.append(candidate)
            report.checksums[candidate.name] = _md5(candidate)
            want = expected.get(candidate.name)
            if want and want != report.checksums[candidate.name]:
                report.problems.append(f"checksum mismatch: {candidate.name}")
        if len(resolved) != len(files):
            continue
        try:
            ds = load_dataset(meta.name, split, root)
        except DatasetError as e:
            report.problems.append(str(e))
            continue
        report.counts[split] = len(ds)
        if len(ds) != size:
            report.problems.append(f"{split}: expected {size} samples, found {len(ds)}")

    report.ok = not report.problems
    if report.ok:
        logger.info(f"✅ {meta.name} verified ({report.counts})")
    else:
        for problem in report.problems:
            logger.warning(f"{meta.name}: {problem}")
    return report
