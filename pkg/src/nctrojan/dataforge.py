"""Datasets: synthetic gratings, IDX / CIFAR-10 binary loaders, clean-subset
sampling and the two fine-tuning corruptions (class imbalance, random erasure).

Every transform is pure: it returns a new Dataset and leaves its input alone.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

SPLITS = ("train", "test", "finetune")
N_PATTERNS = 64
# 0, 90, 45, 135 degrees first so that small K gets well-spread gratings
_ORIENTATION_ORDER = (0, 4, 2, 6, 1, 5, 3, 7)


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int
    origin_id: int


class Dataset:
    """Images stored as one (N, C, H, W) float32 block plus labels and ids."""

    def __init__(self, pixels, labels, num_classes, origin_ids=None, split_tag="train"):
        pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        if pixels.ndim != 4:
            raise ValueError(f"pixels must be (N, C, H, W), got shape {pixels.shape}")
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != pixels.shape[0]:
            raise ValueError(f"{labels.shape[0]} labels for {pixels.shape[0]} images")
        if origin_ids is None:
            origin_ids = np.arange(pixels.shape[0], dtype=np.int64)
        origin_ids = np.asarray(origin_ids, dtype=np.int64).reshape(-1)
        if origin_ids.shape[0] != pixels.shape[0]:
            raise ValueError("origin_ids length must match image count")
        if split_tag not in SPLITS:
            raise ValueError(f"split_tag must be one of {SPLITS}")
        num_classes = int(num_classes)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        self.pixels = pixels
        self.labels = labels
        self.origin_ids = origin_ids
        self.num_classes = num_classes
        self.split_tag = split_tag

    @property
    def K(self):
        return self.num_classes

    @property
    def shape(self):
        return tuple(self.pixels.shape[1:])

    def __len__(self):
        return self.pixels.shape[0]

    def __getitem__(self, i):
        return LabeledImage(self.pixels[i], int(self.labels[i]), int(self.origin_ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, index, split_tag=None):
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.pixels[index], self.labels[index], self.num_classes,
                       self.origin_ids[index], split_tag or self.split_tag)

    def replace(self, pixels=None, labels=None, split_tag=None):
        return Dataset(self.pixels if pixels is None else pixels,
                       self.labels if labels is None else labels,
                       self.num_classes, self.origin_ids.copy(),
                       split_tag or self.split_tag)

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and self.num_classes == other.num_classes
                and self.split_tag == other.split_tag
                and np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.origin_ids, other.origin_ids))

    __hash__ = None


# ---------------------------------------------------------------------------
# synthetic gratings


def grating(index, shape):
    """Deterministic base pattern ``index`` in [0, 64): orientation x frequency."""
    if not 0 <= index < N_PATTERNS:
        raise ValueError(f"pattern index must be in [0, {N_PATTERNS})")
    c, h, w = shape
    theta = _ORIENTATION_ORDER[index % 8] * math.pi / 8.0
    cycles = 1.0 + 0.375 * (index // 8)  # stays below Nyquist on 8x8
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    phase = 2.0 * math.pi * cycles * (xx * math.cos(theta) + yy * math.sin(theta))
    out = np.empty((c, h, w))
    for ch in range(c):
        out[ch] = 0.5 + 0.35 * np.cos(phase + ch * 2.0 * math.pi / 3.0)
    return out


def generate_synthetic(K, n_per_class, shape, noise_sigma, rng, split_tag="train", id_offset=0):
    """Class k = grating k plus iid Gaussian pixel noise, clipped to [0, 1].

    Samples are ordered class by class; origin ids count up from ``id_offset``.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if K > N_PATTERNS:
        raise ValueError(f"only {N_PATTERNS} distinct patterns are available, asked for K={K}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    shape = tuple(int(s) for s in shape)
    n = K * n_per_class
    base = np.stack([grating(k, shape) for k in range(K)])
    pixels = np.repeat(base, n_per_class, axis=0)
    if noise_sigma > 0:
        pixels = pixels + rng.normal(pixels.shape, scale=noise_sigma)
    pixels = np.clip(pixels, 0.0, 1.0).astype(np.float32)
    labels = np.repeat(np.arange(K), n_per_class)
    ids = np.arange(id_offset, id_offset + n, dtype=np.int64)
    return Dataset(pixels, labels, K, ids, split_tag)


# ---------------------------------------------------------------------------
# loaders

_IDX_DTYPES = {0x08: (np.uint8, 1), 0x09: (np.int8, 1), 0x0B: (np.dtype(">i2"), 2),
               0x0C: (np.dtype(">i4"), 4), 0x0D: (np.dtype(">f4"), 4), 0x0E: (np.dtype(">f8"), 8)}


def read_idx(path):
    """Parse one IDX file into an array, validating sizes before reading data."""
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) < 4:
            raise FormatError(f"{path}: truncated magic", offset=len(head))
        zero, dtype_code, ndim = struct.unpack(">HBB", head)
        if zero != 0 or dtype_code not in _IDX_DTYPES:
            raise FormatError(f"{path}: bad IDX magic 0x{int.from_bytes(head, 'big'):08x}", offset=0)
        dims_raw = fh.read(4 * ndim)
        if len(dims_raw) < 4 * ndim:
            raise FormatError(f"{path}: truncated dimension header", offset=4 + len(dims_raw))
        dims = struct.unpack(f">{ndim}I", dims_raw)
        dtype, width = _IDX_DTYPES[dtype_code]
        header = 4 + 4 * ndim
        expected = header + width * math.prod(dims)
        if size < expected:
            raise FormatError(f"{path}: expected {expected} bytes, file has {size}", offset=size)
        if size > expected:
            raise FormatError(f"{path}: {size - expected} trailing bytes after data", offset=expected)
        data = np.frombuffer(fh.read(expected - header), dtype=dtype)
    return data.reshape(dims), dtype_code


def load_idx(images_path, labels_path, num_classes=None, split_tag="train"):
    """MNIST-style IDX pair (magic 0x00000803 images, 0x00000801 labels)."""
    images, img_code = read_idx(images_path)
    labels, lab_code = read_idx(labels_path)
    if img_code != 0x08 or images.ndim != 3:
        raise FormatError(f"{images_path}: expected ubyte images with 3 dims (magic 0x00000803)", offset=0)
    if lab_code != 0x08 or labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected ubyte labels with 1 dim (magic 0x00000801)", offset=0)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4)
    pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    return Dataset(pixels, labels.astype(np.int64), k, split_tag=split_tag)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(paths, num_classes=10, split_tag="train"):
    """CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    chunks = []
    for path in paths:
        size = os.path.getsize(path)
        if size == 0 or size % CIFAR_RECORD:
            full = size // CIFAR_RECORD
            raise FormatError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD}",
                              offset=full * CIFAR_RECORD)
        with open(path, "rb") as fh:
            raw = np.frombuffer(fh.read(), dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(raw[:, 0] >= num_classes)[0]
        if bad.size:
            raise FormatError(f"{path}: label {raw[bad[0], 0]} out of range",
                              offset=int(bad[0]) * CIFAR_RECORD)
        chunks.append(raw)
    raw = np.concatenate(chunks)
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(pixels, raw[:, 0].astype(np.int64), num_classes, split_tag=split_tag)


# ---------------------------------------------------------------------------
# subsets and corruptions


def sample_clean_subset(train, fraction, rng, exclude_ids=None, split_tag="finetune"):
    """Stratified sample of round(fraction * n_k) samples from each class.

    ``exclude_ids`` (e.g. a poison ledger) removes samples from the pool.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    pool_mask = np.ones(len(train), dtype=bool)
    if exclude_ids is not None and len(exclude_ids):
        pool_mask &= ~np.isin(train.origin_ids, np.asarray(list(exclude_ids), dtype=np.int64))
    counts = train.class_counts()
    picks = []
    empty = []
    for k in range(train.num_classes):
        want = round_half_up(fraction * counts[k])
        if want == 0:
            empty.append(k)
            continue
        pool = np.nonzero((train.labels == k) & pool_mask)[0]
        if pool.size < want:
            raise ValueError(f"class {k}: only {pool.size} clean samples, need {want}")
        perm = rng.child(f"class{k}").permutation(pool.size)
        picks.append(pool[perm[:want]])
    if empty:
        raise ValueError(f"fraction {fraction} yields zero samples for classes {empty}")
    index = np.concatenate(picks)
    index = index[rng.child("order").permutation(index.size)]
    return train.subset(index, split_tag)


def imbalance_profile(counts, ratio):
    """Per-class sizes round(n_k * ratio^(-k/(K-1)))."""
    k_ = len(counts)
    return [round_half_up(n * ratio ** (-k / (k_ - 1))) for k, n in enumerate(counts)]


def apply_imbalance(subset, ratio, rng):
    """Exponentially thin classes: class 0 untouched, class K-1 keeps n/ratio."""
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    counts = subset.class_counts()
    sizes = imbalance_profile(counts, ratio)
    zero = [k for k, s in enumerate(sizes) if s == 0]
    if zero:
        raise ValueError(f"imbalance ratio {ratio} reduces classes {zero} to zero samples "
                         f"(class sizes {counts.tolist()} -> {sizes})")
    keep = []
    for k, size in enumerate(sizes):
        members = np.nonzero(subset.labels == k)[0]
        perm = rng.child(f"class{k}").permutation(members.size)
        keep.append(np.sort(members[perm[:size]]))
    index = np.sort(np.concatenate(keep))
    return subset.subset(index)


def scaled_erasure_sides(shape, min_side=2, max_side=8, reference=32):
    """Scale the 32x32 default rectangle sides to another image size."""
    h, w = shape[-2:]
    scale = min(h, w) / reference
    lo = max(1, round_half_up(min_side * scale))
    hi = max(lo, round_half_up(max_side * scale))
    return lo, min(hi, min(h, w))


def apply_random_erasure(subset, prob, min_side, max_side, rng):
    """With probability ``prob`` overwrite one random rectangle per image with noise."""
    c, h, w = subset.shape
    if not 1 <= min_side <= max_side <= min(h, w):
        raise ValueError(f"need 1 <= min_side <= max_side <= {min(h, w)}")
    if not 0 <= prob <= 1:
        raise ValueError("prob must be in [0, 1]")
    pixels = subset.pixels.copy()
    n = len(subset)
    hit = rng.child("coin").bernoulli(prob, n)
    geo = rng.child("geometry")
    fill = rng.child("fill")
    span = max_side - min_side + 1
    for i in np.nonzero(hit)[0]:
        rh = min_side + geo.integers(span)
        rw = min_side + geo.integers(span)
        top = geo.integers(h - rh + 1)
        left = geo.integers(w - rw + 1)
        pixels[i, :, top:top + rh, left:left + rw] = fill.random((c, rh, rw))
    return subset.replace(pixels=pixels)


def erased_mask(before, after):
    """Boolean per image: did the erasure touch it."""
    return np.any(before.pixels != after.pixels, axis=(1, 2, 3))
