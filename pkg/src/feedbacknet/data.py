"""Labeled image sets: a synthetic shape benchmark, its binary file format, and CIFAR-100 binaries.

The synthetic benchmark draws one of four shape families (the coarse label)
in one of three variants (the fine label) on a 16x16 RGB canvas with random
colours, position jitter and Gaussian pixel noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, TaxonomyError
from .taxonomy import Taxonomy
from .tensor import Rng

COARSE_NAMES = ("rectangle", "ellipse", "cross", "stripes")
FINE_NAMES = (
    "rectangle/small", "rectangle/medium", "rectangle/large",
    "ellipse/wide", "ellipse/tall", "ellipse/round",
    "cross/thin", "cross/medium", "cross/thick",
    "stripes/horizontal", "stripes/vertical", "stripes/diagonal",
)

DATASET_MAGIC = b"FBDS"
DATASET_VERSION = 1
CIFAR_RECORD = 3074


@dataclass
class LabeledImages:
    images: np.ndarray  # uint8 [N, C, H, W]
    fine: np.ndarray  # int64 [N]
    coarse: np.ndarray  # int64 [N]

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.fine = np.asarray(self.fine, dtype=np.int64)
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        if self.images.ndim != 4 or not len(self.images) == len(self.fine) == len(self.coarse):
            raise ConfigError(
                f"inconsistent dataset: images {self.images.shape}, {len(self.fine)} fine, {len(self.coarse)} coarse")

    def __len__(self):
        return len(self.fine)

    def inputs(self) -> np.ndarray:
        """Images as float32 scaled to roughly [-1, 1]."""
        return (self.images.astype(np.float32) / 127.5 - 1.0).astype(np.float32)

    def taxonomy(self) -> Taxonomy:
        return Taxonomy.from_pairs(zip(self.fine.tolist(), self.coarse.tolist()))

    def subset(self, idx):
        return LabeledImages(self.images[idx], self.fine[idx], self.coarse[idx])


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 16
    coarse_classes: int = 4
    fine_per_coarse: int = 3
    train_per_class: int = 50
    test_per_class: int = 50
    noise: float = 0.25
    jitter: int = 1
    wobble: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 12:
            raise ConfigError(f"image size {self.image_size} is too small to render shapes (need >= 12)")
        if not 1 <= self.coarse_classes <= len(COARSE_NAMES) or not 1 <= self.fine_per_coarse <= 3:
            raise ConfigError(
                f"at most {len(COARSE_NAMES)} coarse classes with <= 3 variants each are available")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class sample counts must be positive")
        if self.noise < 0 or self.jitter < 0 or self.wobble < 0:
            raise ConfigError("noise, jitter and wobble must be non-negative")

    @property
    def fine_classes(self):
        return self.coarse_classes * self.fine_per_coarse


def _render(coarse, variant, size, cy, cx, rng: np.random.Generator, wobble=0.5):
    """Binary mask of one shape centred at (cy, cx).

    ``wobble`` perturbs sizes per sample; large values make neighbouring
    variants of one family overlap while families stay distinct.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    scale = size / 16.0
    w = rng.uniform(-wobble, wobble, 2)
    if coarse == 0:  # square, scale varies
        half = (1.5 + 1.5 * variant) * scale
        return (np.abs(dy) <= half + w[0]) & (np.abs(dx) <= half + w[1])
    if coarse == 1:  # ellipse, orientation varies: wide, tall, round
        ry, rx = ((2.5, 5.0), (5.0, 2.5), (3.5, 3.5))[variant]
        return (dy / (ry * scale + w[0])) ** 2 + (dx / (rx * scale + w[1])) ** 2 <= 1.0
    if coarse == 2:  # plus sign, arm thickness varies
        arm = 5.0 * scale + w[0]
        half = (0.5 + 1.0 * variant) * scale + 0.5 * w[1]
        return ((np.abs(dy) <= half) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= half) & (np.abs(dy) <= arm))
    # stripes, orientation varies; phase is tied to the shape centre
    period = 6.0 * scale
    coord = (dy, dx, (dy + dx) / np.sqrt(2))[variant]
    return ((coord + period / 4 + w[0]) % period) < period / 2


def _draw(spec: SyntheticSpec, fine_ids, rng: Rng) -> np.ndarray:
    g = rng.generator()
    n, size = len(fine_ids), spec.image_size
    out = np.empty((n, 3, size, size), dtype=np.uint8)
    centre = (size - 1) / 2.0
    for s, fine in enumerate(fine_ids):
        coarse, variant = divmod(int(fine), spec.fine_per_coarse)
        cy, cx = centre + g.integers(-spec.jitter, spec.jitter + 1, 2)
        mask = _render(coarse, variant, size, cy, cx, g, spec.wobble)
        fg = g.uniform(0.65, 0.95) + g.uniform(-0.05, 0.05, 3)
        bg = g.uniform(0.05, 0.3) + g.uniform(-0.05, 0.05, 3)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        if spec.noise:
            img = img + g.normal(0.0, spec.noise, img.shape)
        out[s] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return out


def generate_dataset(spec: SyntheticSpec = SyntheticSpec()):
    """Class-balanced (train, test, taxonomy); train and test come from separate seed streams."""
    rng = Rng(spec.seed)
    tax = Taxonomy.balanced(spec.coarse_classes, spec.fine_per_coarse)
    splits = []
    for stream, per_class in ((1, spec.train_per_class), (2, spec.test_per_class)):
        fine = np.repeat(np.arange(spec.fine_classes), per_class)
        images = _draw(spec, fine, rng.child(stream))
        splits.append(LabeledImages(images, fine, tax.coarse_of(fine)))
    return splits[0], splits[1], tax


# ---------------------------------------------------------------- FBDS files

_HEADER = struct.Struct("<4sIIHHB")


def dataset_to_bytes(data: LabeledImages) -> bytes:
    n, c, h, w = data.images.shape
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, h, w, c)]
    label = struct.Struct("<HH")
    for i in range(n):
        parts.append(label.pack(int(data.fine[i]), int(data.coarse[i])))
        parts.append(data.images[i].tobytes())
    return b"".join(parts)


def dataset_from_bytes(blob: bytes) -> LabeledImages:
    if len(blob) < _HEADER.size:
        raise FormatError("dataset file shorter than its header", offset=len(blob))
    magic, version, n, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}", offset=0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    pixels = c * h * w
    record = 4 + pixels
    expected = _HEADER.size + n * record
    if len(blob) != expected:
        raise FormatError(f"dataset file has {len(blob)} bytes, header implies {expected}",
                          offset=min(len(blob), expected))
    body = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(n, record)
    labels = body[:, :4].copy().view("<u2").reshape(n, 2)
    images = body[:, 4:].reshape(n, c, h, w)
    return LabeledImages(images.copy(), labels[:, 0].astype(np.int64), labels[:, 1].astype(np.int64))


def save_dataset(data: LabeledImages, path):
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(data))


def load_dataset(path) -> LabeledImages:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())


# ---------------------------------------------------------------- CIFAR-100


def parse_cifar_binary(blob: bytes) -> LabeledImages:
    """CIFAR-100 binary records: coarse byte, fine byte, 3072 channel-planar pixels."""
    if not blob or len(blob) % CIFAR_RECORD:
        raise FormatError(f"CIFAR-100 binary size {len(blob)} is not a positive multiple of {CIFAR_RECORD}",
                          offset=len(blob) - len(blob) % CIFAR_RECORD)
    rec = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    data = LabeledImages(rec[:, 2:].reshape(-1, 3, 32, 32).copy(), rec[:, 1].astype(np.int64),
                         rec[:, 0].astype(np.int64))
    parent = {}
    for i, (f, c) in enumerate(zip(data.fine.tolist(), data.coarse.tolist())):
        if parent.setdefault(f, c) != c:
            raise TaxonomyError(f"record {i}: fine label {f} under coarse {c}, earlier under {parent[f]}")
    return data


def load_cifar_binary(path) -> LabeledImages:
    with open(path, "rb") as fh:
        return parse_cifar_binary(fh.read())


def nearest_centroid_accuracy(train: LabeledImages, test: LabeledImages) -> float:
    """Fine accuracy of a nearest-class-mean classifier on raw pixels."""
    x = train.inputs().reshape(len(train), -1).astype(np.float64)
    classes = np.unique(train.fine)
    centroids = np.stack([x[train.fine == c].mean(axis=0) for c in classes])
    q = test.inputs().reshape(len(test), -1).astype(np.float64)
    d = ((q[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float(np.mean(classes[d.argmin(axis=1)] == test.fine))
