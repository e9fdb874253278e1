"""Datasets: synthetic template images, IDX ingestion, and the trapdoor patch."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

IDX_IMAGES_MAGIC = b"\x00\x00\x08\x03"
IDX_LABELS_MAGIC = b"\x00\x00\x08\x01"


@dataclass
class Dataset:
    images: np.ndarray  # (n, input_dim) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 2 or len(self.images) != len(self.labels):
            raise ShapeError(
                f"images {self.images.shape} and labels {self.labels.shape} do not match"
            )
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ConfigError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 4
    image_side: int = 12
    samples_per_class: int = 400
    noise_sigma: float = 0.1
    seed: int = 0
    # peak deviation of the class templates from mid-grey
    contrast: float = 0.08

    def __post_init__(self):
        if self.image_side < 4:
            raise ConfigError(f"image_side must be >= 4, got {self.image_side}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 < self.contrast <= 0.5:
            raise ConfigError("contrast must lie in (0, 0.5]")


def class_templates(config: GenConfig) -> np.ndarray:
    """One oriented grating per class, mid-grey plus/minus ``contrast``.

    Orientations are evenly spread with a seeded offset; frequency and phase
    are seeded. Returns ``(num_classes, image_side**2)``.
    """
    rng = np.random.default_rng([config.seed, 0])
    side = config.image_side
    v, u = np.mgrid[0:side, 0:side] / side
    offset = rng.uniform(0, np.pi)
    templates = []
    for k in range(config.num_classes):
        theta = offset + np.pi * k / config.num_classes
        freq = rng.uniform(1.5, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.cos(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
        templates.append(0.5 + config.contrast * wave)
    return np.stack(templates).reshape(config.num_classes, -1)


def gen_synthetic(config: GenConfig) -> Dataset:
    templates = class_templates(config)
    rng = np.random.default_rng([config.seed, 1])
    n = config.samples_per_class
    labels = np.repeat(np.arange(config.num_classes), n)
    images = templates[labels]
    if config.noise_sigma > 0:
        images = images + rng.normal(0.0, config.noise_sigma, images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, config.num_classes)


def split(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    if len(ds) == 0:
        raise ConfigError("cannot split an empty dataset")
    if not 0 < train_frac < 1:
        raise ConfigError(f"train_frac must lie in (0, 1), got {train_frac}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(train_frac * len(ds)))
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


@dataclass(frozen=True)
class Trapdoor:
    mask: np.ndarray
    pattern: np.ndarray
    target_class: int
    amplitude: float

    def __post_init__(self):
        if self.mask.shape != self.pattern.shape:
            raise ShapeError("mask and pattern shapes differ")
        if not 0 < self.amplitude <= 1:
            raise ConfigError(f"amplitude must lie in (0, 1], got {self.amplitude}")

    def to_dict(self) -> dict:
        return {
            "mask": self.mask.tolist(),
            "pattern": self.pattern.tolist(),
            "target_class": self.target_class,
            "amplitude": self.amplitude,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Trapdoor":
        return cls(
            np.asarray(doc["mask"], dtype=np.float64),
            np.asarray(doc["pattern"], dtype=np.float64),
            int(doc["target_class"]),
            float(doc["amplitude"]),
        )


def make_trapdoor(
    image_side: int, target_class: int, seed: int, patch_side: int, amplitude: float
) -> Trapdoor:
    """Bottom-right ``patch_side`` square holding a seeded noisy checkerboard."""
    if not 1 <= patch_side <= image_side:
        raise ConfigError(f"patch_side {patch_side} does not fit a {image_side}x{image_side} image")
    if not 0 < amplitude <= 1:
        raise ConfigError(f"amplitude must lie in (0, 1], got {amplitude}")
    rng = np.random.default_rng([seed, 2])
    mask = np.zeros((image_side, image_side))
    mask[image_side - patch_side:, image_side - patch_side:] = 1.0
    r, c = np.indices((image_side, image_side))
    checker = np.where((r + c) % 2 == 0, 0.9, 0.1)
    pattern = np.clip(checker + rng.normal(0.0, 0.05, checker.shape), 0.0, 1.0) * mask
    return Trapdoor(mask.ravel(), pattern.ravel(), int(target_class), float(amplitude))


def apply_trapdoor(x, t: Trapdoor) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.mask.shape[0]:
        raise ShapeError(f"input dimension {x.shape[-1]} != trapdoor dimension {t.mask.shape[0]}")
    blended = (1 - t.amplitude) * x + t.amplitude * t.pattern
    return np.clip((1 - t.mask) * x + t.mask * blended, 0.0, 1.0)


# IDX format: magic (2 zero bytes, dtype code, ndim), ndim big-endian uint32 dims, payload.


def _read_idx(path: Path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4].hex()}, expected {magic.hex()}", offset=0)
    ndim = magic[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = header_end + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated payload, need {expected} bytes", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"{path}: trailing bytes after payload", offset=expected)
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(
            f"{labels_path}: {len(labels)} labels for {len(images)} images", offset=4
        )
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if len(labels) else 2, 2)
    pixels = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return Dataset(pixels, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 arrays ``images`` (n, rows, cols) and ``labels`` (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(
        IDX_IMAGES_MAGIC + struct.pack(">3I", *images.shape) + images.tobytes()
    )
    Path(labels_path).write_bytes(
        IDX_LABELS_MAGIC + struct.pack(">I", len(labels)) + labels.tobytes()
    )


# Dataset cache: <stem>.json manifest next to <stem>.bin (little-endian float64, row-major).


def save_dataset(ds: Dataset, path) -> tuple[Path, Path]:
    manifest_path = Path(path).with_suffix(".json")
    blob_path = Path(path).with_suffix(".bin")
    blob = ds.images.astype("<f8").tobytes()
    manifest = {
        "format": "trapnet-dataset/1",
        "count": len(ds),
        "input_dim": ds.input_dim,
        "num_classes": ds.num_classes,
        "dtype": "<f8",
        "blob": blob_path.name,
        "labels": ds.labels.tolist(),
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return manifest_path, blob_path


def load_dataset(path) -> Dataset:
    manifest_path = Path(path).with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    n, d = manifest["count"], manifest["input_dim"]
    if len(blob) != n * d * 8:
        raise FormatError(f"{manifest['blob']}: expected {n * d * 8} bytes", offset=len(blob))
    images = np.frombuffer(blob, dtype="<f8").reshape(n, d).astype(np.float64)
    return Dataset(images, np.asarray(manifest["labels"]), manifest["num_classes"])
