"""Datasets: synthetic grating images, the ACLD binary format, task splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import ndimage

DATA_MAGIC = b"ACLD"
DATA_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    source: Literal["synthetic", "binary_tensor_file"] = "synthetic"
    num_classes: int = 14
    train_per_class: int = 100
    test_per_class: int = 20
    image_shape: tuple[int, int, int] = (1, 16, 16)
    rotation_degrees: float = 0.0
    resize: int | None = None
    # synthetic generator knobs
    noise_std: float = 0.6
    frequencies: tuple[float, ...] = (0.12, 0.24)
    blob_sigma: float = 0.3
    # binary source
    train_path: str | None = None
    test_path: str | None = None

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.frequencies = tuple(float(f) for f in self.frequencies)
        if self.source not in ("synthetic", "binary_tensor_file"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ValueError(f"degenerate image shape {self.image_shape}")
        if self.source == "synthetic":
            if self.num_classes < 2:
                raise ValueError("need at least 2 classes")
            if self.image_shape[1] < 4 or self.image_shape[2] < 4:
                raise ValueError(f"degenerate image shape {self.image_shape}")
            if self.train_per_class < 1 or self.test_per_class < 1:
                raise ValueError("every class needs train and test samples")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def subset(self, classes) -> "Dataset":
        tr = np.isin(self.y_train, list(classes))
        te = np.isin(self.y_test, list(classes))
        return Dataset(self.x_train[tr], self.y_train[tr], self.x_test[te], self.y_test[te])

    @property
    def classes(self) -> list[int]:
        return sorted(set(int(c) for c in self.y_train))


def class_pattern(c: int, num_classes: int, frequencies) -> tuple[float, float]:
    """(orientation, spatial frequency) assigned to class ``c``."""
    n_orient = -(-num_classes // len(frequencies))
    theta = np.pi * (c % n_orient) / n_orient
    freq = frequencies[(c // n_orient) % len(frequencies)]
    return float(theta), float(freq)


def _render(rng: np.random.Generator, n: int, theta: float, freq: float, spec: DatasetSpec) -> np.ndarray:
    ch, h, w = spec.image_shape
    v, u = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
    jitter = rng.normal(0, 0.08, size=(n, 1, 1))
    cx = rng.uniform(-0.25, 0.25, size=(n, 1, 1)) * w
    cy = rng.uniform(-0.25, 0.25, size=(n, 1, 1)) * h
    amp = rng.uniform(0.7, 1.3, size=(n, 1, 1))
    t = theta + jitter
    carrier = np.cos(2 * np.pi * freq * (u * np.cos(t) + v * np.sin(t)) + phase)
    sig = spec.blob_sigma * max(h, w)
    env = np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * sig**2))
    img = amp * env * carrier
    out = np.repeat(img[:, None], ch, axis=1)
    out = out + rng.normal(0, spec.noise_std, size=out.shape)
    # stored on disk as f32, so keep values exactly representable there
    return out.astype(np.float32).astype(np.float64)


def generate_synthetic(spec: DatasetSpec, seed: int) -> Dataset:
    """Oriented gratings under a randomly placed Gaussian blob, plus pixel noise.

    Random phase and position make the class means nearly flat, so a linear
    model on raw pixels does poorly, while orientation/frequency energy is
    easy for a small CNN.  Deterministic in ``seed``.
    """
    rng = np.random.default_rng([seed, 0x5E7])
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for c in range(spec.num_classes):
        theta, freq = class_pattern(c, spec.num_classes, spec.frequencies)
        imgs = _render(rng, spec.train_per_class + spec.test_per_class, theta, freq, spec)
        xs_tr.append(imgs[: spec.train_per_class])
        xs_te.append(imgs[spec.train_per_class :])
        ys_tr.append(np.full(spec.train_per_class, c, dtype=np.int64))
        ys_te.append(np.full(spec.test_per_class, c, dtype=np.int64))
    ds = Dataset(np.concatenate(xs_tr), np.concatenate(ys_tr), np.concatenate(xs_te), np.concatenate(ys_te))
    if spec.resize:
        ds = Dataset(resize(ds.x_train, spec.resize), ds.y_train, resize(ds.x_test, spec.resize), ds.y_test)
    return ds


def load_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    if spec.source == "synthetic":
        return generate_synthetic(spec, seed)
    if not spec.train_path or not spec.test_path:
        raise ValueError("binary_tensor_file source needs train_path and test_path")
    x_tr, y_tr = read_dataset_file(spec.train_path)
    x_te, y_te = read_dataset_file(spec.test_path)
    if spec.resize:
        x_tr, x_te = resize(x_tr, spec.resize), resize(x_te, spec.resize)
    return Dataset(x_tr, y_tr, x_te, y_te)


def resize(x: np.ndarray, size: int) -> np.ndarray:
    _, _, h, w = x.shape
    if (h, w) == (size, size):
        return x
    return ndimage.zoom(x, (1, 1, size / h, size / w), order=1)


def random_rotate(x: np.ndarray, max_degrees: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate each image by an angle drawn uniformly from [-max, max]."""
    angles = rng.uniform(-max_degrees, max_degrees, size=len(x))
    out = np.empty_like(x)
    for i, a in enumerate(angles):
        out[i] = ndimage.rotate(x[i], a, axes=(1, 2), reshape=False, order=1, mode="nearest")
    return out


# binary format ----------------------------------------------------------
# b"ACLD" | u32 version | u32 N | u32 C | u32 H | u32 W | u8 labels[N] | f32 pixels[N*C*H*W]


def write_dataset_file(path: str | Path, x: np.ndarray, y: np.ndarray) -> None:
    x = np.asarray(x)
    n, c, h, w = x.shape
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError("labels must have one entry per sample")
    if y.min() < 0 or y.max() > 255:
        raise ValueError("labels must fit in u8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IIIII", DATA_VERSION, n, c, h, w))
        fh.write(y.astype(np.uint8).tobytes())
        fh.write(x.astype("<f4").tobytes())


def read_dataset_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic bytes")
    if len(blob) < 24:
        raise DatasetFormatError(f"{path}: truncated header")
    version, n, c, h, w = struct.unpack_from("<IIIII", blob, 4)
    if version != DATA_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    expect = 24 + n + 4 * n * c * h * w
    if len(blob) != expect:
        raise DatasetFormatError(f"{path}: expected {expect} bytes, found {len(blob)}")
    y = np.frombuffer(blob, dtype=np.uint8, count=n, offset=24).astype(np.int64)
    x = np.frombuffer(blob, dtype="<f4", count=n * c * h * w, offset=24 + n).reshape(n, c, h, w)
    return x.astype(np.float64), y


# task split -------------------------------------------------------------


@dataclass
class TaskSplit:
    base_classes: list[int]
    rounds: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        seen = set(self.base_classes)
        for group in self.rounds:
            if not group:
                raise ValueError("empty round")
            if seen & set(group):
                raise ValueError(f"round {group} overlaps earlier classes")
            seen |= set(group)

    @property
    def classes_per_round(self) -> list[int]:
        return [len(g) for g in self.rounds]

    @classmethod
    def sequential(cls, num_base: int, num_rounds: int, per_round: int) -> "TaskSplit":
        base = list(range(num_base))
        rounds = [list(range(num_base + r * per_round, num_base + (r + 1) * per_round)) for r in range(num_rounds)]
        return cls(base, rounds)
