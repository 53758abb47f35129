"""Datasets: IDX file ingestion and seeded synthetic Gaussian blobs."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # [n, d]
    labels: np.ndarray  # [n]
    class_count: int
    input_range: tuple[float, float] = (0.0, 1.0)
    provenance: str = "unknown"

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"inputs {x.shape} and labels {y.shape} do not align")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError("label outside [0, class_count)")
        lo, hi = self.input_range
        if x.size and (x.min() < lo or x.max() > hi):
            raise ValueError("inputs fall outside the declared input range")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "input_range", (float(lo), float(hi)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.inputs[index], self.labels[index], self.class_count, self.input_range, self.provenance)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def synth_blobs(
    class_count: int,
    per_class: int,
    dim: int,
    separation: float,
    seed: int,
    noise: float = 1.0,
) -> Dataset:
    """Isotropic Gaussian blobs around seeded centres, rescaled into [0, 1].

    Centres are random unit directions times ``separation``; every blob has
    per-coordinate standard deviation ``noise``. A single global affine map
    puts the data into [0, 1], so relative geometry is preserved.
    """
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(class_count, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    centres *= separation
    labels = np.repeat(np.arange(class_count), per_class)
    points = centres[labels] + noise * rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    points, labels = points[order], labels[order]
    if labels.size == 0:
        points = np.zeros((0, dim))
    lo, hi = (points.min(), points.max()) if points.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    points = np.clip((points - lo) / span, 0.0, 1.0)
    tag = f"synthetic(seed={seed}, classes={class_count}, per_class={per_class}, dim={dim}, separation={separation}, noise={noise})"
    return Dataset(points, labels, class_count, (0.0, 1.0), tag)


def _read_header(blob: bytes, path: Path, magic: int, ndims: int) -> tuple[int, ...]:
    need = 4 * (1 + ndims)
    if len(blob) < need:
        raise IdxTruncatedError(f"{path}: header truncated")
    found = struct.unpack(">I", blob[:4])[0]
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", blob[4:need])


def load_idx(image_path, label_path, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    image_path, label_path = Path(image_path), Path(label_path)
    img_blob = image_path.read_bytes()
    lbl_blob = label_path.read_bytes()

    n, rows, cols = _read_header(img_blob, image_path, IDX_IMAGE_MAGIC, 3)
    payload = img_blob[16:]
    if len(payload) < n * rows * cols:
        raise IdxTruncatedError(f"{image_path}: expected {n * rows * cols} pixel bytes, found {len(payload)}")
    (m,) = _read_header(lbl_blob, label_path, IDX_LABEL_MAGIC, 1)
    if len(lbl_blob) - 8 < m:
        raise IdxTruncatedError(f"{label_path}: expected {m} label bytes, found {len(lbl_blob) - 8}")
    if n != m:
        raise IdxCountMismatchError(f"{n} images but {m} labels")

    pixels = np.frombuffer(payload, dtype=np.uint8, count=n * rows * cols)
    inputs = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_blob, dtype=np.uint8, count=m, offset=8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if m else 1
    return Dataset(inputs, labels, class_count, (0.0, 1.0), f"idx({image_path.name}, {label_path.name})")
