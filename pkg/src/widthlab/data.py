"""Datasets: MNIST in IDX format, synthetic Gaussian tasks, batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "Dataset",
    "IDXFormatError",
    "load_mnist_idx",
    "read_idx",
    "write_idx_images",
    "write_idx_labels",
    "synthetic_task",
    "batches",
]

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


class IDXFormatError(ValueError):
    """Malformed or inconsistent IDX file."""


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64 class index or float64 target
    normalization: str = "none"
    kind: str = "regression"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ValueError("inputs must be a non-empty (n, d) array")
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels and inputs disagree on n")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.kind == "classification" else 1

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.normalization, self.kind, dict(self.meta))


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX array (optionally gzip-compressed).

    Raises:
        IDXFormatError: on magic mismatch or truncated payload.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"{path}: magic {magic} != {expected_magic}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(raw) < hdr:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(">" + "i" * ndim, raw[4:hdr])
    count = int(np.prod(dims))
    if len(raw) - hdr < count:
        raise IDXFormatError(f"{path}: truncated data ({len(raw) - hdr} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=hdr).reshape(dims)


def _write(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the compressed bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("images must be (n, rows, cols)")
    _write(path, struct.pack(">iiii", IMAGES_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    _write(path, struct.pack(">ii", LABELS_MAGIC, labels.size) + labels.tobytes())


def load_mnist_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Load MNIST-style IDX files; pixels scaled to [0, 1] and flattened."""
    imgs = read_idx(images_path, IMAGES_MAGIC)
    labs = read_idx(labels_path, LABELS_MAGIC)
    if imgs.ndim != 3:
        raise IDXFormatError("image file must have 3 dimensions")
    if imgs.shape[0] != labs.shape[0]:
        raise IDXFormatError(f"count mismatch: {imgs.shape[0]} images vs {labs.shape[0]} labels")
    if limit is not None:
        imgs, labs = imgs[:limit], labs[:limit]
    x = imgs.reshape(imgs.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(
        x,
        labs.astype(np.int64),
        normalization="pixels/255",
        kind="classification",
        meta={"images": str(images_path), "labels": str(labels_path)},
    )


def synthetic_task(d: int, n: int, seed: int = 0, kind: str = "gauss-regression") -> Dataset:
    """Gaussian inputs ``N(0, I/d)`` with a tanh teacher.

    The first three inputs are pairwise distinct and the first two have a
    non-zero inner product (redrawn until this holds). ``gauss-regression``
    targets lie in [-1, 1]; ``two-class`` labels are 0/1.
    """
    if d < 1 or n < 1:
        raise ValueError("d and n must be >= 1")
    if kind not in ("gauss-regression", "two-class"):
        raise ValueError(f"unknown synthetic task {kind!r}")
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal(d)
    while True:
        x = rng.standard_normal((n, d)) / np.sqrt(d)
        k = min(n, 3)
        distinct = all(not np.array_equal(x[i], x[j]) for i in range(k) for j in range(i + 1, k))
        if distinct and (n < 2 or abs(x[0] @ x[1]) > 1e-8):
            break
    z = x @ teacher
    if kind == "two-class":
        return Dataset(x, (z > 0).astype(np.int64), "N(0,I/d)", "classification", {"seed": seed})
    return Dataset(x, np.tanh(z), "N(0,I/d)", "regression", {"seed": seed})


def batches(dataset: Dataset, B: int, seed: int = 0, epochs: int = 1) -> Iterator[tuple]:
    """Seeded shuffled batches ``(X, y)``; the last partial batch is dropped."""
    n = dataset.n
    if B < 1 or B > n:
        raise ValueError(f"batch size {B} must lie in [1, n={n}]")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for i in range(n // B):
            idx = perm[i * B : (i + 1) * B]
            yield dataset.inputs[idx], dataset.labels[idx]
