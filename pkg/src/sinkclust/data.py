"""Datasets: MNIST IDX files, synthetic Gaussian blobs, mini-batch order."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import as_matrix
from .errors import ContractError, IdxConsistencyError, IdxFormatError, IdxTruncatedError

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049


@dataclass
class Dataset:
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "dataset"

    def __post_init__(self):
        self.features = as_matrix(self.features)
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.n:
                raise ContractError(f"{self.labels.shape[0]} labels for {self.n} rows")
            if self.labels.size and self.labels.min() < 0:
                raise ContractError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, count: int) -> "Dataset":
        """First ``count`` rows."""
        labels = None if self.labels is None else self.labels[:count]
        return Dataset(self.features[:count], labels, f"{self.name}[:{count}]")

    def save(self, path) -> None:
        arrays = {"features": self.features}
        if self.labels is not None:
            arrays["labels"] = self.labels
        with open(path, "wb") as fh:
            np.savez(fh, name=np.array(self.name), **arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as z:
            labels = z["labels"] if "labels" in z.files else None
            name = str(z["name"]) if "name" in z.files else Path(path).stem
            return cls(z["features"], labels, name)


# -- IDX -----------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (EOFError, gzip.BadGzipFile) as exc:
            raise IdxTruncatedError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], bytes]:
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: file shorter than its {header_len}-byte header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: magic {found} (0x{found:08x}), expected {magic}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    size = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < size:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header declares {size}")
    return dims, payload[:size]


def read_idx_images(path) -> np.ndarray:
    """Unsigned-byte image tensor ``[n, rows, cols]`` as a uint8 array."""
    dims, payload = _parse_idx(_read_bytes(path), IMAGES_MAGIC, 3, path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx_labels(path) -> np.ndarray:
    dims, payload = _parse_idx(_read_bytes(path), LABELS_MAGIC, 1, path)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).astype(np.int64)


def load_idx(images_path, labels_path=None, name: str = "mnist") -> Dataset:
    """Load an IDX image file (and optional label file), flattened and scaled to [0, 1]."""
    images = read_idx_images(images_path)
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path)
        if labels.shape[0] != images.shape[0]:
            raise IdxConsistencyError(
                f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(features, labels, name)


def idx_bytes(array: np.ndarray) -> bytes:
    """Encode a uint8 array of rank 1 or 3 as IDX (labels or images)."""
    array = np.asarray(array)
    if array.ndim == 3:
        magic = IMAGES_MAGIC
    elif array.ndim == 1:
        magic = LABELS_MAGIC
    else:
        raise ContractError(f"IDX writer supports rank 1 or 3, got {array.ndim}")
    if array.size and (array.min() < 0 or array.max() > 255):
        raise ContractError("IDX unsigned-byte payload must lie in [0, 255]")
    head = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return head + array.astype(np.uint8).tobytes()


def write_idx(dataset: Dataset, images_path, labels_path=None, shape: Optional[tuple[int, int]] = None) -> None:
    """Write ``dataset`` as IDX. Features are assumed to be in [0, 1] and are
    quantized to bytes; ``shape`` gives (rows, cols), default ``(1, d)``."""
    rows, cols = shape or (1, dataset.d)
    if rows * cols != dataset.d:
        raise ContractError(f"shape {rows}x{cols} does not match d={dataset.d}")
    pixels = np.rint(np.clip(dataset.features, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(images_path).write_bytes(idx_bytes(pixels.reshape(dataset.n, rows, cols)))
    if labels_path is not None:
        if dataset.labels is None:
            raise ContractError("dataset has no labels to write")
        Path(labels_path).write_bytes(idx_bytes(dataset.labels.astype(np.uint8)))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(root, split: str = "train") -> tuple[Path, Path]:
    """Locate MNIST files under ``root``, accepting plain or ``.gz`` names."""
    root = Path(root)
    found = []
    for stem in MNIST_FILES[split]:
        for cand in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx"),
                     root / "mnist" / stem, root / "mnist" / f"{stem}.gz"):
            if cand.exists():
                found.append(cand)
                break
        else:
            raise FileNotFoundError(f"no {stem}[.gz] under {root}")
    return found[0], found[1]


# -- synthetic -----------------------------------------------------------------

def _box_muller(rng: np.random.Generator, count: int) -> np.ndarray:
    half = (count + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1]
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:count]


def make_blobs(n_per_cluster: Sequence[int], centers, sigma: float, seed: int = 0,
               name: str = "blobs") -> Dataset:
    """Isotropic Gaussian samples around each center, labelled by center index.

    Normals come from Box-Muller on a Philox (counter-based) stream so the
    output depends only on ``seed``.
    """
    centers = as_matrix(centers)
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    if len(n_per_cluster) != centers.shape[0]:
        raise ContractError(f"{len(n_per_cluster)} cluster sizes for {centers.shape[0]} centers")
    rng = np.random.Generator(np.random.Philox(seed))
    counts = [int(c) for c in n_per_cluster]
    total, d = sum(counts), centers.shape[1]
    noise = _box_muller(rng, total * d).reshape(total, d)
    labels = np.repeat(np.arange(len(counts)), counts)
    return Dataset(centers[labels] + sigma * noise, labels, name)


def blob_centers(k: int, d: int, separation: float, seed: int = 0) -> np.ndarray:
    """``k`` random centers in ``d`` dims, rescaled so the closest pair is
    ``separation`` apart."""
    rng = np.random.Generator(np.random.Philox(seed + 7919))
    c = _box_muller(rng, k * d).reshape(k, d)
    if k > 1:
        dist = np.sqrt(((c[:, None] - c[None]) ** 2).sum(-1))
        dist[np.diag_indices(k)] = np.inf
        c *= separation / dist.min()
    return c


# -- batching ------------------------------------------------------------------

def batch_iter(dataset, m: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled row indices split into ``n // m`` full batches; the remainder is dropped.

    ``dataset`` may be a :class:`Dataset` or a row count.
    """
    n = dataset.n if isinstance(dataset, Dataset) else int(dataset)
    if m < 1 or m > n:
        raise ContractError(f"batch size must satisfy 1 <= m <= n, got m={m}, n={n}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[j * m:(j + 1) * m] for j in range(n // m)]
