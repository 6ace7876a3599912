"""Dataset loading (IDX, CIFAR binary), seeded batching, holdout splits and the
adversarial-dataset container."""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "DOMAINS",
    "Dataset",
    "Batch",
    "DataFormatError",
    "BadMagicError",
    "TruncatedError",
    "CountMismatchError",
    "load_idx",
    "load_cifar_binary",
    "batch_iter",
    "batch_indices",
    "split",
    "subset",
    "write_dataset",
    "read_dataset",
]

DOMAINS = ("clean", "FGSM", "PGD", "R+FGSM", "MIM")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


class BadMagicError(DataFormatError):
    pass


class TruncatedError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


def _check_images(images: np.ndarray, what: str) -> None:
    if images.ndim != 4:
        raise ValueError(f"{what}: images must be [N, C, H, W], got {images.shape}")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValueError(f"{what}: pixel values outside [0, 1]")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    K: int
    domain: str = "clean"

    def __post_init__(self):
        _check_images(self.images, "Dataset")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"labels {self.labels.shape} do not match {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise ValueError(f"labels outside [0, {self.K})")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray
    domain_labels: np.ndarray

    def __post_init__(self):
        _check_images(self.images, "Batch")
        n = self.images.shape[0]
        if self.labels.shape != (n,) or self.domain_labels.shape != (n,):
            raise ValueError("batch labels / domain labels do not match image count")

    def __len__(self):
        return self.images.shape[0]


def _open(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, magic: int, ndims: int, path) -> tuple[int, ...]:
    if len(raw) < 4 + 4 * ndims:
        raise TruncatedError(f"{path}: file too short for IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", raw[4:4 + 4 * ndims])


def load_idx(images_path, labels_path, K: int = 10) -> Dataset:
    """Read an IDX image/label pair (raw or gzip); pixels scaled to [0, 1]."""
    img_raw = _open(images_path)
    lab_raw = _open(labels_path)
    n, rows, cols = _idx_header(img_raw, IDX_IMAGES_MAGIC, 3, images_path)
    (m,) = _idx_header(lab_raw, IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise CountMismatchError(f"{n} images but {m} labels")
    body = img_raw[16:]
    if len(body) < n * rows * cols:
        raise TruncatedError(f"{images_path}: payload holds {len(body)} of {n * rows * cols} bytes")
    if len(lab_raw) - 8 < m:
        raise TruncatedError(f"{labels_path}: payload holds {len(lab_raw) - 8} of {m} labels")
    pixels = np.frombuffer(body, dtype=np.uint8, count=n * rows * cols)
    images = (pixels.astype(np.float32) / np.float32(255)).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab_raw[8:], dtype=np.uint8, count=m).astype(np.int64)
    return Dataset(images, labels, K)


_CIFAR_RECORD = {"cifar10": 3073, "cifar100": 3074}
_CIFAR_K = {"cifar10": 10, "cifar100": 100}


def load_cifar_binary(paths: Sequence, variant: str = "cifar10") -> Dataset:
    if variant not in _CIFAR_RECORD:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    rec = _CIFAR_RECORD[variant]
    chunks = []
    for p in paths:
        raw = _open(p)
        if len(raw) % rec:
            raise TruncatedError(f"{p}: length {len(raw)} is not a multiple of the {rec}-byte record")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec))
    table = np.concatenate(chunks) if chunks else np.zeros((0, rec), np.uint8)
    # cifar100 records are coarse label, fine label, pixels; keep the fine label
    labels = table[:, rec - 3073].astype(np.int64)
    images = (table[:, rec - 3072:].astype(np.float32) / np.float32(255)).reshape(-1, 3, 32, 32)
    return Dataset(images, labels, _CIFAR_K[variant])


def batch_indices(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> list[np.ndarray]:
    """Row indices of each batch for a permutation fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def batch_iter(ds: Dataset, batch_size: int, seed: int, epoch: int, shuffle: bool = True) -> Iterator[Batch]:
    """Batches over a permutation fixed by ``(seed, epoch)``; the final short batch is kept."""
    d = 0.0 if ds.domain == "clean" else 1.0
    for idx in batch_indices(len(ds), batch_size, seed, epoch, shuffle):
        yield Batch(ds.images[idx], ds.labels[idx], np.full(len(idx), d, dtype=np.float32))


def split(ds: Dataset, fraction: float, seed: int, stratified: bool = True) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint split; ``fraction`` of the rows go to the first part.

    Stratified mode allocates ``round(fraction * N)`` rows across classes by
    largest remainder, so every class is within one sample of its exact share.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    first, second = split_indices(ds.labels, ds.K, fraction, seed, stratified)
    if len(first) == 0 or len(second) == 0:
        raise ValueError(f"degenerate split of {len(ds)} rows at fraction {fraction}")
    return ds.take(first), ds.take(second)


def split_indices(labels: np.ndarray, K: int, fraction: float, seed: int, stratified: bool = True):
    rng = np.random.default_rng(seed)
    n = len(labels)
    target = int(round(fraction * n))
    if not stratified:
        order = rng.permutation(n)
        return np.sort(order[:target]), np.sort(order[target:])
    counts = np.bincount(labels, minlength=K)
    exact = fraction * counts
    alloc = np.floor(exact).astype(np.int64)
    short = target - alloc.sum()
    # stable sort keeps lower class indices first among equal remainders
    for k in np.argsort(-(exact - alloc), kind="stable")[:short]:
        alloc[k] += 1
    first, second = [], []
    for k in range(K):
        members = np.flatnonzero(labels == k)
        members = members[rng.permutation(len(members))]
        first.append(members[: alloc[k]])
        second.append(members[alloc[k]:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Stratified row cap used for desk-scale runs; returns ``ds`` if already small enough."""
    if n >= len(ds):
        return ds
    idx, _ = split_indices(ds.labels, ds.K, n / len(ds), seed)
    return ds.take(idx)


# adversarial dataset container

_DATA_MAGIC = b"A4ADATA1"


def write_dataset(path, ds: Dataset, attack: dict | None = None) -> None:
    """Write ``ds`` as an A4ADATA1 file.

    Layout, little-endian: magic; u64 length + UTF-8 domain tag; u64 length +
    UTF-8 JSON echo of the attack config; u64 K, N, C, H, W; N int64 labels;
    N*C*H*W f32 pixels.
    """
    tag = ds.domain.encode("utf-8")
    echo = json.dumps(attack or {}, sort_keys=True).encode("utf-8")
    n, c, h, w = ds.images.shape
    blob = bytearray(_DATA_MAGIC)
    blob += struct.pack("<Q", len(tag)) + tag
    blob += struct.pack("<Q", len(echo)) + echo
    blob += struct.pack("<5Q", ds.K, n, c, h, w)
    blob += np.ascontiguousarray(ds.labels, dtype="<i8").tobytes()
    blob += np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_dataset(path) -> tuple[Dataset, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _DATA_MAGIC:
        raise BadMagicError(f"{path}: not an A4ADATA1 file")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedError(f"{path}: truncated")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (tlen,) = struct.unpack("<Q", take(8))
    domain = take(tlen).decode("utf-8")
    (elen,) = struct.unpack("<Q", take(8))
    attack = json.loads(take(elen).decode("utf-8"))
    K, n, c, h, w = struct.unpack("<5Q", take(40))
    labels = np.frombuffer(take(8 * n), dtype="<i8").astype(np.int64)
    images = np.frombuffer(take(4 * n * c * h * w), dtype="<f4").astype(np.float32).reshape(n, c, h, w)
    if pos != len(raw):
        raise DataFormatError(f"{path}: trailing bytes")
    return Dataset(images, labels, int(K), domain), attack
