"""MNIST in the IDX container, dynamic binarization and a synthetic toy set."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, RangeError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX type byte -> big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {v.str[1:]: k for k, v in IDX_TYPES.items()}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_COUNTS = {"train": 60000, "test": 10000}


@dataclass
class BimodalDataset:
    x: np.ndarray
    w: np.ndarray
    split: np.ndarray
    labels: np.ndarray
    x_kind: str = "bernoulli"
    w_kind: str = "categorical"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x) != len(self.w) or len(self.x) != len(self.split):
            raise ValueError("x, w and split must have the same number of items")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def x_dim(self) -> int:
        return self.x.shape[1]

    @property
    def w_dim(self) -> int:
        return self.w.shape[1]

    def subset(self, name: str) -> "BimodalDataset":
        mask = self.split == name
        return BimodalDataset(
            self.x[mask], self.w[mask], self.split[mask], self.labels[mask],
            self.x_kind, self.w_kind, dict(self.provenance, subset=name),
        )

    def take(self, n: int) -> "BimodalDataset":
        return BimodalDataset(
            self.x[:n], self.w[:n], self.split[:n], self.labels[:n],
            self.x_kind, self.w_kind, dict(self.provenance, take=n),
        )


# ------------------------------------------------------------------------ IDX


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("file shorter than the 4-byte magic", len(buf))
    zero, type_code, ndim = struct.unpack(">HBB", buf[:4])
    if zero != 0 or type_code not in IDX_TYPES or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("truncated dimension header", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    dtype = IDX_TYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - header < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes", len(buf))
    if len(buf) - header > expected:
        raise FormatError("trailing bytes after payload", header + expected)
    return np.frombuffer(buf, dtype=dtype, count=expected // dtype.itemsize, offset=header).reshape(dims)


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def idx_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder(">").str[1:] if arr.dtype.itemsize > 1 else arr.dtype.str[1:]
    if key not in _TYPE_CODES:
        raise TypeError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, _TYPE_CODES[key], arr.ndim)
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(arr.dtype.newbyteorder(">")).tobytes()


def write_idx(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(idx_bytes(arr))


def _read_magic(buf: bytes, magic: int, what: str) -> np.ndarray:
    if len(buf) >= 4 and int.from_bytes(buf[:4], "big") != magic:
        raise FormatError(f"{what}: expected magic 0x{magic:08x}, got 0x{int.from_bytes(buf[:4], 'big'):08x}", 0)
    return parse_idx(buf)


def load_mnist(image_file, label_file, expected_count: int | None = None) -> BimodalDataset:
    """Read an MNIST image/label pair; pixels scaled to [0, 1], labels one-hot."""
    images = _read_magic(Path(image_file).read_bytes(), IMAGE_MAGIC, "images")
    labels = _read_magic(Path(label_file).read_bytes(), LABEL_MAGIC, "labels")
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", 4)
    if expected_count is not None and len(images) != expected_count:
        raise FormatError(f"expected {expected_count} items, found {len(images)}", 4)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"label {labels[bad]} out of range", 8 + bad)
    n = len(images)
    x = images.reshape(n, -1).astype(np.float32) / np.float32(255.0)
    lab = labels.astype(np.int64)
    w = np.eye(10, dtype=np.float32)[lab]
    return BimodalDataset(
        x, w, np.full(n, "train", dtype="<U5"), lab,
        provenance={"source": "mnist", "images": str(image_file), "labels": str(label_file)},
    )


def mnist_images_to_idx(ds: BimodalDataset, side: int = 28) -> bytes:
    """Images of a dataset back to IDX bytes (gray values quantised to 1/255)."""
    pix = np.rint(ds.x * 255.0).astype(np.uint8)
    return idx_bytes(pix.reshape(len(ds), side, side))


def mnist_labels_to_idx(ds: BimodalDataset) -> bytes:
    return idx_bytes(ds.labels.astype(np.uint8))


def load_mnist_splits(data_dir, train_size: int = 50000) -> tuple[BimodalDataset, BimodalDataset]:
    """Return (train, test).

    The first ``train_size`` items of the official training file form the
    training split and the remainder is marked ``"valid"``; the official test
    file is the test split.
    """
    data_dir = Path(data_dir)
    img, lab = MNIST_FILES["train"]
    full = load_mnist(data_dir / img, data_dir / lab, MNIST_COUNTS["train"])
    if not 1 <= train_size <= len(full):
        raise ValueError(f"train_size must be in [1, {len(full)}]")
    full.split[train_size:] = "valid"
    full.provenance["train_size"] = train_size
    img, lab = MNIST_FILES["test"]
    test = load_mnist(data_dir / img, data_dir / lab, MNIST_COUNTS["test"])
    test.split[:] = "test"
    return full.subset("train"), test


# -------------------------------------------------------------- binarization


def binarize(batch: np.ndarray, seed) -> np.ndarray:
    """Sample each pixel as 1 with probability equal to its gray value."""
    batch = np.asarray(batch)
    if batch.size and (batch.min() < 0 or batch.max() > 1):
        raise RangeError("gray values must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return (rng.random(batch.shape) < batch).astype(np.float32)


def epoch_seed(seed: int, epoch: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, stream])


# ----------------------------------------------------------------------- toy


@dataclass(frozen=True)
class ToySpec:
    n_clusters: int = 2
    x_dim: int = 1
    n_items: int = 2000
    seed: int = 0
    spread: float = 4.0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValueError("toy dataset needs at least 2 clusters")


def make_toy(spec: ToySpec) -> BimodalDataset:
    """Cluster-conditioned Gaussian ``x`` (variance 1) with one-hot ``w``.

    Ground truth (cluster means, emission variance) is kept in ``provenance``.
    """
    rng = np.random.default_rng([spec.seed, 7])
    means = rng.normal(0.0, spec.spread, size=(spec.n_clusters, spec.x_dim))
    labels = rng.integers(0, spec.n_clusters, size=spec.n_items)
    x = (means[labels] + rng.standard_normal((spec.n_items, spec.x_dim))).astype(np.float32)
    w = np.eye(spec.n_clusters, dtype=np.float32)[labels]
    n_test = int(round(spec.n_items * spec.test_fraction))
    split = np.full(spec.n_items, "train", dtype="<U5")
    if n_test:
        split[-n_test:] = "test"
    return BimodalDataset(
        x, w, split, labels, x_kind="fixed_gaussian", w_kind="categorical",
        provenance={"source": "toy", "spec": spec.__dict__.copy(), "cluster_means": means,
                    "emission_var": 1.0},
    )
