"""Synthetic fixtures, IDX file I/O and train/attack/eval splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# IDX element type codes
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v.str.replace(">", "=")).kind + str(v.itemsize): k
              for k, v in _IDX_TYPES.items()}


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self):
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


def gen_blobs(n_classes: int, n_per_class: int, n_features: int, spread: float,
              seed: int, center_low: float = 0.2, center_high: float = 0.8) -> Dataset:
    """Isotropic Gaussian clusters clipped to the unit cube.

    Centers are drawn uniformly in ``[center_low, center_high]^n``. Samples
    are grouped by class in label order.
    """
    if n_classes < 2:
        raise UsageError("need at least two classes")
    if spread <= 0:
        raise UsageError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(center_low, center_high, size=(n_classes, n_features))
    noise = rng.standard_normal((n_classes, n_per_class, n_features))
    X = np.clip(centers[:, None, :] + spread * noise, 0.0, 1.0).reshape(-1, n_features)
    y = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(X, y, n_classes)


def gen_moons(n_per_class: int, noise: float, seed: int) -> Dataset:
    """Two interleaved half circles, rescaled into [0, 1]^2."""
    if noise < 0:
        raise UsageError("noise must be nonnegative")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, np.pi, size=(2, n_per_class))
    upper = np.stack([np.cos(t[0]), np.sin(t[0])], axis=1)
    lower = np.stack([1.0 - np.cos(t[1]), 0.5 - np.sin(t[1])], axis=1)
    X = np.vstack([upper, lower]) + noise * rng.standard_normal((2 * n_per_class, 2))
    # map x in [-1.5, 2.5], y in [-1, 1.5] into the unit square
    X = (X - np.array([-1.5, -1.0])) / np.array([4.0, 2.5])
    y = np.repeat([0, 1], n_per_class)
    return Dataset(np.clip(X, 0.0, 1.0), y, 2)


def read_idx(path) -> np.ndarray:
    """Read any IDX file into a native-endian array."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError("file shorter than the IDX magic number", len(data))
    zero, code, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or code not in _IDX_TYPES:
        raise FormatError(f"bad IDX magic 0x{(zero << 16) | (code << 8) | ndim:08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("truncated IDX dimension table", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = _IDX_TYPES[code]
    count = int(np.prod(dims)) if dims else 1
    need = header + count * dtype.itemsize
    if len(data) < need:
        raise FormatError(f"truncated IDX payload: need {need} bytes, have {len(data)}", len(data))
    if len(data) > need:
        raise FormatError("trailing bytes after IDX payload", need)
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    """Write an array as IDX, choosing the element type from its dtype."""
    arr = np.asarray(array)
    key = arr.dtype.kind + str(arr.dtype.itemsize)
    if key not in _IDX_CODES:
        raise UsageError(f"dtype {arr.dtype} has no IDX type code")
    code = _IDX_CODES[key]
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.astype(_IDX_TYPES[code]).tobytes())


def _magic(path) -> int:
    with open(path, "rb") as f:
        raw = f.read(4)
    if len(raw) < 4:
        raise FormatError("file shorter than the IDX magic number", len(raw))
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Load an MNIST-style image/label IDX pair, flattened and scaled by 1/255."""
    for p, want in ((images_path, IMAGES_MAGIC), (labels_path, LABELS_MAGIC)):
        got = _magic(p)
        if got != want:
            raise FormatError(f"{p}: magic 0x{got:08x}, expected 0x{want:08x}", 0)
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if y.size and y.max() >= n_classes:
        raise FormatError(f"label {y.max()} outside [0, {n_classes})", 8)
    return Dataset(X, y, n_classes)


@dataclass
class TaskData:
    """The three disjoint splits a run needs."""

    oracle_train: Dataset
    attacker_pool: Dataset
    eval: Dataset

    @property
    def n_features(self) -> int:
        return self.eval.X.shape[1]

    @property
    def n_classes(self) -> int:
        return self.eval.n_classes


def split_task(dataset: Dataset, seed: int, oracle_frac: float = 0.5,
               pool_frac: float = 0.2) -> TaskData:
    """Seeded split into oracle-training, attacker and evaluation parts."""
    if not (0 < oracle_frac and 0 < pool_frac and oracle_frac + pool_frac < 1):
        raise UsageError("fractions must be positive and sum to less than 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    a = int(round(oracle_frac * len(dataset)))
    b = a + int(round(pool_frac * len(dataset)))
    return TaskData(
        dataset.subset(np.sort(order[:a])),
        dataset.subset(np.sort(order[a:b])),
        dataset.subset(np.sort(order[b:])),
    )
