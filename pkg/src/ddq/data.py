"""Desk-scale datasets: synthetic blob images and MNIST-format IDX files."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])


def synthetic_blobs(n_train: int = 2000, n_test: int = 1000, classes: int = 10, size: int = 16,
                    blobs: int = 3, jitter: float = 1.2, noise: float = 0.35, seed: int = 0) -> Dataset:
    """Images made of a few Gaussian bumps whose layout identifies the class.

    Each class owns ``blobs`` prototype centres; samples jitter them,
    vary the bump amplitudes and add pixel noise.
    """
    rng = np.random.default_rng(seed)
    protos = rng.uniform(2.0, size - 3.0, size=(classes, blobs, 2))
    widths = rng.uniform(1.0, 2.2, size=(classes, blobs))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def render(labels):
        n = len(labels)
        centres = protos[labels] + rng.normal(0.0, jitter, size=(n, blobs, 2))
        amp = rng.uniform(0.6, 1.4, size=(n, blobs))
        dy = yy[None, None] - centres[..., 0, None, None]
        dx = xx[None, None] - centres[..., 1, None, None]
        w = widths[labels][..., None, None]
        img = (amp[..., None, None] * np.exp(-(dx ** 2 + dy ** 2) / (2 * w ** 2))).sum(axis=1)
        img += rng.normal(0.0, noise, size=img.shape)
        return img[:, None].astype(np.float64)

    y_train = rng.integers(0, classes, size=n_train)
    y_test = rng.integers(0, classes, size=n_test)
    return Dataset(render(y_train), y_train, render(y_test), y_test, classes)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped) into a numpy array."""
    path = Path(path)
    with _open(path) as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise DatasetError(f"{path} is not an IDX file")
        dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
        if head[2] not in dtypes:
            raise DatasetError(f"{path}: unknown IDX type code {head[2]:#x}")
        ndim = head[3]
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=dtypes[head[2]])
    if data.size != int(np.prod(dims)):
        raise DatasetError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    codes = {np.dtype("uint8"): 0x08, np.dtype("int8"): 0x09}
    if array.dtype not in codes:
        raise DatasetError(f"unsupported IDX dtype {array.dtype}")
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, codes[array.dtype], array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / name).exists():
            return root / name
    raise DatasetError(f"missing {stem} under {root}")


def mnist(root=None, n_train: int | None = None, n_test: int | None = None) -> Dataset:
    """MNIST-format IDX pair from ``root`` (default: $DDQ_DATA_DIR)."""
    root = Path(root or os.environ.get("DDQ_DATA_DIR", ""))
    if not root or not root.is_dir():
        raise DatasetError(f"dataset directory not found: {str(root) or '$DDQ_DATA_DIR unset'}")
    xs = read_idx(_find(root, "train-images-idx3-ubyte"))
    ys = read_idx(_find(root, "train-labels-idx1-ubyte"))
    xt = read_idx(_find(root, "t10k-images-idx3-ubyte"))
    yt = read_idx(_find(root, "t10k-labels-idx1-ubyte"))
    if len(xs) != len(ys) or len(xt) != len(yt):
        raise DatasetError("image and label counts differ")
    xs, ys = xs[:n_train], ys[:n_train]
    xt, yt = xt[:n_test], yt[:n_test]
    prep = lambda a: (a.astype(np.float64) / 255.0)[:, None]
    classes = int(max(ys.max(initial=0), yt.max(initial=0))) + 1
    return Dataset(prep(xs), ys.astype(np.int64), prep(xt), yt.astype(np.int64), classes)


def load(spec: dict) -> Dataset:
    """Build a dataset from a config mapping with a ``name`` key."""
    spec = dict(spec or {})
    name = spec.pop("name", "synthetic")
    if name == "synthetic":
        ds = synthetic_blobs(**spec)
    elif name == "mnist":
        ds = mnist(**spec)
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    if len(ds.x_train) == 0 or len(ds.x_test) == 0:
        raise DatasetError("dataset is empty")
    return ds
