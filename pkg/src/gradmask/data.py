"""Dataset loading (MNIST IDX, CIFAR-10 binary), resizing, and synthetic images."""
from __future__ import annotations

import gzip
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "GRADMASK_DATA_ROOT"
IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def split(self, n_first: int, seed: int | None = None) -> tuple["Dataset", "Dataset"]:
        order = np.arange(len(self)) if seed is None else np.random.default_rng(seed).permutation(len(self))
        return self.subset(order[:n_first]), self.subset(order[n_first:])


# ---------------------------------------------------------------------------
# IDX (MNIST)
# ---------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expect_magic: int, what: str) -> np.ndarray:
    if len(raw) < 8:
        raise DataFormatError(f"{what}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise DataFormatError(f"{what}: bad magic {magic:#010x}, expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(f"{what}: truncated payload ({len(raw) - header} of {count} bytes)")
    if len(raw) - header > count:
        raise DataFormatError(f"{what}: {len(raw) - header - count} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_mnist(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Parse an MNIST image/label IDX pair (optionally gzipped); pixels scaled by 1/255."""
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labs = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if len(imgs) != len(labs):
        raise DataFormatError(f"{len(imgs)} images but {len(labs)} labels")
    return Dataset(imgs[:, None].astype(np.float64) / 255.0, labs.astype(np.int64), num_classes, "mnist")


def write_idx_images(path, images_u8: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images_u8.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------

def load_cifar10(paths) -> Dataset:
    """Read CIFAR-10 binary batches: records of 1 label byte + R, G, B 32x32 planes."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if not raw or len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    if not images:
        raise DataFormatError("no CIFAR-10 batch files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, "cifar10")


# ---------------------------------------------------------------------------
# resizing and synthetic data
# ---------------------------------------------------------------------------

def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(images: np.ndarray, size: tuple) -> np.ndarray:
    """Bilinear resize of (..., H, W) with corner-aligned sampling."""
    h_out, w_out = size
    if h_out < 1 or w_out < 1:
        raise ValueError("target size must be at least 1x1")
    images = np.asarray(images, dtype=np.float64)
    h_in, w_in = images.shape[-2:]
    y0, y1, fy = _axis_weights(h_in, h_out)
    x0, x1, fx = _axis_weights(w_in, w_out)
    rows = images[..., y0, :] * (1 - fy)[:, None] + images[..., y1, :] * fy[:, None]
    out = rows[..., x0] * (1 - fx) + rows[..., x1] * fx
    return out


def synth_dataset(n: int, classes: int = 4, shape: tuple = (1, 28, 28), seed: int = 0) -> Dataset:
    """Class-conditioned gratings plus a bright blob, deterministic in ``seed``.

    Class ``c`` fixes the grating orientation and frequency and the blob's
    home position; phase, blob jitter, contrast and pixel noise are random.
    Labels cycle through the classes, so ``n == classes`` gives one image each.
    """
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    c_dim, h, w = shape
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    labels = np.arange(n) % classes
    images = np.empty((n, c_dim, h, w))
    tints = 0.6 + 0.4 * rng.random((classes, c_dim))
    for i, c in enumerate(labels):
        theta = np.pi * c / classes
        freq = 2.0 + (c % 3)
        phase = rng.uniform(0, 2 * np.pi)
        grating = 0.5 + 0.5 * np.cos(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        ang = 2 * np.pi * c / classes
        cy = 0.5 + 0.28 * np.sin(ang) + rng.normal(0, 0.05)
        cx = 0.5 + 0.28 * np.cos(ang) + rng.normal(0, 0.05)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.08 ** 2))
        contrast = rng.uniform(0.5, 0.9)
        base = 0.1 + contrast * 0.6 * grating + 0.5 * blob
        for ch in range(c_dim):
            images[i, ch] = base * tints[c, ch] + rng.normal(0, 0.03, (h, w))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), classes, "synth")


def load_digits(size: int = 28, border: int = 4) -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits, upsampled MNIST-style.

    Each digit is resized to ``size - 2*border`` square and padded with a
    black border, mimicking MNIST's centred 20x20-in-28x28 layout.
    """
    from sklearn.datasets import load_digits as _sk_digits

    raw = _sk_digits()
    imgs = raw.images.astype(np.float64) / 16.0
    inner = size - 2 * border
    up = np.clip(resize_bilinear(imgs, (inner, inner)), 0.0, 1.0)
    out = np.zeros((len(imgs), 1, size, size))
    out[:, 0, border:border + inner, border:border + inner] = up
    # store on the 8-bit grid so quantization round-trips exactly
    out = np.rint(out * 255.0) / 255.0
    return Dataset(out, raw.target.astype(np.int64), 10, "digits")


# ---------------------------------------------------------------------------
# named datasets and image output
# ---------------------------------------------------------------------------

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def data_root(root=None) -> Path | None:
    root = root or os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def _find(root: Path, stem: str) -> Path | None:
    for cand in (root / stem, root / (stem + ".gz"), root / "mnist" / stem, root / "mnist" / (stem + ".gz")):
        if cand.exists():
            return cand
    return None


def mnist_available(root=None) -> bool:
    r = data_root(root)
    return bool(r) and all(_find(r, s) for pair in MNIST_FILES.values() for s in pair)


def load_named(name: str, train_size: int, test_size: int, seed: int = 0, root=None,
               shape: tuple | None = None, classes: int = 10) -> tuple[Dataset, Dataset]:
    """(train, test) subsets of a named dataset: mnist, cifar10, digits or synth."""
    r = data_root(root)
    if name == "mnist":
        if not mnist_available(r):
            raise FileNotFoundError(f"MNIST IDX files not found under {r} (set {DATA_ROOT_ENV})")
        tr = load_mnist(*(_find(r, s) for s in MNIST_FILES["train"]))
        te = load_mnist(*(_find(r, s) for s in MNIST_FILES["test"]))
    elif name == "cifar10":
        base = r / "cifar-10-batches-bin" if r and (r / "cifar-10-batches-bin").exists() else r
        if base is None or not (base / "test_batch.bin").exists():
            raise FileNotFoundError(f"CIFAR-10 binary batches not found under {r} (set {DATA_ROOT_ENV})")
        tr = load_cifar10([base / f"data_batch_{i}.bin" for i in range(1, 6)])
        te = load_cifar10([base / "test_batch.bin"])
    elif name == "digits":
        full = load_digits()
        tr, te = full.split(len(full) - min(test_size, len(full) // 3), seed=seed)
    elif name == "synth":
        shp = tuple(shape) if shape else (1, 28, 28)
        tr = synth_dataset(train_size, classes, shp, seed)
        te = synth_dataset(test_size, classes, shp, seed + 7919)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    rng = np.random.default_rng(seed)
    if len(tr) > train_size:
        tr = tr.subset(np.sort(rng.choice(len(tr), train_size, replace=False)))
    if len(te) > test_size:
        te = te.subset(np.sort(rng.choice(len(te), test_size, replace=False)))
    return tr, te


def write_pnm(path, image_u8: np.ndarray) -> None:
    """Binary PGM for one channel, PPM for three; input is (C, H, W) or (H, W) uint8."""
    img = np.asarray(image_u8, dtype=np.uint8)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c == 1:
        payload = b"P5\n%d %d\n255\n" % (w, h) + img[0].tobytes()
    elif c == 3:
        payload = b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes()
    else:
        raise ValueError("pixmaps need 1 or 3 channels")
    Path(path).write_bytes(payload)


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise DataFormatError("not a binary PGM/PPM file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    body = raw[m.end():]
    if maxval != 255:
        raise DataFormatError("only 8-bit pixmaps are supported")
    if kind == b"P5":
        return np.frombuffer(body[:w * h], dtype=np.uint8).reshape(1, h, w)
    if kind == b"P6":
        return np.frombuffer(body[:w * h * 3], dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    raise DataFormatError(f"unsupported pixmap type {kind!r}")
