"""Datasets: IDX containers, the synthetic Gaussian-class generator, splits.

Pixel bytes are divided by 256, so every stored value is ``k / 256`` and the
write path (``round(x * 256)``) inverts the read path exactly.
"""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PIXEL_SCALE = 256.0
DEFAULT_ROOT_ENV = "MMDGM_DATA"

# raw file names of the standard distribution, plain or gzipped
RAW_MNIST = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
# deterministic desk-scale subsets: (source file set, first index, count)
MNIST_SUBSETS = {
    "train": ("train", 0, 1000),
    "valid": ("train", 50000, 1000),
    "test": ("test", 0, 2000),
}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None
    side: int | None = None
    n_classes: int | None = None
    name: str = ""

    def __post_init__(self):
        x = np.array(self.images, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"images must be (N, D), got {x.shape}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        x.flags.writeable = False
        object.__setattr__(self, "images", x)
        if self.labels is not None:
            y = np.array(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise ValueError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} images")
            M = self.n_classes if self.n_classes is not None else (int(y.max()) + 1 if y.size else 0)
            if y.size and (y.min() < 0 or y.max() >= M):
                raise ValueError(f"labels out of range [0, {M})")
            y.flags.writeable = False
            object.__setattr__(self, "labels", y)
            object.__setattr__(self, "n_classes", M)
        if self.side is not None and self.side * self.side != x.shape[1]:
            raise ValueError(f"side {self.side} does not match D={x.shape[1]}")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                       self.side, self.n_classes, name or self.name)


@dataclass(frozen=True)
class SslSplit:
    labeled_idx: list
    unlabeled_idx: list
    valid_idx: list
    seed: int


# -- IDX ------------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(blob: bytes, path, magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 + 4 * n_dims
    if len(blob) < need:
        raise IdxFormatError(f"{path}: header truncated at byte {len(blob)} (need {need})")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x} at byte 0, expected 0x{magic:08x}")
    return struct.unpack(f">{n_dims}I", blob[4:need])


def _payload(blob: bytes, path, offset: int, count: int) -> np.ndarray:
    if len(blob) < offset + count:
        raise IdxFormatError(f"{path}: payload truncated at byte {len(blob)}, "
                             f"expected {offset + count} bytes")
    if len(blob) > offset + count:
        raise IdxFormatError(f"{path}: {len(blob) - offset - count} trailing bytes after "
                             f"byte {offset + count}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset)


def read_idx_image_bytes(path) -> tuple[np.ndarray, int, int]:
    """Raw bytes as (N, rows*cols) uint8, plus rows and cols."""
    blob = _read_bytes(path)
    n, rows, cols = _header(blob, path, IMAGE_MAGIC, 3)
    raw = _payload(blob, path, 16, n * rows * cols)
    return raw.reshape(n, rows * cols).copy(), rows, cols


def load_idx_images(path) -> np.ndarray:
    """(N, rows*cols) float array of byte / 256."""
    raw, _, _ = read_idx_image_bytes(path)
    return raw / PIXEL_SCALE


def load_idx_labels(path, n_classes: int | None = 10) -> np.ndarray:
    blob = _read_bytes(path)
    (n,) = _header(blob, path, LABEL_MAGIC, 1)
    y = _payload(blob, path, 8, n).astype(np.int64)
    if n_classes is not None and y.size and y.max() >= n_classes:
        bad = int(np.argmax(y >= n_classes))
        raise IdxFormatError(f"{path}: label {y[bad]} >= {n_classes} at byte {8 + bad}")
    return y


def _write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)


def to_bytes(images) -> np.ndarray:
    x = np.asarray(images)
    if x.dtype == np.uint8:
        return x
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * PIXEL_SCALE), 0, 255).astype(np.uint8)


def write_idx_images(path, images, rows: int | None = None, cols: int | None = None) -> None:
    """Write (N, D) images; floats are stored as ``round(x * 256)`` clipped to a byte."""
    raw = to_bytes(images)
    n, d = raw.shape
    if rows is None:
        rows = cols = int(round(np.sqrt(d)))
    if cols is None:
        cols = d // rows
    if rows * cols != d:
        raise ValueError(f"cannot lay out D={d} as {rows}x{cols}")
    _write_bytes(path, struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + raw.tobytes())


def write_idx_labels(path, labels) -> None:
    y = np.asarray(labels)
    if y.size and (y.min() < 0 or y.max() > 255):
        raise ValueError("labels must fit in a byte")
    _write_bytes(path, struct.pack(">II", LABEL_MAGIC, y.size) + y.astype(np.uint8).tobytes())


def pair(images: np.ndarray, labels: np.ndarray | None, side: int | None = None,
         n_classes: int | None = 10, name: str = "") -> Dataset:
    if labels is not None and len(labels) != len(images):
        raise ValueError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return Dataset(images, labels, side, n_classes, name)


# -- cache --------------------------------------------------------------------------------

def default_root() -> Path:
    return Path(os.environ.get(DEFAULT_ROOT_ENV, Path.home() / ".cache" / "mmdgm"))


def _find(directory: Path, stem: str) -> Path | None:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    return None


def load_dataset(name: str, root=None, n_classes: int | None = 10) -> Dataset:
    """Load ``<root>/<name>/{images,labels}.idx`` (either may be gzipped).

    ``name`` may also be a directory path holding the two files.
    """
    direct = Path(name)
    d = direct if direct.is_dir() else Path(root or default_root()) / name
    img = _find(d, "images.idx")
    if img is None:
        raise FileNotFoundError(f"no images.idx under {d}")
    raw, rows, cols = read_idx_image_bytes(img)
    lab = _find(d, "labels.idx")
    y = load_idx_labels(lab, n_classes) if lab else None
    return pair(raw / PIXEL_SCALE, y, rows if rows == cols else None, n_classes, direct.name)


def save_dataset(ds: Dataset, name: str, root=None) -> Path:
    d = Path(root or default_root()) / name
    side = ds.side
    write_idx_images(d / "images.idx", ds.images, side, side)
    if ds.labels is not None:
        write_idx_labels(d / "labels.idx", ds.labels)
    return d


def pool_bytes(raw: np.ndarray, side: int, out_side: int) -> np.ndarray:
    """Average-pool square byte images to ``out_side``, center-cropping the remainder."""
    k = side // out_side
    crop = (side - k * out_side) // 2
    imgs = raw.reshape(-1, side, side)[:, crop:crop + k * out_side, crop:crop + k * out_side]
    pooled = imgs.reshape(-1, out_side, k, out_side, k).astype(np.float64).mean(axis=(2, 4))
    return np.rint(pooled).astype(np.uint8).reshape(len(raw), -1)


def prepare_mnist_subsets(raw_dir, root=None) -> list[Path]:
    """Build ``mnist-1k`` and ``mnist-8x8`` (plus ``.valid`` / ``.test``) from the
    standard MNIST files in ``raw_dir``."""
    raw_dir = Path(raw_dir)
    sources = {}
    for key, (img_stem, lab_stem) in RAW_MNIST.items():
        img, lab = _find(raw_dir, img_stem), _find(raw_dir, lab_stem)
        if img is None or lab is None:
            raise FileNotFoundError(f"missing {img_stem} / {lab_stem} under {raw_dir}")
        raw, rows, cols = read_idx_image_bytes(img)
        sources[key] = (raw, load_idx_labels(lab), rows)
    out = {}
    for split, (src, start, count) in MNIST_SUBSETS.items():
        raw, y, side = sources[src]
        if start + count > len(raw):
            raise ValueError(f"{src} set too small for the {split} subset")
        out[split] = (raw[start:start + count], y[start:start + count])
    return _write_subsets(out, side, root)


def _write_subsets(splits: dict, side: int, root) -> list[Path]:
    written = []
    for split, (imgs, y) in splits.items():
        suffix = "" if split == "train" else f".{split}"
        for name, im, s in ((f"mnist-1k{suffix}", imgs, side),
                            (f"mnist-8x8{suffix}", pool_bytes(imgs, side, 8), 8)):
            d = Path(root or default_root()) / name
            write_idx_images(d / "images.idx", im, s, s)
            write_idx_labels(d / "labels.idx", y)
            written.append(d)
    return written


def prepare_mnist_from_pool(csv_path, root=None, seed: int = 0) -> list[Path]:
    """Build the same subsets from a pool of 28x28 digits stored as CSV rows of
    784 pixel bytes followed by the label (plain or gzipped).

    Each class is shuffled with ``seed`` and dealt out in equal shares to the
    train (1000), valid (1000) and test (2000) subsets, so the pool needs at
    least 400 images per class.
    """
    table = np.loadtxt(csv_path, delimiter=",", ndmin=2)
    if table.shape[1] != 785:
        raise ValueError(f"{csv_path}: expected 785 columns, got {table.shape[1]}")
    pix = table[:, :-1]
    if np.any(pix < 0) or np.any(pix > 255) or np.any(pix != np.round(pix)):
        raise ValueError(f"{csv_path}: pixels must be integers in [0, 255]")
    raw = pix.astype(np.uint8)
    y = table[:, -1].astype(np.int64)
    counts = {split: count for split, (_, _, count) in MNIST_SUBSETS.items()}
    classes = np.unique(y)
    rng = np.random.default_rng(seed)
    picks = {split: [] for split in counts}
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        start = 0
        for split, count in counts.items():
            share = count // len(classes)
            if start + share > len(idx):
                raise ValueError(f"class {c} has only {len(idx)} images in the pool")
            picks[split].append(idx[start:start + share])
            start += share
    splits = {}
    for split, parts in picks.items():
        sel = rng.permutation(np.concatenate(parts))
        splits[split] = (raw[sel], y[sel])
    return _write_subsets(splits, 28, root)


# -- generators and transforms -----------------------------------------------------

def synth_gaussian_classes(M: int, per_class: int, D: int = 2, spread: float = 0.1,
                           seed: int = 0) -> Dataset:
    """Class ``y`` scattered around ``2 * (cos 2 pi y/M, sin 2 pi y/M)``.

    For ``D > 2`` the circle lives in a seeded random 2-plane of R^D. All values
    are then mapped affinely (one global offset and scale) into [0, 1].
    """
    if M < 2:
        raise ValueError("need at least two classes")
    if D < 2:
        raise ValueError("D must be >= 2")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(M) / M
    centers2 = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if D == 2:
        centers = centers2
    else:
        basis, _ = np.linalg.qr(rng.standard_normal((D, 2)))
        centers = centers2 @ basis.T
    y = np.repeat(np.arange(M), per_class)
    x = centers[y] + spread * rng.standard_normal((y.size, D))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    side = int(round(np.sqrt(D)))
    return Dataset(np.clip(x, 0.0, 1.0), y, side if side * side == D and D > 2 else None, M,
                   f"synth-M{M}-D{D}")


def make_ssl_split(ds: Dataset, n_labeled: int, n_valid: int, seed: int) -> SslSplit:
    """Validation rows first, then ``n_labeled / M`` labeled rows per class; the
    rest is unlabeled."""
    if ds.labels is None:
        raise ValueError("a split needs labels")
    M = ds.n_classes
    if n_labeled % M:
        raise ValueError(f"n_labeled={n_labeled} is not divisible by M={M}")
    if n_valid < 0 or n_valid > len(ds):
        raise ValueError("bad n_valid")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    valid, rest = perm[:n_valid], perm[n_valid:]
    per = n_labeled // M
    labeled = []
    for c in range(M):
        pool = rest[ds.labels[rest] == c]
        if pool.size < per:
            raise ValueError(f"class {c} has {pool.size} examples, need {per}")
        labeled.extend(rng.choice(pool, size=per, replace=False).tolist())
    labeled_set = set(labeled)
    unlabeled = [int(i) for i in rest if int(i) not in labeled_set]
    return SslSplit(sorted(int(i) for i in labeled), unlabeled, sorted(int(i) for i in valid),
                    seed)


def binarize(ds: Dataset, mode: str = "none", threshold: float = 0.5,
             seed: int | None = None) -> Dataset:
    if mode == "none":
        return ds
    if mode == "threshold":
        x = (ds.images >= threshold).astype(np.float64)
    elif mode == "stochastic":
        rng = np.random.default_rng(seed)
        x = (rng.random(ds.images.shape) < ds.images).astype(np.float64)
    else:
        raise ValueError(f"unknown binarize mode {mode!r}")
    return Dataset(x, ds.labels, ds.side, ds.n_classes, ds.name)
