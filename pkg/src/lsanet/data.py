"""MedMNIST-style archive ingestion and deterministic synthetic datasets."""
from __future__ import annotations

import ast
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

NPY_MAGIC = b"\x93NUMPY"
SPLITS = ("train", "val", "test")
SUPPORTED_DTYPES = {"|u1": np.uint8, "<u1": np.uint8, "|i1": np.int8, "<i4": np.int32, "<i8": np.int64,
                    "<u2": np.uint16, "<f4": np.float32, "<f8": np.float64}


class ArchiveError(ValueError):
    """Raised when a dataset archive is missing members or holds malformed arrays."""


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.labels.size == 0:
            raise ValueError(f"{self.split} split is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"{self.split} labels fall outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 64
    seed: int = 0
    drop_last: bool = False


# ----------------------------------------------------------------------
# NPY format


def write_npy(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    descr = np.lib.format.dtype_to_descr(arr.dtype)
    header = repr({"descr": descr, "fortran_order": False, "shape": tuple(arr.shape)})
    # pad so the payload starts on a 64-byte boundary, header ends in newline
    base = len(NPY_MAGIC) + 2 + 2
    pad = (-(base + len(header) + 1)) % 64
    header = (header + " " * pad + "\n").encode("latin1")
    return NPY_MAGIC + bytes([1, 0]) + struct.pack("<H", len(header)) + header + arr.tobytes()


def read_npy(raw: bytes, member: str = "<array>") -> np.ndarray:
    if raw[:6] != NPY_MAGIC:
        raise ArchiveError(f"{member}: missing NPY magic")
    major = raw[6]
    if major == 1:
        (hlen,), start = struct.unpack_from("<H", raw, 8), 10
    elif major in (2, 3):
        (hlen,), start = struct.unpack_from("<I", raw, 8), 12
    else:
        raise ArchiveError(f"{member}: unsupported NPY version {major}.{raw[7]}")
    try:
        header = ast.literal_eval(raw[start:start + hlen].decode("latin1"))
        descr, fortran, shape = header["descr"], header["fortran_order"], tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise ArchiveError(f"{member}: cannot parse NPY header ({exc})") from exc
    if fortran:
        raise ArchiveError(f"{member}: Fortran-ordered arrays are not supported")
    if descr not in SUPPORTED_DTYPES:
        raise ArchiveError(f"{member}: unsupported dtype {descr!r}")
    dtype = np.dtype(descr)
    count = int(np.prod(shape)) if shape else 1
    payload = raw[start + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise ArchiveError(f"{member}: payload holds {len(payload)} bytes, header implies {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype, count=count).reshape(shape).astype(SUPPORTED_DTYPES[descr])


def write_archive(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays as ``<name>.npy`` members of a zip archive."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            zf.writestr(f"{name}.npy", write_npy(arr))


def read_archive(path: str | Path, names) -> dict[str, np.ndarray]:
    out = {}
    with zipfile.ZipFile(path) as zf:
        members = set(zf.namelist())
        for name in names:
            member = f"{name}.npy" if f"{name}.npy" in members else name
            if member not in members:
                raise ArchiveError(f"{path}: missing member {name}")
            out[name] = read_npy(zf.read(member), name)
    return out


def _images_to_chw(images: np.ndarray, member: str) -> np.ndarray:
    if images.dtype != np.uint8:
        raise ArchiveError(f"{member}: images must be uint8, got {images.dtype}")
    if images.ndim == 3:
        images = images[:, None, :, :]
    elif images.ndim == 4:
        images = images.transpose(0, 3, 1, 2)
    else:
        raise ArchiveError(f"{member}: expected [N, H, W] or [N, H, W, C], got {images.shape}")
    return images.astype(np.float64) / 255.0


def load_medmnist(path: str | Path) -> dict[str, Dataset]:
    """Load train/val/test splits from a MedMNIST ``.npz`` archive."""
    names = [f"{s}_{kind}" for s in SPLITS for kind in ("images", "labels")]
    arrays = read_archive(path, names)
    labels = {}
    for s in SPLITS:
        lab = arrays[f"{s}_labels"]
        if lab.ndim == 2 and lab.shape[1] != 1:
            raise ArchiveError(f"{s}_labels: multi-label arrays are not supported ({lab.shape})")
        labels[s] = lab.reshape(-1).astype(np.int64)
    num_classes = int(max(lab.max() for lab in labels.values())) + 1
    return {
        s: Dataset(_images_to_chw(arrays[f"{s}_images"], f"{s}_images"), labels[s], num_classes, s)
        for s in SPLITS
    }


def to_uint8_archive(path: str | Path, splits: dict[str, Dataset]) -> None:
    """Inverse of :func:`load_medmnist` for datasets whose pixels are multiples of 1/255."""
    arrays = {}
    for s, ds in splits.items():
        img = np.rint(ds.images * 255.0).astype(np.uint8)
        img = img[:, 0] if img.shape[1] == 1 else img.transpose(0, 2, 3, 1)
        arrays[f"{s}_images"] = img
        arrays[f"{s}_labels"] = ds.labels.astype(np.uint8).reshape(-1, 1)
    write_archive(path, arrays)


# ----------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticDesign:
    """Knobs of the synthetic task.

    Each class owns a quadrant (where a bright square is stamped) and a
    grating orientation.  The square is a strong but spatial cue: global
    average pooling of shallow features cannot see where it sits.  The faint
    grating is a local cue that shallow layers can pick up only when trained
    to.  ``swap`` is the chance that the square lands in a random quadrant
    instead of the class's own, which caps what the spatial cue alone buys.
    """

    texture: float = 0.04
    period: float = 4.0
    blob: float = 0.4
    blob_size: int = 6
    jitter: int = 3
    swap: float = 0.3
    background: float = 0.2

    @classmethod
    def templates(cls) -> "SyntheticDesign":
        """Fixed per-class images (square only, no jitter or swaps): separable when noise-free."""
        return cls(texture=0.0, jitter=0, swap=0.0)


def _quadrant_centres(size: int) -> list[tuple[int, int]]:
    lo, hi = size // 4, size - size // 4 - 1
    return [(lo, lo), (lo, hi), (hi, lo), (hi, hi)]


def synthetic_dataset(
    num_classes: int = 4,
    n_per_class: int = 64,
    size: int = 28,
    noise_sigma: float = 0.1,
    seed: int = 0,
    channels: int = 1,
    n_test_per_class: int | None = None,
    design: SyntheticDesign = SyntheticDesign(),
) -> dict[str, Dataset]:
    """Gratings plus quadrant squares plus Gaussian noise, clipped to [0, 1].

    Classes beyond four reuse quadrants cyclically and are told apart by
    orientation only.
    """
    if num_classes < 2:
        raise ValueError("synthetic data needs at least two classes")
    if size < 8 or channels < 1 or n_per_class < 1:
        raise ValueError(f"degenerate synthetic extents: size={size}, channels={channels}, n={n_per_class}")
    half = design.blob_size // 2
    centres = _quadrant_centres(size)
    if min(min(c) for c in centres) - design.jitter - half < 0 or \
            max(max(c) for c in centres) + design.jitter + half > size:
        raise ValueError(f"squares of size {design.blob_size} with jitter {design.jitter} do not fit in {size}")
    if not 0.0 <= design.swap <= 1.0:
        raise ValueError(f"swap probability must lie in [0, 1], got {design.swap}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    n_test = n_per_class if n_test_per_class is None else n_test_per_class
    out = {}
    for split, n in (("train", n_per_class), ("test", n_test)):
        labels = np.repeat(np.arange(num_classes), n)
        labels = labels[rng.permutation(labels.size)]
        imgs = np.full((labels.size, channels, size, size), design.background)
        for i, c in enumerate(labels):
            theta = np.pi * c / num_classes
            phase = rng.uniform(0, 2 * np.pi)
            if design.texture:
                wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / design.period + phase)
                imgs[i] += design.texture * wave
            if design.blob:
                spot = c if rng.uniform() >= design.swap else rng.integers(num_classes)
                cy, cx = centres[spot % len(centres)]
                cy += rng.integers(-design.jitter, design.jitter + 1)
                cx += rng.integers(-design.jitter, design.jitter + 1)
                imgs[i, :, cy - half:cy + half, cx - half:cx + half] += design.blob
        imgs += noise_sigma * rng.standard_normal(imgs.shape)
        out[split] = Dataset(np.clip(imgs, 0.0, 1.0), labels.astype(np.int64), num_classes, split)
    return out


def batches(dataset: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches; the permutation depends only on (plan.seed, epoch)."""
    for idx in batch_indices(len(dataset), plan, epoch):
        yield dataset.images[idx], dataset.labels[idx]


def batch_indices(n: int, plan: BatchPlan, epoch: int = 0) -> list[np.ndarray]:
    if plan.batch_size < 1:
        raise ValueError(f"batch size must be at least 1, got {plan.batch_size}")
    order = np.random.default_rng([plan.seed, epoch]).permutation(n)
    out = [order[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]
    if plan.drop_last and out and len(out[-1]) < plan.batch_size:
        out.pop()
    return out
