"""Dataset parsing, image export and JSON-lines persistence.

All images are float64 arrays of shape (C, H, W) on the 0-255 scale.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np


class ParseError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None, path=None):
        where = f" at offset {offset}" if offset is not None else ""
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}{message}{where}")
        self.offset = offset
        self.path = path


class ImageFormatError(ValueError):
    """Unreadable or unsupported image file."""


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int = 10
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside the class range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> LabeledImageSet:
        return LabeledImageSet(self.images[index], self.labels[index], self.split,
                               self.n_classes, dict(self.provenance))


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"corrupt gzip stream ({exc})", path=path) from exc
    return raw


def parse_idx(raw: bytes, path=None) -> np.ndarray:
    """Decode an IDX buffer (unsigned-byte payload) into an integer array."""
    if len(raw) < 4:
        raise ParseError("file shorter than the IDX magic", offset=len(raw), path=path)
    zero, dtype, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype != 0x08 or ndim not in (1, 3):
        raise ParseError(f"bad magic 0x{raw[:4].hex()}", offset=0, path=path)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError("truncated dimension header", offset=len(raw), path=path)
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    need = head + int(np.prod(dims))
    if len(raw) < need:
        raise ParseError(f"truncated payload: need {need} bytes, have {len(raw)}",
                         offset=len(raw), path=path)
    if len(raw) > need:
        raise ParseError(f"trailing bytes after payload ({len(raw) - need})", offset=need, path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=need - head, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", n_classes: int = 10) -> LabeledImageSet:
    """Read an IDX image file (magic 0x00000803) and label file (0x00000801)."""
    images = parse_idx(_read(images_path), images_path)
    labels = parse_idx(_read(labels_path), labels_path)
    if images.ndim != 3:
        raise ParseError("image file must have magic 0x00000803", offset=0, path=images_path)
    if labels.ndim != 1:
        raise ParseError("label file must have magic 0x00000801", offset=0, path=labels_path)
    if len(images) != len(labels):
        raise ParseError(f"count mismatch: {len(images)} images vs {len(labels)} labels",
                         offset=4, path=labels_path)
    if len(labels) and labels.max() >= n_classes:
        raise ParseError(f"label {labels.max()} >= class count {n_classes}", path=labels_path)
    return LabeledImageSet(images[:, None].astype(np.float64), labels, split, n_classes,
                           {"format": "idx", "images": str(images_path), "labels": str(labels_path)})


def write_idx(path, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    head = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    Path(path).write_bytes(head + array.tobytes())


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(path, split: str = "train") -> LabeledImageSet:
    """Read a CIFAR-10 binary batch: records of 1 label byte + 3072 CHW bytes."""
    raw = _read(path)
    if not raw:
        raise ParseError("empty file", offset=0, path=path)
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise ParseError(f"size {len(raw)} is not a multiple of {CIFAR_RECORD}",
                         offset=whole, path=path)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ParseError(f"label {labels[bad]} out of range", offset=bad * CIFAR_RECORD, path=path)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64)
    return LabeledImageSet(images, labels, split, 10, {"format": "cifar-binary", "path": str(path)})


def write_cifar_binary(path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_digits(split: str = "all", *, size: int = 28, test_size: int = 600,
                seed: int = 0) -> LabeledImageSet:
    """scikit-learn's bundled 8x8 handwritten digits, upsampled to ``size``.

    Pixel intensities (0-16) are rescaled to 0-255 and bilinearly zoomed to
    a 1 x size x size image. ``split`` selects a seeded, class-stratified
    train/test partition with ``test_size`` test images.
    """
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits as _sk_digits

    bunch = _sk_digits()
    small = bunch.images * (255.0 / 16.0)
    big = np.stack([zoom(im, size / 8.0, order=1) for im in small])
    images = np.clip(big, 0.0, 255.0)[:, None]
    labels = bunch.target.astype(np.int64)
    prov = {"format": "sklearn-digits", "size": size, "seed": seed, "test_size": test_size}
    if split == "all":
        return LabeledImageSet(images, labels, "all", 10, prov)
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng(seed)
    test_idx = []
    per_class = np.bincount(labels, minlength=10)
    quota = np.floor(per_class / per_class.sum() * test_size).astype(int)
    quota[: test_size - quota.sum()] += 1
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        test_idx.extend(rng.choice(idx, size=quota[c], replace=False))
    mask = np.zeros(len(labels), dtype=bool)
    mask[np.array(test_idx)] = True
    pick = mask if split == "test" else ~mask
    return LabeledImageSet(images[pick], labels[pick], split, 10, prov)


# -- images -----------------------------------------------------------------

IMAGE_FORMATS = ("pgm", "ppm", "png")


def _to_uint8(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected (1|3, H, W) image, got shape {x.shape}")
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def export_image(x, path, fmt: str | None = None) -> Path:
    """Write a (C, H, W) 0-255 image losslessly as PGM, PPM or PNG."""
    from PIL import Image

    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in IMAGE_FORMATS:
        raise ImageFormatError(f"unsupported image format {fmt!r}; choose from {IMAGE_FORMATS}")
    arr = _to_uint8(x)
    if fmt == "pgm" and arr.shape[0] != 1:
        raise ImageFormatError("PGM holds single-channel images only")
    if fmt == "ppm" and arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    img = Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format={"pgm": "PPM", "ppm": "PPM", "png": "PNG"}[fmt])
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc
    return path


def read_image(path) -> np.ndarray:
    """Inverse of :func:`export_image`; returns a float (C, H, W) array."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.asarray(img, dtype=np.float64)
    except FileNotFoundError:
        raise
    # truncated payloads surface from Pillow as ValueError as well as OSError
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    if mode not in ("L", "RGB"):
        raise ImageFormatError(f"{path}: unsupported mode {mode}")
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def perturbation_image(r) -> np.ndarray:
    """|r| summed over channels, scaled so the largest entry maps to 255."""
    mag = np.abs(np.asarray(r, dtype=np.float64)).sum(axis=0)
    top = mag.max()
    return (mag / top * 255.0 if top > 0 else mag)[None]


def export_map(values, path, fmt: str | None = None) -> Path:
    """Export an (H, W) field in [0, 1] (e.g. a distortion map) as grayscale."""
    return export_image(np.asarray(values, dtype=np.float64)[None] * 255.0, path, fmt)


# -- JSON lines -------------------------------------------------------------


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def dump_json(obj) -> str:
    return json.dumps(obj, default=_jsonable)


def write_jsonl(records: Iterable[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dump_json(rec) + "\n")
    return path


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"line {lineno}: {exc.msg}", path=path) from exc
