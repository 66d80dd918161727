"""Dataset discovery, image decoding/resizing and seeded mini-batching.

Expected layout::

    <root>/TRAIN/O/*.ppm   <root>/TRAIN/R/*.ppm
    <root>/TEST/O/*.ppm    <root>/TEST/R/*.ppm

``O`` holds Organic images (label 0) and ``R`` Recyclable ones (label 1).
Batches are ordered by a permutation drawn from numpy's PCG64 generator
seeded with ``SeedSequence([seed, epoch])``, which is stable across runs
and platforms.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DatasetError, DecodeError

log = logging.getLogger(__name__)

CLASS_DIRS = ("O", "R")
SPLITS = ("TRAIN", "TEST")

# published per-class image counts of the Kaggle waste dataset: (organic, recyclable)
REFERENCE_COUNTS = {"TRAIN": (12565, 9999), "TEST": (1401, 1112)}


@dataclass
class DatasetIndex:
    split: str
    entries: list[tuple[Path, int]]
    counts: tuple[int, int]
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.entries], dtype=np.int64)

    def subset(self, indices) -> "DatasetIndex":
        entries = [self.entries[i] for i in indices]
        labels = [label for _, label in entries]
        counts = (labels.count(0), labels.count(1))
        return DatasetIndex(self.split, entries, counts)


@dataclass
class Batch:
    images: np.ndarray  # [b, 3, e, e] in [0, 1]
    labels: np.ndarray  # [b, 1] of 0/1


def scan_dataset(root, split: str) -> DatasetIndex:
    """List ``root/split/{O,R}`` in lexicographic order."""
    split = split.upper()
    if split not in SPLITS:
        raise DatasetError(f"split must be one of {SPLITS}, got {split!r}")
    base = Path(root) / split
    if not base.is_dir():
        raise DatasetError(f"missing split directory {base}")
    entries: list[tuple[Path, int]] = []
    counts = []
    warnings = []
    for label, name in enumerate(CLASS_DIRS):
        class_dir = base / name
        if not class_dir.is_dir():
            raise DatasetError(f"missing class directory {class_dir}")
        files = sorted(p for p in class_dir.iterdir()
                       if p.is_file() and p.suffix.lower() in DECODERS)
        if not files:
            warnings.append(f"class directory {class_dir} is empty")
        entries += [(p, label) for p in files]
        counts.append(len(files))
    counts = tuple(counts)
    if counts != REFERENCE_COUNTS[split]:
        warnings.append(
            f"{split} counts {counts} differ from the reference dataset {REFERENCE_COUNTS[split]}")
    for w in warnings:
        log.info(w)
    return DatasetIndex(split, entries, counts, warnings)


# ---------------------------------------------------------------- decoding

def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def decode_ppm(data: bytes) -> np.ndarray:
    """Decode a binary PPM (P6) into an [h, w, 3] uint8 array."""
    magic, pos = _read_token(data, 0)
    if magic != b"P6":
        raise ValueError(f"not a binary PPM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ValueError(f"bad PPM header field {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ValueError("PPM dimensions must be positive")
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte before the raster
    need = width * height * 3
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ValueError(f"raster truncated: expected {need} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, c = pixels.shape
    if c != 3:
        raise ValueError("PPM needs RGB pixels")
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


def _decode_with_pillow(data: bytes) -> np.ndarray:
    import io

    from PIL import Image

    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


DECODERS: dict[str, Callable[[bytes], np.ndarray]] = {".ppm": decode_ppm}
try:  # compressed formats are optional
    import PIL  # noqa: F401
except ImportError:
    pass
else:
    for _ext in (".jpg", ".jpeg", ".png"):
        DECODERS[_ext] = _decode_with_pillow


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an [h, w, c] array with corner pixels aligned.

    Output pixel i samples source coordinate ``i * (h - 1) / (out_h - 1)``,
    so the four corners are reproduced exactly. Aspect ratio is not kept.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]

    def coords(n_in, n_out):
        if n_out == 1:
            src = np.array([(n_in - 1) / 2.0])
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    fy = fy[:, None, None]
    return top * (1 - fy) + bottom * fy


def load_image(path, target_extent: int) -> np.ndarray:
    """Decode, resize to ``target_extent`` square and scale to [0, 1] as a [3, e, e] tensor."""
    path = Path(path)
    decoder = DECODERS.get(path.suffix.lower())
    if decoder is None:
        raise DecodeError(path, f"unsupported format {path.suffix!r}")
    try:
        pixels = decoder(path.read_bytes())
    except (OSError, ValueError) as exc:
        raise DecodeError(path, exc) from None
    except Exception as exc:  # third-party decoders raise their own types
        raise DecodeError(path, exc) from None
    resized = bilinear_resize(pixels, target_extent, target_extent)
    return np.clip(resized / 255.0, 0.0, 1.0).transpose(2, 0, 1).copy()


def load_images(paths, target_extent: int, workers: int = 1) -> np.ndarray:
    """Load many images into one [n, 3, e, e] array, in the order given."""
    paths = list(paths)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            arrays = list(pool.map(lambda p: load_image(p, target_extent), paths))
    else:
        arrays = [load_image(p, target_extent) for p in paths]
    if not arrays:
        return np.zeros((0, 3, target_extent, target_extent))
    return np.stack(arrays)


# ---------------------------------------------------------------- batching

def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(n)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index groups for one epoch; the final short batch is kept."""
    if n < 1:
        raise DatasetError("cannot batch an empty index")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = epoch_permutation(n, seed, epoch)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batches(index: DatasetIndex, batch_size: int, seed: int, epoch: int,
                 target_extent: int = 224, workers: int = 1) -> list[Batch]:
    labels = index.labels
    batches = []
    for idx in batch_order(len(index), batch_size, seed, epoch):
        images = load_images([index.entries[i][0] for i in idx], target_extent, workers)
        batches.append(Batch(images, labels[idx].astype(np.float64).reshape(-1, 1)))
    return batches
