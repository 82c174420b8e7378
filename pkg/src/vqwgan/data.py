"""Dataset ingestion from IDX files, class subsampling, and PGM image export."""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (N, H, W) float64 in [0, 1]
    labels: np.ndarray   # (N,) int64
    name: str = ""

    def __len__(self):
        return len(self.images)


def parse_idx_images(blob: bytes) -> np.ndarray:
    """Big-endian IDX image file -> (N, rows, cols) floats in [0, 1]."""
    if len(blob) < 16:
        raise IdxFormatError("image file too short for IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic 0x{magic:08x}")
    need = count * rows * cols
    payload = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if len(payload) < need:
        raise IdxFormatError(f"truncated image payload: {len(payload)} < {need}")
    return payload[:need].reshape(count, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(blob: bytes) -> np.ndarray:
    if len(blob) < 8:
        raise IdxFormatError("label file too short for IDX header")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic 0x{magic:08x}")
    payload = np.frombuffer(blob, dtype=np.uint8, offset=8)
    if len(payload) < count:
        raise IdxFormatError(f"truncated label payload: {len(payload)} < {count}")
    return payload[:count].astype(np.int64)


def encode_idx_images(images_uint8: np.ndarray) -> bytes:
    n, rows, cols = images_uint8.shape
    header = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols)
    return header + np.ascontiguousarray(images_uint8, dtype=np.uint8).tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    header = struct.pack(">II", IDX_LABEL_MAGIC, len(labels))
    return header + np.ascontiguousarray(labels, dtype=np.uint8).tobytes()


def _read_maybe_gzip(path: str) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        raw = fh.read()
    if head == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def load_dataset(images_path: str, labels_path: str, name: str = "") -> Dataset:
    """Load an images/labels IDX pair; gzip input is decompressed transparently."""
    images = parse_idx_images(_read_maybe_gzip(images_path))
    labels = parse_idx_labels(_read_maybe_gzip(labels_path))
    if len(images) != len(labels):
        raise IdxFormatError(
            f"image count {len(images)} != label count {len(labels)}")
    return Dataset(images, labels, name)


def subsample(dataset: Dataset, classes, n: int, rng: np.random.Generator) -> Dataset:
    """n samples drawn without replacement from the given label classes."""
    classes = set(int(c) for c in classes)
    mask = np.isin(dataset.labels, sorted(classes))
    idx = np.where(mask)[0]
    if len(idx) < n:
        raise ValueError(f"only {len(idx)} samples in classes {sorted(classes)}, "
                         f"need {n}")
    chosen = rng.choice(idx, size=n, replace=False)
    return Dataset(dataset.images[chosen], dataset.labels[chosen], dataset.name)


def export_image_grid(batch: np.ndarray, rows: int, cols: int, path: str):
    """Tile images row-major into a binary PGM with 1-pixel black separators."""
    batch = np.asarray(batch)
    if batch.ndim == 2:
        batch = batch.reshape(len(batch), int(np.sqrt(batch.shape[1])), -1)
    n, h, w = batch.shape
    if rows * cols < n:
        raise ValueError(f"grid {rows}x{cols} too small for {n} images")
    grid_h = rows * h + (rows - 1)
    grid_w = cols * w + (cols - 1)
    canvas = np.zeros((grid_h, grid_w), dtype=np.uint8)
    quantized = np.rint(np.clip(batch, 0.0, 1.0) * 255.0).astype(np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = quantized[i]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid_w} {grid_h}\n255\n".encode("ascii"))
        fh.write(canvas.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Minimal P5 reader for round-trip checks."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(parts[3], dtype=np.uint8, count=h * w).reshape(h, w)
