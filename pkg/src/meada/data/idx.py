"""IDX (MNIST distribution format) reading and writing."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IMAGES_MAGIC = 0x00000803
IMAGES_RGB_MAGIC = 0x00000804
LABELS_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


@dataclass
class ImageDataset:
    """Images as (N, H, W, C) float64 in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    name: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.images.ndim != 4 or self.images.shape[3] not in (1, 3):
            raise ValueError(f"images must be (N, H, W, C) with C in (1, 3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, idx, name: str | None = None) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], self.labels[idx], name or self.name,
                            dict(self.provenance, subset=int(len(idx))))

    def with_images(self, images, name: str | None = None, **prov) -> "ImageDataset":
        return ImageDataset(images, self.labels.copy(), name or self.name, dict(self.provenance, **prov))


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _parse(blob: bytes, path, allowed: tuple[int, ...]) -> np.ndarray:
    if len(blob) < 4:
        raise IDXError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in allowed:
        raise IDXError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(blob) < head:
        raise IDXError(f"{path}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, blob[4:head])
    n = int(np.prod(dims, dtype=np.int64))
    if len(blob) - head < n:
        raise IDXError(f"{path}: truncated data, expected {n} bytes, found {len(blob) - head}")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name: str = "") -> ImageDataset:
    """Read an IDX image/label pair; bytes are scaled to [0, 1]."""
    images = _parse(_read(images_path), images_path, (IMAGES_MAGIC, IMAGES_RGB_MAGIC))
    labels = _parse(_read(labels_path), labels_path, (LABELS_MAGIC,))
    if len(images) != len(labels):
        raise IDXError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return ImageDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), name or str(images_path),
                        {"source": str(images_path)})


def quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def save_idx(ds: ImageDataset, images_path, labels_path) -> None:
    """Write images (quantized to bytes) and labels as IDX files.

    Single-channel images use the 3-D image magic, RGB images the 4-D one.
    """
    imgs = quantize(ds.images)
    if imgs.shape[3] == 1:
        imgs = imgs[..., 0]
        magic = IMAGES_MAGIC
    else:
        magic = IMAGES_RGB_MAGIC
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * imgs.ndim, *imgs.shape))
        fh.write(imgs.tobytes())
    labels = np.asarray(ds.labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise IDXError("labels must fit in one byte")
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())
