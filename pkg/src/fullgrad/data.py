"""Datasets: a seed-pinned synthetic digit set and MNIST-style IDX files."""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IDXFormatError

__all__ = ["Dataset", "make_bars", "load_idx", "write_idx", "IDX_IMAGE_MAGIC", "IDX_LABEL_MAGIC"]

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split=None):
        return Dataset(
            self.images[index], self.labels[index], split or self.split, self.num_classes
        )

    def of_class(self, label):
        return self.subset(np.flatnonzero(self.labels == label))


# seven-segment layout: segment -> (row0, col0, rows, cols) inside a 11 x 7 box
_SEGMENTS = {
    "a": (0, 0, 1, 7),
    "b": (0, 6, 6, 1),
    "c": (5, 6, 6, 1),
    "d": (10, 0, 1, 7),
    "e": (5, 0, 6, 1),
    "f": (0, 0, 6, 1),
    "g": (5, 0, 1, 7),
}
_DIGITS = {
    0: "abcdef",
    1: "bc",
    2: "abged",
    3: "abgcd",
    4: "fgbc",
    5: "afgcd",
    6: "afgedc",
    7: "abc",
    8: "abcdefg",
    9: "abcdfg",
}


def _render(digit, size, rng):
    img = np.zeros((size, size))
    thick = int(rng.integers(1, 3))
    top = int(rng.integers(1, size - 12 - thick + 1))
    left = int(rng.integers(2, size - 8 - thick + 1))
    for seg in _DIGITS[digit]:
        r0, c0, h, w = _SEGMENTS[seg]
        # vertical bars thicken sideways, horizontal ones downwards
        if w == 1:
            w += thick - 1
        else:
            h += thick - 1
        img[top + r0 : top + r0 + h, left + c0 : left + c0 + w] = rng.uniform(0.6, 1.0)
    img += rng.normal(0.0, 0.05, size=img.shape)
    speckle = rng.random(img.shape) < 0.02
    img[speckle] = rng.uniform(0.3, 1.0, size=int(speckle.sum()))
    return np.clip(img, 0.0, 1.0)


def make_bars(n, seed=0, size=16, classes=tuple(range(10)), split="train"):
    """Procedural seven-segment digits drawn as bars, with jitter and noise.

    Labels are the digit values, so ``classes=(3, 8)`` gives a two-class set
    that still uses the 10-way label space.
    """
    if size < 14:
        raise ValueError("size must be at least 14")
    rng = np.random.default_rng(seed)
    labels = rng.choice(np.asarray(classes), size=n)
    images = np.stack([_render(int(d), size, rng) for d in labels])[:, None]
    return Dataset(images, labels, split, num_classes=10)


# ---------------------------------------------------------------------------
# IDX (MNIST container)


def _read_header(raw, magic, ndim, path):
    if len(raw) < 4 + 4 * ndim:
        raise IDXFormatError(f"{path}: truncated header")
    found = struct.unpack(">i", raw[:4])[0]
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic {found:#010x}, expected {magic:#010x}")
    dims = struct.unpack(">" + "i" * ndim, raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    if len(body) != int(np.prod(dims)):
        raise IDXFormatError(f"{path}: payload has {len(body)} bytes, header says {dims}")
    return dims, body


def load_idx(images_path, labels_path, split="train", num_classes=10):
    """Read an IDX image/label pair; pixel bytes are scaled by 1/255."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()
    (n, rows, cols), body = _read_header(img_raw, IDX_IMAGE_MAGIC, 3, images_path)
    (m,), labels = _read_header(lab_raw, IDX_LABEL_MAGIC, 1, labels_path)
    if n != m:
        raise IDXFormatError(f"{n} images but {m} labels")
    images = np.frombuffer(body, dtype=np.uint8).reshape(n, 1, rows, cols) / 255.0
    return Dataset(images, np.frombuffer(labels, dtype=np.uint8), split, num_classes)


def write_idx(dataset, images_path, labels_path):
    """Write a single-channel dataset as IDX, quantising pixels to bytes."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise ValueError("IDX images are single-channel")
    pixels = np.floor(dataset.images[:, 0] * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">iiii", IDX_IMAGE_MAGIC, n, h, w) + pixels.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">ii", IDX_LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )
