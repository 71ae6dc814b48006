"""Binary PGM/PPM writing and reading, and heatmap overlays."""

from pathlib import Path

import numpy as np

from .tensor import rescale_unit

__all__ = [
    "to_bytes",
    "heatmap_bytes",
    "colormap",
    "overlay",
    "write_pgm",
    "write_ppm",
    "read_pnm",
    "OVERLAY_ALPHA",
]

OVERLAY_ALPHA = 0.5
# blue -> yellow -> red at 0, 0.5, 1
_ANCHORS = np.array([[0.0, 0.0, 1.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def to_bytes(values):
    """Quantise values in [0, 1] to uint8, rounding half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def heatmap_bytes(saliency):
    """Greyscale bytes of a saliency map rescaled onto [0, 255]."""
    return to_bytes(rescale_unit(saliency))


def colormap(values):
    """Piecewise-linear blue/yellow/red colouring of values in [0, 1]; returns (3, H, W)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    lo = v < 0.5
    t = np.where(lo, v * 2.0, (v - 0.5) * 2.0)
    a = np.where(lo[None], _ANCHORS[0][:, None, None], _ANCHORS[1][:, None, None])
    b = np.where(lo[None], _ANCHORS[1][:, None, None], _ANCHORS[2][:, None, None])
    return a + (b - a) * t[None]


def overlay(image, saliency, alpha=OVERLAY_ALPHA):
    """Blend an image ``(C, H, W)`` in [0, 1] with the coloured, rescaled saliency.

    Greyscale images are replicated to RGB. Returns ``(3, H, W)`` bytes.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if alpha == 0:
        return to_bytes(img)
    heat = colormap(rescale_unit(saliency))
    return to_bytes((1.0 - alpha) * img + alpha * heat)


def _write(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def write_pgm(saliency, path):
    """Write a saliency map as binary greyscale PGM (P5, maxval 255)."""
    pixels = heatmap_bytes(saliency)
    h, w = pixels.shape
    _write(path, f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def write_ppm(rgb_bytes, path):
    """Write ``(3, H, W)`` uint8 data as binary PPM (P6, maxval 255)."""
    rgb = np.asarray(rgb_bytes, dtype=np.uint8)
    _, h, w = rgb.shape
    _write(path, f"P6\n{w} {h}\n255\n".encode() + rgb.transpose(1, 2, 0).tobytes())


def read_pnm(path):
    """Read a binary P5/P6 file; returns ``(C, H, W)`` floats in [0, 1]."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode())
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported image header {fields}")
    body = raw[pos + 1 :]
    c = 1 if magic == "P5" else 3
    if len(body) != w * h * c:
        raise ValueError(f"{path}: payload has {len(body)} bytes, expected {w * h * c}")
    data = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return data / 255.0
