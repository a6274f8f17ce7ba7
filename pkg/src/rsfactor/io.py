"""Image file I/O: PNG (8/16-bit, gray/RGB) and binary PPM/PGM."""

from __future__ import annotations

import logging
from pathlib import Path

import cv2
import numpy as np

from .image import Image, as_array

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class ImageReadError(OSError):
    """Raised when an image file is missing, unreadable or malformed."""


def _normalize(raw: np.ndarray) -> np.ndarray:
    if raw.dtype == np.uint8:
        return raw.astype(np.float32) / 255.0
    if raw.dtype == np.uint16:
        return raw.astype(np.float32) / 65535.0
    raise ImageReadError(f"unsupported sample type {raw.dtype}")


def _read_pnm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # magic, width, height, maxval; '#' comments allowed between tokens
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageReadError(f"{path}: truncated PNM header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ImageReadError(f"{path}: only binary PGM (P5) / PPM (P6) are supported")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageReadError(f"{path}: malformed PNM header") from None
    if maxval not in (255, 65535):
        raise ImageReadError(f"{path}: maxval must be 255 or 65535, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval == 65535 else np.dtype(np.uint8)
    count = width * height * channels
    if len(blob) - pos < count * dtype.itemsize:
        raise ImageReadError(f"{path}: truncated raster")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    raw = raw.reshape(height, width, channels)
    return raw.astype(np.uint16 if maxval == 65535 else np.uint8)


def read_image(path) -> Image:
    """Load an image, normalizing 8-bit data by 255 and 16-bit by 65535.

    Alpha channels are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageReadError(f"{path}: no such file")
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        raw = _read_pnm(path)
    else:
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise ImageReadError(f"{path}: cannot decode image")
        if raw.ndim == 3:
            if raw.shape[2] == 4:
                logger.warning("%s: dropping alpha channel", path)
                raw = raw[:, :, :3]
            raw = raw[:, :, ::-1]  # BGR -> RGB
    return Image(_normalize(np.ascontiguousarray(raw)))


def to_integer(img, bits: int = 8) -> np.ndarray:
    """Quantize [0, 1] samples to unsigned integers (round half to even)."""
    arr = np.clip(as_array(img).astype(np.float64), 0.0, 1.0)
    if bits == 8:
        return np.rint(arr * 255.0).astype(np.uint8)
    if bits == 16:
        return np.rint(arr * 65535.0).astype(np.uint16)
    raise ValueError("bits must be 8 or 16")


def write_image(path, img, bits: int = 8) -> Path:
    """Write an image as PNG or binary PPM/PGM depending on the suffix."""
    path = Path(path)
    q = to_integer(img, bits)
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        channels = q.shape[2]
        magic = b"P6" if channels == 3 else b"P5"
        maxval = 65535 if bits == 16 else 255
        header = b"%s\n%d %d\n%d\n" % (magic, q.shape[1], q.shape[0], maxval)
        body = q.astype(">u2").tobytes() if bits == 16 else q.tobytes()
        path.write_bytes(header + body)
        return path
    if suffix != ".png":
        raise ValueError(f"unsupported output format {path.suffix!r}")
    out = q[:, :, 0] if q.shape[2] == 1 else q[:, :, ::-1]
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(out))
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    path.write_bytes(buf.tobytes())
    return path


def list_images(directory) -> list[Path]:
    """Image files directly inside ``directory``, sorted by name."""
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
