"""8-bit image files: binary PGM (P5) written by hand, PNG through Pillow.

Images load as floats in [0, 1]: grayscale as ``H x W``, color as ``H x W x 3``.
"""

from __future__ import annotations

import io
import logging
import os

import numpy as np
from PIL import Image

from .errors import ImageIOError

log = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _read_pgm(data, path):
    # header: "P5" <ws> width <ws> height <ws> maxval <single ws> raster; "#" starts a comment
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageIOError(path, "malformed PGM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageIOError(path, "malformed PGM header")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageIOError(path, f"invalid PGM size {width}x{height}")
    if maxval != 255:
        raise ImageIOError(path, f"only 8-bit PGM (maxval 255) is supported, got maxval {maxval}")
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise ImageIOError(path, f"PGM raster truncated: expected {width * height} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width)


def _read_png(data, path):
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif mode in ("1", "LA"):
                arr = np.asarray(im.convert("L"))
            elif mode in ("P", "RGBA"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise ImageIOError(path, f"unsupported PNG mode {mode!r}; expected 8-bit gray or color")
    except ImageIOError:
        raise
    except Exception as exc:  # Pillow raises assorted types for corrupt files
        raise ImageIOError(path, f"cannot decode PNG: {exc}") from exc
    return arr


def load_image(path):
    """Read a PGM or PNG file into a float array scaled to [0, 1]."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ImageIOError(path, exc.strerror or str(exc)) from exc
    if data[:2] == b"P5":
        raw = _read_pgm(data, path)
    elif data[:8] == PNG_SIGNATURE:
        raw = _read_png(data, path)
    else:
        raise ImageIOError(path, "unsupported format; expected binary PGM (P5) or PNG")
    return raw.astype(float) / 255.0


def to_bytes(img):
    """Quantize to uint8 with round-half-up; returns (bytes array, clamped count)."""
    arr = np.asarray(img, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    clamped = int(np.count_nonzero((arr < 0) | (arr > 1)))
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5)
    return q.astype(np.uint8), clamped


def save_image(img, path):
    """Write ``img`` as PGM or PNG by file extension; returns how many values were clamped."""
    path = os.fspath(path)
    q, clamped = to_bytes(img)
    if clamped:
        log.warning("%s: clamped %d value(s) into [0, 1]", path, clamped)
    ext = os.path.splitext(path)[1].lower()
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[..., 0]
    if ext == ".pgm":
        if q.ndim != 2:
            raise ImageIOError(path, f"PGM holds one channel, image has shape {q.shape}")
        payload = b"P5\n%d %d\n255\n" % (q.shape[1], q.shape[0]) + q.tobytes()
    elif ext == ".png":
        if q.ndim == 3 and q.shape[2] != 3:
            raise ImageIOError(path, f"PNG output needs 1 or 3 channels, image has {q.shape[2]}")
        buf = io.BytesIO()
        Image.fromarray(q).save(buf, format="PNG")
        payload = buf.getvalue()
    else:
        raise ImageIOError(path, "unknown extension; use .pgm or .png")
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise ImageIOError(path, exc.strerror or str(exc)) from exc
    return clamped
