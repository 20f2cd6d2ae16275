"""PNG and raw-float image I/O."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

F32_MAGIC_LEN = 8  # width u32 LE + height u32 LE


def write_png8(path, img: np.ndarray, gamma: float | None = None):
    """8-bit RGB PNG.  gamma=2.2 applies the simple sRGB preview encoding;
    None stores the [0,1] values linearly quantized."""
    arr = np.clip(np.asarray(img, np.float64), 0.0, 1.0)
    if gamma is not None:
        arr = arr ** (1.0 / gamma)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def read_png(path) -> np.ndarray:
    """PNG as float array in [0,1]; RGBA stays 4-channel for the caller to
    composite against its background."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA"):
            im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_f32(path, img: np.ndarray):
    """Raw float sidecar: width u32 LE, height u32 LE, row-major rgb f32."""
    img = np.asarray(img, np.float64)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", w, h))
        fh.write(img.astype("<f4").tobytes())


def read_f32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < F32_MAGIC_LEN:
        raise FormatError(f"{path}: truncated f32 image header", offset=len(data))
    w, h = struct.unpack_from("<II", data, 0)
    expect = F32_MAGIC_LEN + w * h * 3 * 4
    if len(data) != expect:
        raise FormatError(
            f"{path}: f32 image payload length {len(data)} != expected {expect}",
            offset=min(len(data), expect))
    arr = np.frombuffer(data, dtype="<f4", offset=F32_MAGIC_LEN)
    return arr.reshape(h, w, 3).astype(np.float64)
