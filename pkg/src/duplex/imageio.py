"""Row-major float64 image container.

Layout: magic ``b"FIMG"``, then three little-endian u32 (height, width,
channels), then height*width*channels little-endian float64 values in
row-major order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"FIMG"


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ValueError(f"expected [H, W, C] image, got shape {image.shape}")
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3I", h, w, c))
        fh.write(np.ascontiguousarray(image, dtype="<f8").tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a float-image file (bad magic)")
    h, w, c = struct.unpack_from("<3I", raw, 4)
    data = np.frombuffer(raw, dtype="<f8", count=h * w * c, offset=16)
    return data.reshape(h, w, c).astype(np.float64)
