"""Binary PGM (P5) image I/O and PNG overlay output."""

from __future__ import annotations

import numpy as np

from .errors import RidgeAlignError


def write_pgm(path, img: np.ndarray):
    """Write a [0,1] float (or uint8) grayscale image as binary PGM."""
    if img.dtype != np.uint8:
        img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
        img = np.rint(img * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a float64 image in [0,1]."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise RidgeAlignError(f"{path!r} is not a binary PGM (P5)")
    # header: magic, width, height, maxval; '#' comments allowed
    tokens = []
    i = 2
    while len(tokens) < 3:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        tokens.append(blob[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval > 255:
        raise RidgeAlignError("16-bit PGM not supported")
    arr = np.frombuffer(blob[i:i + w * h], dtype=np.uint8)
    if arr.size != w * h:
        raise RidgeAlignError(f"truncated PGM payload in {path!r}")
    return arr.reshape(h, w).astype(np.float64) / float(maxval)


def write_png_rgb(path, rgb: np.ndarray):
    from PIL import Image
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(path)
