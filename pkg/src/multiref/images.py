"""Image helpers.  Images are ``(H, W, C)`` float arrays with values in [-1, 1]."""

from __future__ import annotations

import os

import numpy as np
from scipy import ndimage


def black_image(side: int, channels: int = 3) -> np.ndarray:
    """The empty image condition: a square, all pixels at -1."""
    return -np.ones((side, side, channels))


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize to an exact output shape."""
    h, w, _ = img.shape
    if (h, w) == (height, width):
        return img.copy()
    factors = (height / h, width / w, 1.0)
    out = ndimage.zoom(img, factors, order=1, mode="nearest", grid_mode=True)
    return np.clip(out[:height, :width], -1.0, 1.0)


def fit_to_cap(img: np.ndarray, cap: int, multiple: int) -> np.ndarray:
    """Shrink so both sides are <= cap (aspect kept), then snap sides to ``multiple``."""
    h, w, _ = img.shape
    scale = min(1.0, cap / max(h, w))
    nh = max(multiple, int(round(h * scale / multiple)) * multiple)
    nw = max(multiple, int(round(w * scale / multiple)) * multiple)
    nh, nw = min(nh, cap), min(nw, cap)
    return resize(img, nh, nw)


def center_crop_square(img: np.ndarray, side: int) -> np.ndarray:
    """Resize the shorter side to ``side`` then take the central square."""
    h, w, _ = img.shape
    scale = side / min(h, w)
    nh, nw = max(side, int(round(h * scale))), max(side, int(round(w * scale)))
    img = resize(img, nh, nw)
    top, left = (nh - side) // 2, (nw - side) // 2
    return img[top:top + side, left:left + side]


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``(..., H, W, C) -> (..., H/p * W/p, p*p*C)`` in row-major patch order."""
    *lead, h, w, c = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    x = img.reshape(*lead, h // patch, patch, w // patch, patch, c)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, (h // patch) * (w // patch), patch * patch * c)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.clip(img, -1, 1) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 127.5 - 1.0


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    data = to_uint8(img)
    h, w, c = data.shape
    if c != 3:
        raise ValueError("PPM export needs 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return from_uint8(data.reshape(h, w, 3))
