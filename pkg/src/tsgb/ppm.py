"""Binary PGM (P5) / PPM (P6) reading and writing, 8-bit only.

Dependency-free and byte-deterministic, so golden-file comparisons stay
bit-exact. Pixel values map to floats in [0, 1] on read (divide by 255).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class ImageFormatError(ValueError):
    pass


def _read_tokens(raw: bytes, count: int):
    """First `count` whitespace/comment-delimited header tokens and the
    offset of the byte right after the final single whitespace."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(raw):
            raise ImageFormatError("truncated image header")
        ch = raw[i : i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace() and raw[j : j + 1] != b"#":
                j += 1
            tokens.append(raw[i:j])
            i = j
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise ImageFormatError("missing whitespace after image header")
    return tokens, i + 1


def read_image(path) -> Tensor:
    """Reads a binary PGM/PPM file into a (1, c, h, w) tensor in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if raw[:2] == b"P5" else 3
    tokens, offset = _read_tokens(raw, 4)
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images supported, maxval={maxval}")
    need = width * height * channels
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=offset)
    if data.size < need:
        raise ImageFormatError(f"{path}: pixel data truncated")
    if channels == 1:
        arr = data.reshape(1, 1, height, width)
    else:
        arr = data.reshape(height, width, 3).transpose(2, 0, 1)[None]
    return Tensor(arr.astype(np.float32) / 255.0)


def write_pgm(path, gray: np.ndarray) -> None:
    """Writes a (h, w) uint8 array as binary PGM."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Writes a (h, w, 3) uint8 array as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, c = rgb.shape
    if c != 3:
        raise ImageFormatError(f"PPM needs 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.tobytes())


def write_image_tensor(path, image: Tensor) -> None:
    """Writes a (1, 1|3, h, w) tensor in [0, 1] as PGM/PPM."""
    arr = np.clip(np.rint(image.data[0] * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        write_pgm(path, arr[0])
    elif arr.shape[0] == 3:
        write_ppm(path, arr.transpose(1, 2, 0))
    else:
        raise ImageFormatError(f"cannot write {arr.shape[0]}-channel image")
