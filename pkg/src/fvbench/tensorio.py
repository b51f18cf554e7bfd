"""Raw-tensor image container and PGM/PPM import.

The native format keeps the toolchain free of image-codec dependencies:

    4 bytes magic ``FVT1`` | uint8 ndim | ndim x uint32 LE dims |
    float32 LE payload, C order

Pixel values are stored as-is; images are expected in [0, 255]. 8-bit
binary or ASCII PGM/PPM files can be imported as ``(h, w, 1)`` or
``(h, w, 3)`` tensors.
"""

import struct

import numpy as np

from .errors import PairFileError, ShapeError

MAGIC = b"FVT1"


def write_tensor(path, array):
    arr = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ShapeError(f"{path}: not a raw-tensor file")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ShapeError(f"{path}: payload has {data.size} values, header says {expected}")
    return data.reshape(shape).astype(np.float64)


def _read_pnm_tokens(raw, count):
    # Header tokens are whitespace separated; '#' starts a comment.
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(raw):
            raise PairFileError("truncated PNM header")
        ch = raw[i : i + 1]
        if ch == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(raw) and not raw[j : j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    return tokens, i + 1  # skip single whitespace after last header token


def read_pnm(path):
    """Read an 8-bit P2/P3/P5/P6 image as an (h, w, c) float tensor."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise PairFileError(f"{path}: unsupported PNM magic {magic!r}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    tokens, offset = _read_pnm_tokens(raw, 4)
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise PairFileError(f"{path}: only 8-bit PNM supported (maxval={maxval})")
    n = width * height * channels
    if magic in (b"P5", b"P6"):
        data = np.frombuffer(raw, dtype=np.uint8, count=n, offset=offset)
    else:
        data = np.array(raw[offset - 1 :].split()[:n], dtype=np.uint8)
    if data.size != n:
        raise PairFileError(f"{path}: truncated pixel data")
    img = data.reshape(height, width, channels).astype(np.float64)
    if maxval != 255:
        img *= 255.0 / maxval
    return img


def load_image(path):
    """Load an image by extension: native raw tensors or PGM/PPM."""
    path = str(path)
    if path.endswith((".pgm", ".ppm", ".pnm")):
        return read_pnm(path)
    img = read_tensor(path)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"{path}: image tensor must be (h, w) or (h, w, c)")
    return img
