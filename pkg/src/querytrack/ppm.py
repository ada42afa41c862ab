"""Binary PPM/PGM image files — dependency-free, bit-exact I/O.

P6 carries the dataset's RGB frames, P5 the grayscale attention dumps.
"""

import numpy as np


def save_ppm(path, image):
    """Write a uint8 [H, W, 3] array as binary PPM (P6, maxval 255)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected uint8 [H, W, 3], got {arr.dtype} {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def save_pgm(path, image):
    """Write a uint8 [H, W] array as binary PGM (P5, maxval 255)."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError(f"expected uint8 [H, W], got {arr.dtype} {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _read_header(blob, path, magic):
    if blob[:2] != magic:
        raise ValueError(f"{path}: not a {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(int(blob[start:pos]))
    return fields[0], fields[1], fields[2], pos + 1  # width, height, maxval, data offset


def load_ppm(path):
    """Read a binary PPM back into uint8 [H, W, 3]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, maxval, offset = _read_header(blob, path, b"P6")
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    expected = width * height * 3
    data = blob[offset:offset + expected]
    if len(data) != expected:
        raise ValueError(f"{path}: pixel payload truncated "
                         f"({len(data)} of {expected} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3).copy()


def load_pgm(path):
    """Read a binary PGM back into uint8 [H, W]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    width, height, maxval, offset = _read_header(blob, path, b"P5")
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    expected = width * height
    data = blob[offset:offset + expected]
    if len(data) != expected:
        raise ValueError(f"{path}: pixel payload truncated "
                         f"({len(data)} of {expected} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()
