"""Binary checkpoint container: parameter name -> shape + float32 payload.

Layout (all integers little-endian):

    8 bytes   magic  b"QTRKCKPT"
    uint32    format version (currently 1)
    uint32    entry count
    entries:  uint16 name length, utf-8 name,
              uint8 ndim, ndim * uint32 dims,
              float32 payload (row-major)

Values are stored as float32 regardless of the active compute dtype, so a
save/load cycle in the float32 runtime is bit-exact.
"""

import struct

import numpy as np

MAGIC = b"QTRKCKPT"
VERSION = 1


def save_checkpoint(path, params):
    """Write a mapping of name -> array (or a Module) to `path`."""
    if hasattr(params, "state_dict"):
        params = params.state_dict()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params.items():
            arr = np.asarray(value, dtype="<f4", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into {name: float32 ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic in {path}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version} in {path}")
    offset = 16
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as err:
        raise ValueError(f"truncated or corrupt checkpoint {path}: {err}") from err
    if offset != len(blob):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return out
