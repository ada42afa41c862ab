"""Global floating-point precision switch.

Training and inference run in float32; gradient checking switches the whole
engine to float64 for headroom. The active dtype is consulted at tensor
creation time, so a model built inside `precision("float64")` is a float64
model throughout.
"""

from contextlib import contextmanager

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_active = np.float32


def default_dtype():
    """Dtype used for newly created tensors and parameters."""
    return _active


def set_default_dtype(dtype):
    global _active
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}, expected one of {sorted(_DTYPES)}")
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _active = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    previous = _active
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)
