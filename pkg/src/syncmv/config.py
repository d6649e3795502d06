"""Global numeric configuration: float precision and finite-value checking."""

from contextlib import contextmanager

import numpy as np

_FLOAT_DTYPE = np.float64
_CHECK_FINITE = True

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


def float_dtype():
    return _FLOAT_DTYPE


def set_float_dtype(dtype):
    """Set the default float dtype: np.float32/np.float64 or 'f32'/'f64'."""
    global _FLOAT_DTYPE
    if isinstance(dtype, str):
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unknown dtype name {dtype!r}, expected 'f32' or 'f64'")
        dtype = _DTYPE_NAMES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _FLOAT_DTYPE = dtype


def float_dtype_name():
    return "f32" if _FLOAT_DTYPE == np.float32 else "f64"


def check_finite_enabled():
    return _CHECK_FINITE


def set_check_finite(enabled):
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default float dtype."""
    old = _FLOAT_DTYPE
    set_float_dtype(dtype)
    try:
        yield
    finally:
        set_float_dtype(old)
