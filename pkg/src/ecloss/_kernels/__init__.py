"""Kernel backend selection.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``ECLOSS_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy fallback is used.  Both expose the same functions.
"""
import os

from . import _pykernels as python_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

_force_python = os.environ.get("ECLOSS_PURE_PYTHON", "") not in ("", "0")

if compiled_backend is not None and not _force_python:
    backend = compiled_backend
    BACKEND = "compiled"
else:
    backend = python_backend
    BACKEND = "python"

im2col = backend.im2col
col2im = backend.col2im
maxpool_forward = backend.maxpool_forward
maxpool_backward = backend.maxpool_backward
peak_prominences = backend.peak_prominences
count_peaks = backend.count_peaks
conv_out_size = python_backend.conv_out_size

__all__ = [
    "BACKEND",
    "backend",
    "compiled_backend",
    "python_backend",
    "im2col",
    "col2im",
    "maxpool_forward",
    "maxpool_backward",
    "peak_prominences",
    "count_peaks",
    "conv_out_size",
]
