"""Dual-frequency latent-conditioned control at desk scale."""

import ctypes
import ctypes.util
import os

# The workloads here are many small GEMMs; BLAS thread fan-out is pure
# overhead for them (and pathological on some shapes). Must be set before
# numpy initializes its BLAS backend to take effect.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

# Activation buffers run ~0.5-2 MB; above glibc's default mmap threshold each
# allocation round-trips through mmap and page faults. Raising the threshold
# lets the heap recycle them. Best effort, glibc only.
try:
    _libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
    _libc.mallopt(-3, 256 * 1024 * 1024)  # M_MMAP_THRESHOLD
except (OSError, AttributeError, TypeError):
    pass

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad  # noqa: F401
