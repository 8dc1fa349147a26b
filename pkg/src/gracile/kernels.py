"""Kernel backend selection.

Two interchangeable implementations of the conv/dense/pool kernels exist:

* ``gracile._kernels`` — compiled (Cython) scalar loops; fastest for small
  batches where BLAS dispatch and im2col overhead dominate.
* ``gracile._kernels_np`` — numpy/BLAS; fastest for large batches.

``auto`` picks per call based on batch size. ``GRACILE_BACKEND`` (auto |
numpy | ext) overrides, mainly for benchmarks and parity tests. Batched
accuracy evaluation always goes through numpy so sweep results do not depend
on whether the extension was built.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_np as _np_impl

try:
    from . import _kernels as _ext_impl
except ImportError:  # extension not built: numpy fallback only
    _ext_impl = None

# Batch sizes below this cutoff dispatch to the compiled loops in auto mode.
# benchmarks/bench_kernels.py on this machine shows BLAS-backed numpy winning
# at every size (OpenBLAS GEMM dispatch is cheaper than scalar f64 loops), so
# the cutoff defaults to 0 and the extension serves as a dependency-light
# reference implementation plus a cross-check for the numpy path.
SMALL_BATCH_CUTOFF = int(os.environ.get("GRACILE_EXT_BATCH_CUTOFF", "0"))

_MODE = os.environ.get("GRACILE_BACKEND", "auto")
if _MODE not in ("auto", "numpy", "ext"):
    raise ValueError(f"GRACILE_BACKEND must be auto|numpy|ext, got {_MODE!r}")
if _MODE == "ext" and _ext_impl is None:
    raise ImportError("GRACILE_BACKEND=ext but the compiled kernels are not built")


def extension_available() -> bool:
    return _ext_impl is not None


def backend_name() -> str:
    if _MODE == "auto":
        return "auto(ext)" if _ext_impl is not None else "auto(numpy)"
    return _MODE


def _use_ext(batch: int) -> bool:
    if _MODE == "numpy" or _ext_impl is None:
        return False
    if _MODE == "ext":
        return True
    return batch < SMALL_BATCH_CUTOFF


def conv2d(x: np.ndarray, weight: np.ndarray, bias, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    if _use_ext(x.shape[0]):
        return _ext_impl.conv2d(
            np.ascontiguousarray(x), np.ascontiguousarray(weight),
            None if bias is None else np.ascontiguousarray(bias),
            tuple(stride), tuple(padding))
    return _np_impl.conv2d(x, weight, bias, stride, padding)


def fully_connected(x: np.ndarray, weight: np.ndarray, bias) -> np.ndarray:
    if _use_ext(x.shape[0]):
        return _ext_impl.fully_connected(
            np.ascontiguousarray(x), np.ascontiguousarray(weight),
            None if bias is None else np.ascontiguousarray(bias))
    return _np_impl.fully_connected(x, weight, bias)


def maxpool2d(x: np.ndarray, pool, stride) -> np.ndarray:
    if _use_ext(x.shape[0]):
        return _ext_impl.maxpool2d(np.ascontiguousarray(x), tuple(pool), tuple(stride))
    return _np_impl.maxpool2d(x, pool, stride)


# Re-exported helpers used by the cached evaluator (numpy-only path).
im2col = _np_impl.im2col
conv2d_cols = _np_impl.conv2d_cols
conv_output_hw = _np_impl.conv_output_hw
