"""Kernel backend selection.

The compiled Cython kernels are preferred when the extension built; the
pure-numpy implementation is the fallback. Set ``TGVSEG_KERNELS=numpy`` (or
``compiled``) to force a choice. Both expose the same padded-array contract,
documented in ``numpy_kernels``.
"""

import os

from . import numpy_kernels

try:
    from . import _convkernels as compiled_kernels  # type: ignore[attr-defined]
except ImportError:
    compiled_kernels = None

_choice = os.environ.get("TGVSEG_KERNELS", "auto").lower()
if _choice not in ("auto", "numpy", "compiled"):
    raise ValueError(f"TGVSEG_KERNELS must be auto|numpy|compiled, got {_choice!r}")
if _choice == "compiled" and compiled_kernels is None:
    raise ImportError("TGVSEG_KERNELS=compiled but the extension is not built")

if _choice == "numpy" or compiled_kernels is None:
    _impl = numpy_kernels
    KERNEL_BACKEND = "numpy"
else:
    _impl = compiled_kernels
    KERNEL_BACKEND = "compiled"

conv_forward_padded = _impl.conv_forward_padded
conv_backward_padded = _impl.conv_backward_padded


def available_backends():
    """Name -> module for every importable backend (used by the benchmark)."""
    found = {"numpy": numpy_kernels}
    if compiled_kernels is not None:
        found["compiled"] = compiled_kernels
    return found
