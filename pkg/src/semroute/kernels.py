"""Select the compiled AR-DTW kernels when built, else the pure-Python ones.

Set ``SEMROUTE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _dtw_py as python_kernels

compiled_kernels = None
if not os.environ.get("SEMROUTE_PURE_PYTHON"):
    try:
        from . import _dtw as compiled_kernels
    except ImportError:  # extension not built
        compiled_kernels = None

if compiled_kernels is not None:
    BACKEND = "cython"
    ar_dtw_csr = compiled_kernels.ar_dtw_csr
    path_span_csr = compiled_kernels.path_span_csr
    element_distance = compiled_kernels.element_distance
else:
    BACKEND = "python"
    ar_dtw_csr = python_kernels.ar_dtw_csr
    path_span_csr = python_kernels.path_span_csr
    element_distance = python_kernels.element_distance
