"""Select the kernel implementation at import time.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``RELSN_PURE_PYTHON`` is set to a non-empty value, the
numpy fallback is used.
"""
import os

from relsn import _kernels_py as python_kernels

try:
    if os.environ.get("RELSN_PURE_PYTHON"):
        raise ImportError("pure-Python backend requested")
    from relsn import _kernels as compiled_kernels
except ImportError:
    compiled_kernels = None

kernels = compiled_kernels if compiled_kernels is not None else python_kernels
BACKEND = "compiled" if compiled_kernels is not None else "python"

prefix_solve = kernels.prefix_solve
bridge_functionals = kernels.bridge_functionals
