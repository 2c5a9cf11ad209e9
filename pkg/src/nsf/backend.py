"""Kernel backend selection.

The hot inner loops (interpolation gathers, voxelwise GMM synthesis) exist in
two variants: numba-jitted and pure numpy.  The active variant is chosen once
at import time from the ``NSF_BACKEND`` environment variable:

  NSF_BACKEND=auto    use numba when importable, else numpy (default)
  NSF_BACKEND=numba   require numba, raise if unavailable
  NSF_BACKEND=numpy   force the pure-numpy path

Both variants compute identical results; ``benchmarks/bench_kernels.py``
compares their throughput.
"""

import os

_VALID = ("auto", "numba", "numpy")


def _detect() -> str:
    choice = os.environ.get("NSF_BACKEND", "auto").strip().lower()
    if choice not in _VALID:
        raise RuntimeError(
            f"NSF_BACKEND must be one of {_VALID}, got {choice!r}"
        )
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
        return "numba"
    except ImportError:
        if choice == "numba":
            raise RuntimeError("NSF_BACKEND=numba but numba is not importable")
        return "numpy"


ACTIVE_BACKEND = _detect()
