"""Kernel backend selection.

The hot inner loops (convolution, pooling) exist twice: numba-jitted in
``_kernels_numba`` and as vectorized numpy in ``_kernels_numpy``. The
environment variable ``XDG_BACKEND`` picks one:

  * ``auto``  (default) -- numba when importable, else numpy
  * ``numba`` -- force the jitted kernels (raises if numba is missing)
  * ``numpy`` -- force the pure-numpy fallback

Results agree between backends up to float summation order; each backend is
individually deterministic.
"""

import os

from . import _kernels_numpy

try:
    from . import _kernels_numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _kernels_numba = None
    HAS_NUMBA = False


def _select():
    choice = os.environ.get("XDG_BACKEND", "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"XDG_BACKEND must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return _kernels_numpy, "numpy"
    if choice == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("XDG_BACKEND=numba but numba is not importable")
        return _kernels_numba, "numba"
    return (_kernels_numba, "numba") if HAS_NUMBA else (_kernels_numpy, "numpy")


kernels, BACKEND = _select()


def warmup():
    """Trigger jit compilation of every kernel on tiny inputs.

    No-op on the numpy backend. Useful before timing anything.
    """
    import numpy as np

    x = np.zeros((1, 1, 4, 4))
    w = np.zeros((1, 1, 2, 2))
    b = np.zeros(1)
    g = kernels.conv2d_forward(x, w, b, 1)
    kernels.conv2d_backward_input(g, w, 4, 4, 1)
    kernels.conv2d_backward_kernel(g, x, 2, 2, 1)
    p, a = kernels.maxpool2_forward(x)
    kernels.maxpool2_backward(p, a, 4, 4)
