"""Explainability-driven domain generalization toolkit.

Self-challenging feature masking, activation-map diagnostics, prototype
layers, and cross-attention prototypes on top of a small numpy/numba
autodiff core, with synthetic multi-domain datasets and a sweep harness.
"""

from .backend import BACKEND, HAS_NUMBA

__version__ = "0.1.0"
__all__ = ["BACKEND", "HAS_NUMBA", "__version__"]
