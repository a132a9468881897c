"""Continual-learning fine-tuning lab for a tiny self-supervised sequence encoder.

Set ``CLFT_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
