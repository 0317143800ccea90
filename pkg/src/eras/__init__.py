"""Unsupervised two-channel speech separation trained by reverberation as supervision.

Modules are kept import-light here so ``eras.cli`` can set BLAS thread limits
before numpy is loaded.
"""

__version__ = "0.1.0"
