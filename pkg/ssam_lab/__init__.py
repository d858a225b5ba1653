"""Sparse SAM laboratory: SGD / SAM / SSAM kernels, sparse masks, diagnostics and theory checks."""

__version__ = "0.3.0"
