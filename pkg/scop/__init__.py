"""SCOP filter pruning

Structured filter pruning with a knockoff scientific control, built on a
small numpy reverse-mode autodiff core.
"""

__version__ = "1.0.0"
