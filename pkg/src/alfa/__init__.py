"""Disentangled three-extractor domain generalization on a small numpy
autodiff engine, with a leave-one-domain-out benchmark harness."""

__version__ = "0.1.0"
