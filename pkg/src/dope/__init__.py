"""Debiased estimation of scalar functionals of neural-operator predictions."""

__version__ = "0.1.0"
