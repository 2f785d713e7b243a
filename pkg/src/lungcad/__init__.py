"""Lung nodule detection, malignancy regression, and tumor-origin classification
on deterministic synthetic CT phantoms, built on numpy from first principles."""

__version__ = "0.1.0"
