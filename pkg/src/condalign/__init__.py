"""Regularized conditional alignment for unsupervised domain adaptation.

A numpy implementation: tape autodiff, MLP encoder with class and joint
heads, the combined objective with entropy and VAT regularizers, the
alternating trainer, toy datasets, executable versions of the alignment
analysis, and an experiment CLI.
"""

__version__ = "0.1.0"
