"""Continual multiple-instance learning with grouped double attention,
bag-prototype pseudo-labels and orthogonal low-rank adapters."""

__version__ = "0.1.0"
