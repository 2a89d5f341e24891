"""Semi-supervised learning under feature-distribution mismatch, on synthetic glyphs.

Pseudo-labels for unlabeled data come from a copy of the shared encoder
that first takes one self-supervised step on the unlabeled batch.
"""

__version__ = "0.1.0"
