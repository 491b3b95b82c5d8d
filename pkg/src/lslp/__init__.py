"""Few-shot segmentation with location-sensitive local prototypes.

Support images are encoded into feature maps, masked-average-pooled into
per-class prototypes restricted to overlapping image grids, and query
pixels are labeled by the max cosine similarity over the grids covering
them. Everything runs on a small numpy-backed reverse-mode tape so the
whole pipeline is trainable end to end and deterministic from a seed.
"""

__version__ = "0.1.0"
