"""Metric learning and retrieval evaluation on precomputed image features.

SubCenter ArcFace with per-class dynamic margins on top of a BN-Dropout-FC
head, two-group Adam training, PCA / average-pooling reduction to 64-d, and
exact kNN retrieval scored with mAP.
"""

__version__ = "0.1.0"
