"""Triplet-loss family for two-modality embedding matching.

Losses over a batch similarity matrix (plain triplet, hard-negative,
semi-hard, selectively contrastive, selectively hard-negative), manual
backprop encoders over pre-extracted feature sets, gradient-vanishing
diagnostics, and Recall@K / RSUM retrieval evaluation. See README.md for the
CLI and the demo scripts under demos/.
"""

__version__ = "0.1.0"
