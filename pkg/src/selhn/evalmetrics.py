"""Recall@K in both retrieval directions and their sum (RSUM).

Scores arrive as a full query x candidate table with images as rows: entry
[i, j] scores image i against text j. The image-to-text direction ranks each
row; text-to-image ranks each column (the transposed table). Ground truth is
a PairingMap, which supports several positives per query (e.g. five captions
per image). A query counts as a hit at K when any of its ground-truth matches
appears among the K highest-scoring candidates; ties rank the lower index
first so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DIRECTIONS = ("i2t", "t2i")
RSUM_KS = (1, 5, 10)


@dataclass
class PairingMap:
    """Ground-truth match sets per query, for both directions."""

    i2t: list[frozenset[int]]
    t2i: list[frozenset[int]]

    def __post_init__(self):
        for direction, sets in (("i2t", self.i2t), ("t2i", self.t2i)):
            for q, matches in enumerate(sets):
                if not matches:
                    raise ValueError(
                        f"{direction} query {q} has no ground-truth match")

    def for_direction(self, direction: str) -> list[frozenset[int]]:
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        return self.i2t if direction == "i2t" else self.t2i

    @classmethod
    def identity(cls, n: int) -> "PairingMap":
        """Index-aligned single positives (the training convention)."""
        sets = [frozenset([i]) for i in range(n)]
        return cls(sets, list(sets))

    @classmethod
    def grouped(cls, n_images: int, captions_per_image: int) -> "PairingMap":
        """Benchmark-style pairing: image i matches captions
        [i*c, (i+1)*c); caption j matches image j // c."""
        c = captions_per_image
        i2t = [frozenset(range(i * c, (i + 1) * c)) for i in range(n_images)]
        t2i = [frozenset([j // c]) for j in range(n_images * c)]
        return cls(i2t, t2i)


@dataclass
class RecallReport:
    r_at: dict[tuple[str, int], float]
    rsum: float

    def __str__(self) -> str:
        parts = []
        for direction in DIRECTIONS:
            vals = " ".join(f"R@{k}={self.r_at[(direction, k)]:.2f}"
                            for k in RSUM_KS)
            parts.append(f"{direction}: {vals}")
        return " | ".join(parts) + f" | rsum={self.rsum:.2f}"


def recall_at_k(scores: np.ndarray, pairing: PairingMap, k: int,
                direction: str) -> float:
    """Percentage of queries whose top-k candidates contain a ground truth.

    ``scores`` is always the image-row table; the t2i direction evaluates its
    transpose.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    table = scores if direction == "i2t" else scores.T
    matches = pairing.for_direction(direction)
    if len(matches) != table.shape[0]:
        raise ValueError(
            f"pairing has {len(matches)} queries, table has {table.shape[0]}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > table.shape[1]:
        raise ConfigError(
            f"k={k} exceeds candidate count {table.shape[1]}")
    # stable sort on negated scores: ties keep ascending index order
    top = np.argsort(-table, axis=1, kind="stable")[:, :k]
    hits = sum(1 for q in range(table.shape[0])
               if not matches[q].isdisjoint(top[q].tolist()))
    return 100.0 * hits / table.shape[0]


def rsum(scores: np.ndarray, pairing: PairingMap) -> RecallReport:
    """All six recalls (both directions, K in {1, 5, 10}) and their sum."""
    scores = np.asarray(scores, dtype=np.float64)
    for direction in DIRECTIONS:
        candidates = scores.shape[1] if direction == "i2t" else scores.shape[0]
        if candidates < max(RSUM_KS):
            raise ConfigError(
                f"{direction} has {candidates} candidates; R@10 needs >= 10")
    r_at = {(direction, k): recall_at_k(scores, pairing, k, direction)
            for direction in DIRECTIONS for k in RSUM_KS}
    return RecallReport(r_at=r_at, rsum=float(sum(r_at.values())))
