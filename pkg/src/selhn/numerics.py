"""Dense-matrix kernel used by everything downstream.

Matrices are 2-D float64 numpy arrays throughout. All operations are pure
functions of their inputs and deterministic: the same inputs give the same
bits on the same platform, which is what makes metrics CSVs byte-reproducible.

Gradients are hand-derived everywhere in this package; there is no autodiff.
The one backward rule that lives here is the vector-Jacobian product of
row-wise L2 normalization, since every encoder ends with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRowError

# Rows with L2 norm below this cannot be normalized meaningfully.
MIN_ROW_NORM = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


@dataclass
class NormalizeTape:
    """Forward record of l2_normalize_rows, consumed by l2_normalize_vjp.

    input_norms holds the per-row L2 norms of the raw input; normalized is
    the unit-row output.
    """

    input_norms: np.ndarray
    normalized: np.ndarray


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, NormalizeTape]:
    """Scale each row of x to unit L2 norm.

    Raises DegenerateRowError for rows with norm below MIN_ROW_NORM rather
    than emitting NaN: a collapsing encoder should fail loudly here.
    """
    x = as_matrix(x, "x")
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(~(norms >= MIN_ROW_NORM))  # also catches NaN norms
    if bad.size:
        raise DegenerateRowError(
            f"row {bad[0]} has norm {norms[bad[0]]:.3e} < {MIN_ROW_NORM:.0e}; "
            "cannot L2-normalize")
    y = x / norms[:, None]
    return y, NormalizeTape(input_norms=norms, normalized=y)


def l2_normalize_vjp(d_out: np.ndarray, tape: NormalizeTape) -> np.ndarray:
    """Backward of l2_normalize_rows.

    Per row: d_in = (d_out - y * (y . d_out)) / ||x||, with y the unit output
    row. The radial component of d_out is projected away; only the tangent
    part survives, scaled by the inverse input norm.
    """
    d_out = as_matrix(d_out, "d_out")
    y = tape.normalized
    if d_out.shape != y.shape:
        raise ValueError(
            f"d_out shape {d_out.shape} does not match tape shape {y.shape}")
    radial = np.sum(y * d_out, axis=1, keepdims=True)
    return (d_out - y * radial) / tape.input_norms[:, None]


def gaussian(rows: int, cols: int, seed: int) -> np.ndarray:
    """Seeded i.i.d. standard-normal matrix.

    Uses numpy's PCG64 generator; the same seed gives bit-identical output.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"gaussian needs rows, cols >= 1, got {rows}x{cols}")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((rows, cols))
