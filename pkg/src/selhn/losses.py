"""The triplet-loss family over a batch similarity matrix, with exact gradients.

Conventions shared by every loss here:

* ``s`` is the B x B cosine-similarity matrix of a batch, ``s[i, j]`` the
  score of image i against text j. Positives are index-aligned: the diagonal
  holds the positive-pair scores.
* Each loss sums an image-to-text part (anchor = image i, negatives are the
  other texts in row i) and the symmetric text-to-image part (anchor =
  text i, negatives are the other images in column i).
* The hinge [x]+ = max(x, 0) is treated as inactive exactly at its kink:
  a term contributes gradient only when its argument is strictly positive.
* Hard-negative arg-max ties are broken toward the lowest index so that runs
  are bit-reproducible.

Every loss returns a LossResult carrying the scalar value, the dense gradient
d(value)/d(s), and a per-anchor MiningRecord. chain_to_embeddings turns the
similarity gradient into embedding gradients through s = V T^T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix

# Branch labels recorded per anchor and direction.
BRANCH_HN = "hn"                    # hard-negative hinge term
BRANCH_TRIPLET = "triplet"          # all-negatives term (selective mining only)
BRANCH_SEMI_HARD = "semi_hard"      # semi-hard restricted hinge term
BRANCH_CONTRASTIVE = "contrastive"  # raw hard-negative similarity term
BRANCH_INACTIVE = "inactive"        # no mining performed / nothing to mine

LOSS_IDS = ("triplet", "hn", "shn", "sct", "selhn")


@dataclass
class LossHyper:
    """Margin and (for selective mining) the no-mining threshold."""

    margin: float = 0.2
    epsilon: float = 0.01

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


@dataclass
class MiningRecord:
    """Per-anchor mining outcome for both retrieval directions.

    ``*_negative`` holds the chosen negative's index, or -1 when the loss
    used no single negative (all-negatives terms, empty semi-hard sets).
    ``*_delta_s`` is always |s_hard_negative - s_positive| with the
    unrestricted arg-max hard negative, the gradient-vanishing indicator,
    regardless of which negative the loss actually optimized.
    ``*_term`` is the anchor's contribution to the loss value.
    """

    i2t_negative: np.ndarray
    t2i_negative: np.ndarray
    i2t_branch: list[str]
    t2i_branch: list[str]
    i2t_delta_s: np.ndarray
    t2i_delta_s: np.ndarray
    i2t_term: np.ndarray
    t2i_term: np.ndarray


@dataclass
class LossResult:
    value: float
    d_s: np.ndarray
    mining: MiningRecord


def cosine_sim_matrix(v: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Similarity matrix V T^T of two unit-row embedding batches."""
    v = as_matrix(v, "v")
    t = as_matrix(t, "t")
    if v.shape != t.shape:
        raise ValueError(
            f"embedding batches must share shape, got {v.shape} vs {t.shape}")
    for name, x in (("v", v), ("t", t)):
        norms = np.linalg.norm(x, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-8):
            worst = np.argmax(np.abs(norms - 1.0))
            raise ValueError(
                f"{name} rows must be unit-norm; row {worst} has norm {norms[worst]!r}")
    return v @ t.T


def _check_batch(s: np.ndarray) -> np.ndarray:
    s = as_matrix(s, "s")
    if s.shape[0] != s.shape[1]:
        raise ValueError(f"similarity matrix must be square, got {s.shape}")
    if s.shape[0] < 2:
        raise ValueError("batch has no negatives (need B >= 2)")
    return s


def _masked_argmax(scores: np.ndarray, exclude: int,
                   allowed: np.ndarray | None = None) -> int:
    """Lowest-index arg-max over scores, skipping ``exclude`` and, when given,
    anything outside ``allowed``. Returns -1 if no candidate remains."""
    masked = scores.copy()
    masked[exclude] = -np.inf
    if allowed is not None:
        masked[~allowed] = -np.inf
    j = int(np.argmax(masked))  # first occurrence wins ties
    if masked[j] == -np.inf:
        return -1
    return j


def _hard_negatives(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unrestricted hard-negative indices per anchor: (i2t over rows, t2i
    over columns), lowest index on ties."""
    b = s.shape[0]
    off = s.copy()
    np.fill_diagonal(off, -np.inf)
    return np.argmax(off, axis=1), np.argmax(off, axis=0)


def _delta_s(s: np.ndarray, hn_i2t: np.ndarray, hn_t2i: np.ndarray):
    pos = np.diag(s)
    rows = np.arange(s.shape[0])
    d_i2t = np.abs(s[rows, hn_i2t] - pos)
    d_t2i = np.abs(s[hn_t2i, rows] - pos)
    return d_i2t, d_t2i


def _new_record(b: int) -> MiningRecord:
    return MiningRecord(
        i2t_negative=np.full(b, -1, dtype=np.int64),
        t2i_negative=np.full(b, -1, dtype=np.int64),
        i2t_branch=[BRANCH_INACTIVE] * b,
        t2i_branch=[BRANCH_INACTIVE] * b,
        i2t_delta_s=np.zeros(b),
        t2i_delta_s=np.zeros(b),
        i2t_term=np.zeros(b),
        t2i_term=np.zeros(b),
    )


def _base_record(s: np.ndarray) -> tuple[MiningRecord, np.ndarray, np.ndarray]:
    """Record pre-filled with hard negatives' delta-s; mining fields default."""
    rec = _new_record(s.shape[0])
    hn_i2t, hn_t2i = _hard_negatives(s)
    rec.i2t_delta_s, rec.t2i_delta_s = _delta_s(s, hn_i2t, hn_t2i)
    return rec, hn_i2t, hn_t2i


def triplet_loss(s: np.ndarray, h: LossHyper) -> LossResult:
    """Sum-over-all-negatives triplet loss, both directions, no 1/B factor.

    value = sum_i sum_{j != i} ([s_ij - s_ii + m]+ + [s_ji - s_ii + m]+).
    No mining happens, so every anchor's branch stays "inactive".
    """
    s = _check_batch(s)
    b = s.shape[0]
    pos = np.diag(s)
    off = ~np.eye(b, dtype=bool)

    act_i2t = (s - pos[:, None] + h.margin > 0) & off       # [i, j]: row-anchor
    act_t2i = (s.T - pos[:, None] + h.margin > 0) & off     # [i, j]: col-anchor i, image j

    terms_i2t = np.where(act_i2t, s - pos[:, None] + h.margin, 0.0).sum(axis=1)
    terms_t2i = np.where(act_t2i, s.T - pos[:, None] + h.margin, 0.0).sum(axis=1)
    value = float(terms_i2t.sum() + terms_t2i.sum())

    d_s = act_i2t.astype(np.float64) + act_t2i.T.astype(np.float64)
    np.fill_diagonal(d_s, -act_i2t.sum(axis=1) - act_t2i.sum(axis=1))

    rec, _, _ = _base_record(s)
    rec.i2t_term = terms_i2t
    rec.t2i_term = terms_t2i
    return LossResult(value, d_s, rec)


def hn_loss(s: np.ndarray, h: LossHyper) -> LossResult:
    """Triplet loss with hard-negative mining: one arg-max negative per anchor
    and direction, hinged against the positive."""
    s = _check_batch(s)
    b = s.shape[0]
    pos = np.diag(s)
    rows = np.arange(b)
    rec, hn_i2t, hn_t2i = _base_record(s)
    rec.i2t_negative, rec.t2i_negative = hn_i2t.copy(), hn_t2i.copy()
    rec.i2t_branch = [BRANCH_HN] * b
    rec.t2i_branch = [BRANCH_HN] * b

    d_s = np.zeros_like(s)
    arg_i2t = s[rows, hn_i2t] - pos + h.margin
    arg_t2i = s[hn_t2i, rows] - pos + h.margin
    rec.i2t_term = np.maximum(arg_i2t, 0.0)
    rec.t2i_term = np.maximum(arg_t2i, 0.0)
    for i in rows[arg_i2t > 0]:
        d_s[i, hn_i2t[i]] += 1.0
        d_s[i, i] -= 1.0
    for i in rows[arg_t2i > 0]:
        d_s[hn_t2i[i], i] += 1.0
        d_s[i, i] -= 1.0

    value = float(rec.i2t_term.sum() + rec.t2i_term.sum())
    return LossResult(value, d_s, rec)


def shn_loss(s: np.ndarray, h: LossHyper) -> LossResult:
    """Semi-hard mining: the arg-max is restricted to negatives scoring
    strictly below the positive; an empty restricted set contributes nothing
    and the anchor is marked inactive."""
    s = _check_batch(s)
    b = s.shape[0]
    pos = np.diag(s)
    rec, _, _ = _base_record(s)
    d_s = np.zeros_like(s)
    value = 0.0

    for i in range(b):
        j = _masked_argmax(s[i], i, allowed=s[i] < pos[i])
        if j >= 0:
            rec.i2t_negative[i] = j
            rec.i2t_branch[i] = BRANCH_SEMI_HARD
            arg = s[i, j] - pos[i] + h.margin
            if arg > 0:
                rec.i2t_term[i] = arg
                value += arg
                d_s[i, j] += 1.0
                d_s[i, i] -= 1.0
        j = _masked_argmax(s[:, i], i, allowed=s[:, i] < pos[i])
        if j >= 0:
            rec.t2i_negative[i] = j
            rec.t2i_branch[i] = BRANCH_SEMI_HARD
            arg = s[j, i] - pos[i] + h.margin
            if arg > 0:
                rec.t2i_term[i] = arg
                value += arg
                d_s[j, i] += 1.0
                d_s[i, i] -= 1.0

    return LossResult(float(value), d_s, rec)


def sct_loss(s: np.ndarray, h: LossHyper) -> LossResult:
    """Selectively contrastive mining: the hard-negative hinge while the hard
    negative still scores below the positive; once it does not (s_hn >= s_p),
    the term becomes the raw similarity s_hn itself, pushing only the negative
    down (gradient +1 there, none at the positive)."""
    s = _check_batch(s)
    b = s.shape[0]
    pos = np.diag(s)
    rows = np.arange(b)
    rec, hn_i2t, hn_t2i = _base_record(s)
    rec.i2t_negative, rec.t2i_negative = hn_i2t.copy(), hn_t2i.copy()
    d_s = np.zeros_like(s)
    value = 0.0

    for i in range(b):
        s_hn = s[i, hn_i2t[i]]
        if s_hn < pos[i]:
            rec.i2t_branch[i] = BRANCH_HN
            arg = s_hn - pos[i] + h.margin
            if arg > 0:
                rec.i2t_term[i] = arg
                value += arg
                d_s[i, hn_i2t[i]] += 1.0
                d_s[i, i] -= 1.0
        else:
            rec.i2t_branch[i] = BRANCH_CONTRASTIVE
            rec.i2t_term[i] = s_hn
            value += s_hn
            d_s[i, hn_i2t[i]] += 1.0
        s_hn = s[hn_t2i[i], i]
        if s_hn < pos[i]:
            rec.t2i_branch[i] = BRANCH_HN
            arg = s_hn - pos[i] + h.margin
            if arg > 0:
                rec.t2i_term[i] = arg
                value += arg
                d_s[hn_t2i[i], i] += 1.0
                d_s[i, i] -= 1.0
        else:
            rec.t2i_branch[i] = BRANCH_CONTRASTIVE
            rec.t2i_term[i] = s_hn
            value += s_hn
            d_s[hn_t2i[i], i] += 1.0

    return LossResult(float(value), d_s, rec)


def selhn_loss(s: np.ndarray, h: LossHyper) -> LossResult:
    """Selective hard-negative mining.

    Per anchor and direction: mine the hard negative and hinge against it
    when delta_s = |s_hn - s_p| exceeds the threshold; otherwise fall back to
    the all-negatives triplet term scaled by 1/B, which keeps gradients
    flowing exactly when hard-negative mining would make them vanish. The
    boundary delta_s == epsilon takes the non-mining branch.
    """
    s = _check_batch(s)
    b = s.shape[0]
    pos = np.diag(s)
    rows = np.arange(b)
    rec, hn_i2t, hn_t2i = _base_record(s)
    d_s = np.zeros_like(s)
    value = 0.0
    inv_b = 1.0 / b

    for i in range(b):
        if rec.i2t_delta_s[i] > h.epsilon:
            rec.i2t_branch[i] = BRANCH_HN
            rec.i2t_negative[i] = hn_i2t[i]
            arg = s[i, hn_i2t[i]] - pos[i] + h.margin
            if arg > 0:
                rec.i2t_term[i] = arg
                value += arg
                d_s[i, hn_i2t[i]] += 1.0
                d_s[i, i] -= 1.0
        else:
            rec.i2t_branch[i] = BRANCH_TRIPLET
            args = s[i] - pos[i] + h.margin
            args[i] = 0.0
            active = args > 0
            rec.i2t_term[i] = inv_b * args[active].sum()
            value += rec.i2t_term[i]
            d_s[i, active] += inv_b
            d_s[i, i] -= inv_b * active.sum()
        if rec.t2i_delta_s[i] > h.epsilon:
            rec.t2i_branch[i] = BRANCH_HN
            rec.t2i_negative[i] = hn_t2i[i]
            arg = s[hn_t2i[i], i] - pos[i] + h.margin
            if arg > 0:
                rec.t2i_term[i] = arg
                value += arg
                d_s[hn_t2i[i], i] += 1.0
                d_s[i, i] -= 1.0
        else:
            rec.t2i_branch[i] = BRANCH_TRIPLET
            args = s[:, i] - pos[i] + h.margin
            args[i] = 0.0
            active = args > 0
            rec.t2i_term[i] = inv_b * args[active].sum()
            value += rec.t2i_term[i]
            d_s[active, i] += inv_b
            d_s[i, i] -= inv_b * active.sum()

    return LossResult(float(value), d_s, rec)


LOSS_FNS = {
    "triplet": triplet_loss,
    "hn": hn_loss,
    "shn": shn_loss,
    "sct": sct_loss,
    "selhn": selhn_loss,
}


def loss_by_id(loss_id: str):
    try:
        return LOSS_FNS[loss_id]
    except KeyError:
        raise ValueError(
            f"unknown loss {loss_id!r}; expected one of {LOSS_IDS}") from None


def chain_to_embeddings(d_s: np.ndarray, v: np.ndarray,
                        t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain a similarity-matrix gradient back to the two embedding batches.

    With s = V T^T: dL/dV = d_s @ T and dL/dT = d_s^T @ V. A single active
    image-anchor hinge therefore sends t_hat - t into the anchor's image row.
    """
    d_s = as_matrix(d_s, "d_s")
    v = as_matrix(v, "v")
    t = as_matrix(t, "t")
    if d_s.shape != (v.shape[0], t.shape[0]) or v.shape[1] != t.shape[1]:
        raise ValueError(
            f"inconsistent shapes: d_s {d_s.shape}, v {v.shape}, t {t.shape}")
    return d_s @ t, d_s.T @ v
