"""Gradient-vanishing diagnostics for hard-negative mining.

The core quantity is delta_s = |s_hard_negative - s_positive| per anchor.
When it approaches zero during hard-negative training, the tangent component
of the anchor-side embedding gradient shrinks with it and the two text-side
gradients cancel, so encoder training stalls. This module measures that:

* per-anchor delta_s (both directions) from a similarity matrix,
* the closed-form tangent-gradient moduli alongside exact tangent
  projections for a (v, t, t_hat) triple,
* the predicate deciding the "do not mine" regime,
* a finite-difference checker for the analytic loss gradients, with a kink
  guard that skips instead of failing when a hinge or mining decision sits
  too close to its boundary for central differences to be meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import losses
from .numerics import l2_normalize_rows, l2_normalize_vjp


class DeltaS(NamedTuple):
    i2t: np.ndarray
    t2i: np.ndarray


def delta_s_per_anchor(s: np.ndarray) -> DeltaS:
    """Per-anchor |s_hn - s_p| with unrestricted arg-max hard negatives."""
    s = losses._check_batch(s)
    hn_i2t, hn_t2i = losses._hard_negatives(s)
    d_i2t, d_t2i = losses._delta_s(s, hn_i2t, hn_t2i)
    return DeltaS(d_i2t, d_t2i)


def vanishing_predicate(delta_s: float, epsilon: float) -> bool:
    """True when the anchor sits in the vanishing-prone regime (delta_s <=
    epsilon), i.e. hard negatives should not be mined for it."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    return delta_s <= epsilon


@dataclass
class TangentReport:
    """Stated tangent-gradient moduli vs the exact projection for one triple.

    g_v_stated = ||t_hat - t|| * (v.t_hat - v.t) is kept signed (it goes
    negative when the hard negative scores below the positive); use
    g_v_stated_abs for the magnitude. g_v_exact is the norm of the true
    tangent component of (t_hat - t) at v, which equals the stated form only
    in special geometry; both are reported so the gap is measurable.
    """

    g_v_stated: float
    g_that_stated: float
    g_t_stated: float
    g_v_exact: float
    delta_s: float

    @property
    def g_v_stated_abs(self) -> float:
        return abs(self.g_v_stated)


def tangent_report(v: np.ndarray, t: np.ndarray,
                   t_hat: np.ndarray) -> TangentReport:
    """Diagnose the gradient geometry of one (anchor, positive, hard-negative)
    triple of unit vectors."""
    v, t, t_hat = (np.asarray(x, dtype=np.float64).ravel()
                   for x in (v, t, t_hat))
    for name, x in (("v", v), ("t", t), ("t_hat", t_hat)):
        n = np.linalg.norm(x)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"{name} must be unit-norm (got {n!r})")
    s_hat = float(v @ t_hat)
    s_pos = float(v @ t)
    g = t_hat - t
    tangent = g - (v @ g) * v
    return TangentReport(
        g_v_stated=float(np.linalg.norm(g) * (s_hat - s_pos)),
        g_that_stated=s_hat,
        g_t_stated=s_pos,
        g_v_exact=float(np.linalg.norm(tangent)),
        delta_s=abs(s_hat - s_pos),
    )


@dataclass
class VanishingReport:
    """Batch-level summary of the vanishing indicator."""

    delta_s_i2t: np.ndarray
    delta_s_t2i: np.ndarray
    first_layer_grad_norms: dict[str, float]

    @property
    def mean_delta_s(self) -> float:
        return float(np.concatenate([self.delta_s_i2t, self.delta_s_t2i]).mean())

    def fraction_below(self, epsilon: float) -> float:
        all_ds = np.concatenate([self.delta_s_i2t, self.delta_s_t2i])
        return float(np.mean(all_ds <= epsilon))


def first_layer_grad_norm(encoder_grads: dict[str, np.ndarray]) -> float:
    """Frobenius norm of the first linear layer's weight gradient."""
    return float(np.linalg.norm(encoder_grads["fc_w"]))


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    skipped: bool = False
    reason: str | None = None

    @property
    def passed(self) -> bool:
        return not self.skipped and self.max_rel_error < 1e-4


def kink_distance(loss_id: str, s: np.ndarray, h: losses.LossHyper) -> float:
    """Smallest distance (in similarity units) from any decision boundary the
    loss depends on: hinge kinks, arg-max ties, branch thresholds, and
    semi-hard set membership. Central differences are only trustworthy when
    this comfortably exceeds the step size."""
    b = s.shape[0]
    pos = np.diag(s)
    dist = np.inf
    for i in range(b):
        for direction in ("i2t", "t2i"):
            scores = s[i] if direction == "i2t" else s[:, i]
            negs = np.delete(scores, i)
            order = np.sort(negs)[::-1]
            s_hn = order[0]
            if loss_id in ("hn", "sct", "selhn") and len(order) > 1:
                dist = min(dist, order[0] - order[1])  # unrestricted arg-max tie
            if loss_id == "triplet":
                dist = min(dist, np.abs(negs - pos[i] + h.margin).min())
            elif loss_id == "hn":
                dist = min(dist, abs(s_hn - pos[i] + h.margin))
            elif loss_id == "shn":
                dist = min(dist, np.abs(negs - pos[i]).min())  # set membership
                semi = negs[negs < pos[i]]
                if semi.size:
                    sh = np.sort(semi)[::-1]
                    dist = min(dist, abs(sh[0] - pos[i] + h.margin))
                    if sh.size > 1:
                        dist = min(dist, sh[0] - sh[1])
            elif loss_id == "sct":
                dist = min(dist, abs(s_hn - pos[i]))  # branch boundary
                if s_hn < pos[i]:
                    dist = min(dist, abs(s_hn - pos[i] + h.margin))
            elif loss_id == "selhn":
                dist = min(dist, abs(abs(s_hn - pos[i]) - h.epsilon))
                if abs(s_hn - pos[i]) > h.epsilon:
                    dist = min(dist, abs(s_hn - pos[i] + h.margin))
                else:
                    dist = min(dist, np.abs(negs - pos[i] + h.margin).min())
    return float(dist)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest coordinate discrepancy relative to the gradient scale. Exact
    zeros on both sides give exactly zero."""
    scale = max(np.abs(analytic).max(initial=0.0),
                np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if diff == 0.0:
        return 0.0
    return float(diff / max(scale, 1e-12))


def finite_diff_check_params(img_state, txt_state, img_feats, txt_feats,
                             loss_id: str, h: losses.LossHyper,
                             step: float = 1e-6,
                             corrupt: bool = False) -> FiniteDiffReport:
    """Check analytic encoder-parameter gradients of the full pipeline
    (features -> encoders -> similarity -> loss) against central differences.

    Works on copies of the states, so callers' running statistics stay
    untouched. The error is relative to each encoder's whole gradient scale:
    parameters whose true gradient is exactly zero (e.g. bias shifts killed
    by a following batch norm) would otherwise compare FD noise against
    itself. ``corrupt`` deliberately damages one analytic entry, as a
    negative control that the comparison can fail.
    """
    from .encoders import encoder_backward, encoder_forward

    if not 1e-8 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-8, 1e-4], got {step}")
    loss_fn = losses.loss_by_id(loss_id)
    img_state = img_state.copy()
    txt_state = txt_state.copy()

    v, tape_v = encoder_forward(img_state, img_feats)
    t, tape_t = encoder_forward(txt_state, txt_feats)
    s = v @ t.T
    guard = kink_distance(loss_id, s, h)
    if guard < 10 * step:
        return FiniteDiffReport(max_rel_error=np.nan, skipped=True,
                                reason=f"kink within {guard:.2e} of boundary")

    res = loss_fn(s, h)
    d_v, d_t = losses.chain_to_embeddings(res.d_s, v, t)
    g_img = encoder_backward(img_state, tape_v, d_v)
    g_txt = encoder_backward(txt_state, tape_t, d_t)
    if corrupt:
        first = next(iter(g_img))
        scale = max(max(np.abs(g).max() for g in g_img.values()), 1.0)
        g_img[first].flat[0] += 0.05 * scale

    def emb(state, feats):
        out, _ = encoder_forward(state, feats)
        return out

    worst = 0.0
    for state, feats, grads, other_emb, is_img in (
            (img_state, img_feats, g_img, t, True),
            (txt_state, txt_feats, g_txt, v, False)):
        analytic_all, fd_all = [], []
        for name, _ in state.param_items():
            arr = state.tensors[name]
            fd = np.zeros_like(arr)
            flat = fd.ravel()
            for pos in range(arr.size):
                vals = []
                for delta in (step, -step):
                    st2 = state.copy()
                    st2.tensors[name].flat[pos] += delta
                    e = emb(st2, feats)
                    sim = e @ other_emb.T if is_img else other_emb @ e.T
                    vals.append(loss_fn(sim, h).value)
                flat[pos] = (vals[0] - vals[1]) / (2 * step)
            analytic_all.append(grads[name].ravel())
            fd_all.append(fd.ravel())
        worst = max(worst, max_rel_error(np.concatenate(analytic_all),
                                         np.concatenate(fd_all)))
    return FiniteDiffReport(max_rel_error=worst)


def finite_diff_check(loss_id: str, v_raw: np.ndarray, t_raw: np.ndarray,
                      h: losses.LossHyper, step: float = 1e-6) -> FiniteDiffReport:
    """Check the analytic loss gradient w.r.t. the raw (pre-normalization)
    embedding coordinates against central finite differences.

    The function differentiated is
    loss(normalize(v_raw) @ normalize(t_raw)^T), so the check exercises the
    loss gradient, the chain to embeddings, and the normalization backward
    together. Instances with a hinge or mining boundary within 10x the step
    are reported as skipped, not failed.
    """
    if not 1e-8 <= step <= 1e-4:
        raise ValueError(f"step must lie in [1e-8, 1e-4], got {step}")
    loss_fn = losses.loss_by_id(loss_id)
    v_raw = np.asarray(v_raw, dtype=np.float64)
    t_raw = np.asarray(t_raw, dtype=np.float64)

    def loss_value(vr, tr):
        v, _ = l2_normalize_rows(vr)
        t, _ = l2_normalize_rows(tr)
        return loss_fn(v @ t.T, h).value

    v, tape_v = l2_normalize_rows(v_raw)
    t, tape_t = l2_normalize_rows(t_raw)
    s = v @ t.T
    guard = kink_distance(loss_id, s, h)
    if guard < 10 * step:
        return FiniteDiffReport(max_rel_error=np.nan, skipped=True,
                                reason=f"kink within {guard:.2e} of boundary")

    res = loss_fn(s, h)
    d_v, d_t = losses.chain_to_embeddings(res.d_s, v, t)
    analytic_v = l2_normalize_vjp(d_v, tape_v)
    analytic_t = l2_normalize_vjp(d_t, tape_t)

    worst = 0.0
    for raw, analytic, side in ((v_raw, analytic_v, "v"), (t_raw, analytic_t, "t")):
        fd = np.zeros_like(raw)
        for i in range(raw.shape[0]):
            for j in range(raw.shape[1]):
                p, m = raw.copy(), raw.copy()
                p[i, j] += step
                m[i, j] -= step
                if side == "v":
                    fd[i, j] = (loss_value(p, t_raw) - loss_value(m, t_raw)) / (2 * step)
                else:
                    fd[i, j] = (loss_value(v_raw, p) - loss_value(v_raw, m)) / (2 * step)
        worst = max(worst, max_rel_error(analytic, fd))
    return FiniteDiffReport(max_rel_error=worst)
