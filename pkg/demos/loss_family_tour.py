"""Tour of the five batch losses on one small similarity matrix.

Builds a 4x4 cosine-similarity matrix with an easy anchor, a hard-negative
anchor, and a near-tie anchor, then shows what each loss computes: value,
which entries of the gradient are touched, and the per-anchor mining record.
"""

import numpy as np

from selhn.losses import LOSS_IDS, LossHyper, loss_by_id

np.set_printoptions(precision=3, suppress=True)

# rows = images, cols = texts, diagonal = positive pairs
S = np.array([
    [0.80, 0.10, 0.20, 0.15],   # easy: positive well ahead
    [0.40, 0.45, 0.70, 0.30],   # hard negative outranks the positive
    [0.05, 0.20, 0.52, 0.51],   # near-tie: delta-s below 0.02
    [0.30, 0.25, 0.10, 0.60],
])
hyper = LossHyper(margin=0.2, epsilon=0.02)

print("similarity matrix S (diagonal = positives):")
print(S)
print(f"\nmargin = {hyper.margin}, epsilon = {hyper.epsilon}\n")

for loss_id in LOSS_IDS:
    res = loss_by_id(loss_id)(S, hyper)
    rec = res.mining
    print(f"--- {loss_id}: value = {res.value:.4f}")
    print("dL/dS:")
    print(res.d_s)
    for i in range(S.shape[0]):
        neg = rec.i2t_negative[i]
        print(f"  anchor {i} (i2t): branch={rec.i2t_branch[i]:<11} "
              f"negative={'-' if neg < 0 else neg}  "
              f"delta_s={rec.i2t_delta_s[i]:.3f}  term={rec.i2t_term[i]:.4f}")
    print()

print("Things to notice:")
print(" * anchor 1: every mining loss picks text 2 (score 0.70 vs positive 0.45);")
print("   sct switches to its contrastive branch because the negative outranks")
print("   the positive, so only the negative is pushed, not the positive pulled.")
print(" * anchor 2: delta_s = 0.01 <= epsilon, so selhn refuses to mine and")
print("   falls back to the all-negatives term scaled by 1/B.")
print(" * shn skips anchors whose negatives all outrank the positive (empty")
print("   semi-hard set on anchor 1 in the t2i direction).")
