"""The seven training objectives on hand-sized inputs.

    python demos/losses_tour.py
"""

import numpy as np

from alfa.losses import (
    COMPONENTS,
    LossWeights,
    classification_loss,
    cov_loss,
    kl_divergence,
    mine_semi_hard,
    soft_class_label,
    specific_loss,
    ssl_triplet_loss,
    total_loss,
)
from alfa.tensor import Tensor

print("KL([1,0] || [.5,.5]) =", kl_divergence([1.0, 0.0], [0.5, 0.5]).item(), "(log 2)")

# anchor at the origin, positive at distance 1, negative at 1.2, margin 1.5
a, p, n = Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]), Tensor([[1.2, 0.0]])
print("triplet loss =", ssl_triplet_loss(a, p, n, 1.5).item())

# semi-hard mining picks the closest negative farther than the positive
points = np.array([[0.0, 0.0], [0.4, 0.0], [0.5, 0.0], [0.9, 0.0], [3.0, 0.0]])
print("mined (anchor, positive, negative):", mine_semi_hard(points, [0, 0, 1, 2, 3], 0.7, pairs=[(0, 1)]).tolist())

print("soft label for class 0 of 3:", soft_class_label(0, 3, 0.9).round(6))
print("domain loss, uniform logits over 4 domains =", specific_loss(Tensor(np.zeros((2, 4))), [0, 3]).item())
print("class loss, uniform logits over 2 classes =", classification_loss(Tensor(np.zeros((2, 2))), [0, 1]).item())

z = Tensor([[1.0], [-1.0]])
print("cross-covariance penalty of [1,-1] with itself =", cov_loss(z, z).item())

components = {c: Tensor([0.1 * (i + 1)]) for i, c in enumerate(COMPONENTS)}
total, report = total_loss(components, LossWeights())
print("unit-weighted total =", report.total)
