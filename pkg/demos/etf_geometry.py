"""
The fixed simplex-ETF classifier
================================

Builds an equiangular prototype matrix, checks its Gram structure and shows
how cosine logits and predictions behave on the prototypes themselves.
"""

# %%
# Build a 5-class frame in 8 dimensions. Every column has unit length and
# every pair of columns meets at the same angle, cos = -1/(K-1).
import numpy as np

from eianet.etf import build_etf, logits, predict, validate_etf

etf = build_etf(K=5, d=8, seed=0)
E = etf.E.data
np.set_printoptions(precision=3, suppress=True)
print("Gram matrix E^T E:\n", E.T @ E)
print(validate_etf(etf))

# %%
# Feeding a prototype back in gives the largest logit to its own class and
# -1/(K-1), scaled, to all others.
print("logits of u^2:", logits(etf, E[:, 2:3].T).data.round(3))
print("predictions on all prototypes:", predict(etf, E.T))

# %%
# Predictions ignore feature scale, and a feature orthogonal to every
# prototype is a full tie, which resolves to class 0.
f = np.random.default_rng(1).standard_normal((4, 8))
assert np.array_equal(predict(etf, f), predict(etf, 7.5 * f))
orth = np.linalg.svd(E, full_matrices=True)[0][:, -1]
print("orthogonal feature ->", predict(etf, orth[None, :]))

# %%
# The matrix never changes during training: it is created without gradient
# tracking.
print("requires_grad:", etf.E.requires_grad)
