"""
Comparing representations with CKA, UCKA and D-MNN
==================================================

A short tour of the similarity measures used as alignment losses.
"""

import numpy as np

from partswap import autodiff as ad
from partswap.similarity import MetricSpec, dmnn_conditionals, dmnn_dissimilarity, linear_cka, mnn_overlap, ucka

rng = np.random.default_rng(0)

# two activation matrices: 32 samples, one a noisy linear image of the other
A = rng.normal(size=(32, 16))
B = A @ rng.normal(size=(16, 8)) + 0.5 * rng.normal(size=(32, 8))
C = rng.normal(size=(32, 8))  # unrelated

print("CKA(A, A)      ", linear_cka(A, A).item())
print("CKA(A, B)      ", round(linear_cka(A, B).item(), 4))
print("CKA(A, random) ", round(linear_cka(A, C).item(), 4))

# The biased estimator reports sizeable similarity even for independent
# activations when the feature dimension is large relative to the batch.
# The unbiased estimator removes that offset.
wide = [(rng.normal(size=(16, 256)), rng.normal(size=(16, 256))) for _ in range(50)]
print("mean CKA  of independent pairs", round(np.mean([linear_cka(x, y).item() for x, y in wide]), 3))
print("mean UCKA of independent pairs", round(np.mean([ucka(x, y).item() for x, y in wide]), 3))

# %%
# Neighbourhood agreement
# -----------------------
# mnn_overlap counts shared k-nearest neighbours. The differentiable version
# compares softmax-weighted neighbourhoods; as the temperature grows the
# weights flatten to uniform over each top-k set and k * sum(P Q) recovers the
# overlap exactly.
k = 4
print("kNN overlap A vs B", round(mnn_overlap(A, B, k), 4))
for tau in (0.01, 1.0, 100.0, 1e6):
    spec = MetricSpec("dmnn", k=k, tau=tau)
    with ad.no_grad():
        P = dmnn_conditionals(A, spec).P.data
        Q = dmnn_conditionals(B, spec).P.data
    print(f"tau={tau:<8g} k*mean_i sum_j P_ij Q_ij = {k * (P * Q).sum(axis=1).mean():.4f}"
          f"   KL loss = {dmnn_dissimilarity(A, B, spec).item():.4f}")
