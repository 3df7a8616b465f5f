"""
Branching and modified branching random walks
=============================================

Closed-form covariances next to Monte Carlo estimates, and the maximum of
each model at a few depths.
"""

# %%
import numpy as np

from membrane4d.harness import jackknife_cov
from membrane4d.hierarchical import (DyadicDepth, brw_cov, mbrw_cov, sample_brw_batch,
                                     sample_mbrw_batch)
from membrane4d.rng import streams

# %% [markdown]
# MBRW covariance falls off like ``n - log2 |u - v|``; BRW depends on the
# deepest shared dyadic box and is not translation invariant.

# %%
d = DyadicDepth(3)
for t in range(5):
    v = (t, 0, 0, 0)
    print(f"|u-v|={t}  MBRW {mbrw_cov((0, 0, 0, 0), v, d):.4f}   "
          f"BRW from 0 {brw_cov((0, 0, 0, 0), v, d)}   BRW from 3 "
          f"{brw_cov((3, 0, 0, 0), ((3 + t) % 8, 0, 0, 0), d)}")

# %% [markdown]
# Monte Carlo check of one MBRW covariance, 4000 replicates.

# %%
x = sample_mbrw_batch(d, streams(0, range(4000)))
a, b = x[:, 0, 0, 0, 0], x[:, 2, 1, 0, 0]
est, se = jackknife_cov(a, b)
print(f"empirical {est:.3f} +/- {se:.3f}, exact {mbrw_cov((0, 0, 0, 0), (2, 1, 0, 0), d):.3f}")

# %% [markdown]
# Average maximum over 200 replicates; both grow linearly in the depth.

# %%
for n in (2, 3, 4):
    dn = DyadicDepth(n)
    for name, draw in (("BRW", sample_brw_batch), ("MBRW", sample_mbrw_batch)):
        m = np.array([draw(dn, streams(n, range(a, a + 50))).reshape(50, -1).max(axis=1)
                      for a in range(0, 200, 50)]).ravel()
        print(f"n={n} {name:4s} mean max {m.mean():.3f} +/- {m.std(ddof=1) / np.sqrt(m.size):.3f}")
