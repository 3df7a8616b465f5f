"""
A walk through the membrane model
=================================

Assemble the precision matrix, watch the centre variance grow like
``(8/pi^2) log N``, draw a field and read off its extremes. Runs in well
under a minute; everything is printed, nothing is plotted.
"""

# %%
import math

import numpy as np

from membrane4d.biharmonic import assemble_precision, make_solver
from membrane4d.extremes import (derivative_martingale, extract_extremal_process, level_set,
                                 pair_max, top_ell_sums)
from membrane4d.field import centering_constant, sample_membrane
from membrane4d.lattice import Lattice4
from membrane4d.rng import stream

# %% [markdown]
# The integer stencil is the square of the centre -8 Laplacian; the field's
# precision is that stencil divided by 64.

# %%
op = assemble_precision(Lattice4(4))
B = op.stencil.toarray()
print("diagonal", B[0, 0], "nearest neighbour", B[0, 1], "second neighbour", B[0, 2])

# %% [markdown]
# Centre variances from exact solves; successive differences approach
# ``(8/pi^2) ln 2 ~ 0.562``.

# %%
gamma = 8 / math.pi**2
prev = None
for N in (4, 8, 16):
    h = make_solver(assemble_precision(Lattice4(N)))
    g = h.green_entry((N // 2,) * 4, (N // 2,) * 4)
    step = "" if prev is None else f"  step {g - prev:.4f} (target {gamma * math.log(2):.4f})"
    print(f"N={N:3d}  G_centre={g:.4f}{step}")
    prev = g

# %% [markdown]
# One field at N = 8 and its extremal statistics.

# %%
N = 8
field = sample_membrane(make_solver(assemble_precision(Lattice4(N))), stream(1, 0))
h = field.values
pp = extract_extremal_process(h, 2)
print("max - m_N        ", round(h.max() - centering_constant(N), 4))
print("2-local maxima   ", len(pp))
print("|A_{N,2}|        ", len(level_set(h, 2.0)))
print("h_diamond (r=2)  ", round(pair_max(h, 2).value, 4))
print("S_l for l=1,2,4,8", np.round(top_ell_sums(h, [1, 2, 4, 8]), 4))
print("Z_N              ", round(derivative_martingale(h), 6))
