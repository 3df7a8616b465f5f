"""Branching random walk (BRW) and modified BRW (MBRW) on V_N, N = 2**n.

BRW: one unit Gaussian per level for the dyadic box containing a vertex.

MBRW: at level k every box of side 2**k (corners taken mod N, so boxes
wrap around the torus) carries an independent N(0, 2**(-4k)) variable, and
a vertex collects all boxes that contain it. Below the top level this is a
periodic window sum of the level's noise grid. At the top level a side-N
box covers the whole torus, which would add 1 to every covariance instead
of the closed-form factor ``prod(1 - t_i/N)``; the top level is therefore
sampled through the identity

    prod_i (1 - t_i/N) = 2**-4 * sum_{S ⊆ axes} prod_{i∈S} (1 - t_i/(N/2)),

i.e. sixteen independent fields, each a window sum of side N/2 along the
axes in S and constant along the others.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .lattice import DIM, Lattice4, periodic_window_sums, wrapped_distances

TOP_SUBSETS = tuple(
    s for k in range(DIM + 1) for s in itertools.combinations(range(DIM), k)
)

# 2*sqrt(2 log 2)/pi relates MBRW pair maxima to membrane ones at matching scale.
MBRW_MEMBRANE_RATIO = 2.0 * np.sqrt(2.0 * np.log(2.0)) / np.pi


@dataclass(frozen=True)
class DyadicDepth:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("depth must be an integer >= 1")

    @property
    def N(self) -> int:
        return 2**self.n

    @property
    def lattice(self) -> Lattice4:
        return Lattice4(self.N)


# --- BRW -------------------------------------------------------------------

def brw_noise(depth: DyadicDepth, gen: np.random.Generator) -> list[np.ndarray]:
    """Level-k arrays of unit Gaussians, one entry per dyadic box meeting V_N."""
    N = depth.N
    return [gen.standard_normal((N // 2**k + 1,) * DIM) for k in range(depth.n + 1)]


def brw_from_noise(depth: DyadicDepth, noise) -> np.ndarray:
    coords = np.arange(depth.N + 1)
    out = np.zeros(depth.lattice.shape)
    for k, a in enumerate(noise):
        box = coords // 2**k
        out += a[np.ix_(box, box, box, box)]
    return out


def sample_brw_batch(depth: DyadicDepth, streams) -> np.ndarray:
    return np.stack([brw_from_noise(depth, brw_noise(depth, s.generator())) for s in streams])


def sample_brw(depth: DyadicDepth, stream):
    from .field import Field
    return Field(depth.lattice, sample_brw_batch(depth, [stream])[0], "brw", stream.key)


def brw_cov(u, v, depth: DyadicDepth) -> int:
    """Number of levels at which ``u`` and ``v`` share a dyadic box."""
    u = np.asarray(u)
    v = np.asarray(v)
    return sum(
        int(np.array_equal(u // 2**k, v // 2**k)) for k in range(depth.n + 1)
    )


# --- MBRW ------------------------------------------------------------------

def mbrw_noise(depth: DyadicDepth, gen: np.random.Generator) -> list[np.ndarray]:
    """Unit-variance noise grids in the order the sampler consumes them.

    Levels ``0..n-1`` get one ``(N,)*4`` grid each; the top level gets one
    grid per axis subset ``S`` (in :data:`TOP_SUBSETS` order) with length N
    along ``S`` and length 1 elsewhere.
    """
    N = depth.N
    grids = [gen.standard_normal((N,) * DIM) for _ in range(depth.n)]
    for S in TOP_SUBSETS:
        shape = tuple(N if ax in S else 1 for ax in range(DIM))
        grids.append(gen.standard_normal(shape))
    return grids


def _top_scale(depth: DyadicDepth, S) -> float:
    half = depth.N // 2
    return 1.0 / np.sqrt(16.0 * float(half) ** len(S))


def _weight(w: float, grid: np.ndarray):
    # exact rational weight for object (Fraction) grids; floats pass through
    return Fraction(w) if grid.dtype == object else w


def _window_field(grid: np.ndarray, sides) -> np.ndarray:
    """Sum over all periodic boxes containing each site (box anchored at
    ``v - side + 1``), vectorised over leading axes."""
    w = periodic_window_sums(grid, sides)
    shifts = tuple(s - 1 for s in sides)
    return np.roll(w, shifts, axis=tuple(range(-DIM, 0)))


def _double(x: np.ndarray, s: int, axes) -> np.ndarray:
    """Apply ``x(v) + x(v - s)`` (periodic) along each of ``axes``."""
    for ax in axes:
        x = x + np.roll(x, s, axis=ax)
    return x


def mbrw_from_noise(depth: DyadicDepth, noise) -> np.ndarray:
    """Torus field ``(..., N, N, N, N)`` from the grids of :func:`mbrw_noise`.

    A side-``2**k`` window is the composition of the doubling steps for
    ``s = 1, 2, ..., 2**(k-1)``, so all levels share one nested chain
    (Horner form); level ``k`` enters with weight ``2**(-2k)``, i.e. each
    step outward divides by 4. Grids may carry leading batch axes.
    """
    n = depth.n
    full_axes = tuple(range(-DIM, 0))
    top = dict(zip(TOP_SUBSETS, noise[n:]))
    everything = tuple(range(DIM))
    acc = top[everything] * (_top_scale(depth, everything) * 4.0 ** (n - 1))
    if n > 0:
        acc += noise[n - 1]
    for j in range(n - 2, -1, -1):
        acc = _double(acc, 2**j, full_axes)
        acc *= 0.25
        acc += noise[j]
    for S, grid in top.items():
        if len(S) == DIM:
            continue
        part = grid * _top_scale(depth, S)
        for j in range(n - 1):
            part = _double(part, 2**j, tuple(ax - DIM for ax in S))
        acc = acc + part
    return acc


def mbrw_from_noise_windows(depth: DyadicDepth, noise) -> np.ndarray:
    """Same field as :func:`mbrw_from_noise`, one periodic window sum per level."""
    N, n = depth.N, depth.n
    half = N // 2
    out = 0
    for k in range(n):
        s = 2**k
        out = out + _window_field(noise[k], (s,) * DIM) * _weight(2.0 ** (-2 * k), noise[k])
    for S, grid in zip(TOP_SUBSETS, noise[n:]):
        sides = tuple(half if ax in S else 1 for ax in range(DIM))
        out = out + _window_field(grid, sides) * _weight(_top_scale(depth, S), grid)
    return out


def mbrw_from_noise_bruteforce(depth: DyadicDepth, noise) -> np.ndarray:
    """Reference implementation: explicit loop over every box containing each site.

    Works on float grids and, exactly, on object grids of ``Fraction``.
    """
    N, n = depth.N, depth.n
    half = N // 2
    out = np.zeros((N,) * DIM, dtype=noise[0].dtype if noise[0].dtype == object else float)
    for v in itertools.product(range(N), repeat=DIM):
        total = 0
        for k in range(n):
            s = 2**k
            w = _weight(2.0 ** (-2 * k), noise[k])
            for off in itertools.product(range(s), repeat=DIM):
                c = tuple((vi - oi) % N for vi, oi in zip(v, off))
                total += noise[k][c] * w
        for S, grid in zip(TOP_SUBSETS, noise[n:]):
            ranges = [range(half) if ax in S else range(1) for ax in range(DIM)]
            acc = 0
            for off in itertools.product(*ranges):
                c = tuple((v[ax] - off[ax]) % N if ax in S else 0 for ax in range(DIM))
                acc += grid[c]
            total += acc * _weight(_top_scale(depth, S), grid)
        out[v] = total
    return out


def torus_to_box(torus: np.ndarray) -> np.ndarray:
    """Extend an ``(..., N, N, N, N)`` torus field to V_N (site N is site 0)."""
    pad = [(0, 0)] * (torus.ndim - DIM) + [(0, 1)] * DIM
    return np.pad(torus, pad, mode="wrap")


def sample_mbrw_batch(depth: DyadicDepth, streams) -> np.ndarray:
    shapes = [g.shape for g in mbrw_noise(depth, _ShapeOnly())]
    grids = [np.empty((len(streams),) + shape) for shape in shapes]
    for i, s in enumerate(streams):
        gen = s.generator()
        for g in grids:
            gen.standard_normal(out=g[i])
    return torus_to_box(mbrw_from_noise(depth, grids))


class _ShapeOnly:
    """Stand-in generator that only records requested shapes."""

    def standard_normal(self, shape):
        return np.empty(shape, dtype=np.uint8)


def sample_mbrw(depth: DyadicDepth, stream):
    from .field import Field
    return Field(depth.lattice, sample_mbrw_batch(depth, [stream])[0], "mbrw", stream.key)


def ceil_log2(d: int) -> int:
    """``ceil(log2 d)`` for ``d >= 1``; 0 for ``d == 0``."""
    return 0 if d <= 1 else int(d - 1).bit_length()


def mbrw_cov(u, v, depth: DyadicDepth) -> float:
    t = wrapped_distances(u, v, depth.N)
    d = int(t.max())
    total = 0.0
    for k in range(ceil_log2(d), depth.n + 1):
        total += float(np.prod(1.0 - t / 2.0**k))
    return total
