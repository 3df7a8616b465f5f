"""Geometry of the box V_N = ([0, N] ∩ Z)^4.

Vertices are stored in lexicographic order with the last coordinate varying
fastest, so a field on ``Lattice4(N)`` is interchangeably a flat vector of
length ``(N+1)**4`` or an array of shape ``(N+1,)*4``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

DIM = 4


@dataclass(frozen=True)
class Lattice4:
    """The box V_N with side parameter ``N`` (``N + 1`` sites per axis)."""

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"side parameter must be a positive integer, got {self.N!r}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def side(self) -> int:
        return self.N + 1

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (self.side,) * DIM

    @property
    def vertex_count(self) -> int:
        return self.side**DIM

    @property
    def center(self) -> tuple[int, int, int, int]:
        c = self.N // 2
        return (c, c, c, c)

    def index(self, coords) -> np.ndarray | int:
        """Flat index of one vertex or of an ``(k, 4)`` array of vertices."""
        coords = np.asarray(coords)
        self._check(coords)
        idx = np.ravel_multi_index(tuple(np.moveaxis(coords, -1, 0)), self.shape)
        return int(idx) if np.ndim(idx) == 0 else idx

    def coords(self, index) -> np.ndarray:
        """Inverse of :meth:`index`; returns shape ``(4,)`` or ``(k, 4)``."""
        index = np.asarray(index)
        if np.any(index < 0) or np.any(index >= self.vertex_count):
            raise ValueError("vertex index out of range")
        return np.stack(np.unravel_index(index, self.shape), axis=-1)

    def all_coords(self) -> np.ndarray:
        return self.coords(np.arange(self.vertex_count))

    def contains(self, coords) -> np.ndarray | bool:
        coords = np.asarray(coords)
        inside = np.all((coords >= 0) & (coords <= self.N), axis=-1)
        return bool(inside) if np.ndim(inside) == 0 else inside

    def _check(self, coords):
        if coords.shape[-1] != DIM:
            raise ValueError(f"expected {DIM} coordinates, got shape {coords.shape}")
        if not np.all(self.contains(coords)):
            raise ValueError(f"coordinates outside [0, {self.N}]")


def wrapped_distances(u, v, N: int) -> np.ndarray:
    """Per-coordinate torus distances ``min(|d|, |d - N|, |d + N|)``.

    Works on any integer coordinates (they are reduced mod ``N`` first) and
    broadcasts over leading axes.
    """
    d = np.mod(np.asarray(u) - np.asarray(v), N)
    return np.minimum(d, N - d)


def torus_distance(u, v, N: int) -> tuple[tuple[int, ...], int]:
    """Wrapped coordinate distances ``t`` and their maximum ``d_inf``.

    Coordinates must lie in ``[0, N]``; ``N`` is identified with ``0``.
    """
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != (DIM,) or v.shape != (DIM,):
        raise ValueError("u and v must be single 4D vertices")
    if np.any(u < 0) or np.any(v < 0) or np.any(u > N) or np.any(v > N):
        raise ValueError(f"coordinates outside [0, {N}]")
    t = wrapped_distances(u, v, N)
    return tuple(int(x) for x in t), int(t.max())


def ball(x, r: int, norm: str = "l1", lattice: Lattice4 | None = None) -> np.ndarray:
    """Vertices ``z`` of the lattice with ``|z - x|_norm <= r``.

    With ``norm="l1"`` this is the neighbourhood used for r-local maxima.
    Returns an ``(k, 4)`` array sorted lexicographically.
    """
    if lattice is None:
        raise ValueError("a lattice is required")
    if r < 0:
        raise ValueError("radius must be non-negative")
    x = np.asarray(x)
    if not lattice.contains(x):
        raise ValueError("center outside the lattice")
    lo = np.maximum(x - r, 0)
    hi = np.minimum(x + r, lattice.N)
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, DIM)
    diff = np.abs(grid - x)
    if norm == "l1":
        keep = diff.sum(axis=1) <= r
    elif norm == "linf":
        keep = diff.max(axis=1) <= r
    else:
        raise ValueError(f"unknown norm {norm!r}")
    return grid[keep]


def l1_offsets(r: int) -> np.ndarray:
    """All integer offsets with l1 norm at most ``r``."""
    rng = np.arange(-r, r + 1)
    grid = np.stack(np.meshgrid(rng, rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, DIM)
    return grid[np.abs(grid).sum(axis=1) <= r]


def _as_sides(side) -> tuple[int, int, int, int]:
    if np.ndim(side) == 0:
        return (int(side),) * DIM
    sides = tuple(int(s) for s in side)
    if len(sides) != DIM:
        raise ValueError("side must be an integer or a 4-tuple")
    return sides


class PrefixSum4:
    """Summed-area table of a periodic 4D array.

    The grid is tiled to twice its length along each axis before
    accumulating, so every periodic box with side at most the grid length
    is a 16-term inclusion-exclusion on the table.
    """

    def __init__(self, grid):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != DIM:
            raise ValueError("PrefixSum4 needs a 4D array")
        self.shape = grid.shape
        ext = np.pad(grid, [(0, n) for n in grid.shape], mode="wrap")
        table = np.zeros(tuple(n + 1 for n in ext.shape))
        table[1:, 1:, 1:, 1:] = ext
        for ax in range(DIM):
            np.cumsum(table, axis=ax, out=table)
        self.table = table
        self.table.flags.writeable = False

    @property
    def N(self) -> int:
        return self.shape[0]

    def box_sum(self, corner, side) -> float:
        """Sum over the periodic box ``corner + [0, side)^4``."""
        sides = _as_sides(side)
        corner = np.asarray(corner)
        for s, n in zip(sides, self.shape):
            if not 1 <= s <= n:
                raise ValueError(f"box side {s} outside [1, {n}]")
        if np.any(corner < 0) or np.any(corner >= np.array(self.shape)):
            raise ValueError("corner outside the grid")
        total = 0.0
        for bits in itertools.product((0, 1), repeat=DIM):
            idx = tuple(int(c) + b * s for c, b, s in zip(corner, bits, sides))
            sign = -1.0 if (DIM - sum(bits)) % 2 else 1.0
            total += sign * self.table[idx]
        return float(total)

    def window_sums(self, side) -> np.ndarray:
        """Box sums for every corner of the grid at once."""
        sides = _as_sides(side)
        out = np.zeros(self.shape)
        for bits in itertools.product((0, 1), repeat=DIM):
            sl = tuple(slice(b * s, b * s + n) for b, s, n in zip(bits, sides, self.shape))
            sign = -1.0 if (DIM - sum(bits)) % 2 else 1.0
            out += sign * self.table[sl]
        return out


def box_sum(p: PrefixSum4, corner, side) -> float:
    return p.box_sum(corner, side)


def periodic_window_sums(grid: np.ndarray, side) -> np.ndarray:
    """Corner-anchored periodic box sums over the last four axes.

    Same result as :meth:`PrefixSum4.window_sums`, but done as one running
    sum per axis and vectorised over any leading batch axes.
    """
    sides = _as_sides(side)
    out = np.asarray(grid)
    if out.dtype != object:  # object arrays (e.g. Fractions) are summed exactly
        out = out.astype(np.float64)
    for ax, s in zip(range(out.ndim - DIM, out.ndim), sides):
        n = out.shape[ax]
        if not 1 <= s <= n:
            raise ValueError(f"box side {s} outside [1, {n}]")
        if s == 1:
            continue
        zero = np.zeros_like(np.take(out, [0], axis=ax))
        head = np.take(out, np.arange(s - 1), axis=ax)
        cs = np.cumsum(np.concatenate([zero, out, head], axis=ax), axis=ax)
        out = np.take(cs, np.arange(s, s + n), axis=ax) - np.take(cs, np.arange(n), axis=ax)
    return out
