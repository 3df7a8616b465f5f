"""Extremal point process and extreme statistics of a lattice field."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import ndimage

from .field import Field, centering_constant
from .lattice import DIM, Lattice4

QUAD_NODES = 41
QUAD_MAX_NODES = 1312
QUAD_TOL = 1e-6


class QuadratureError(ArithmeticError):
    pass


def _values(h) -> np.ndarray:
    if isinstance(h, Field):
        return h.values
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        side = round(h.size ** 0.25)
        if side**DIM != h.size:
            raise ValueError("flat field length is not a fourth power")
        h = h.reshape((side,) * DIM)
    if h.ndim != DIM or len(set(h.shape)) != 1:
        raise ValueError("field must be a 4D cube")
    return h


def _side(h: np.ndarray, N) -> int:
    n = h.shape[0] - 1
    if N is not None and N != n:
        raise ValueError(f"field has side {n}, not {N}")
    return n


@dataclass(frozen=True, eq=False)
class PointProcessSample:
    """Atoms ``(x/N, h_x - m_N)`` of the r-local extremal process."""

    vertices: np.ndarray  # (k, 4) integer sites
    heights: np.ndarray  # (k,) centred heights
    N: int
    r: int

    @property
    def positions(self) -> np.ndarray:
        return self.vertices / self.N

    def __len__(self) -> int:
        return len(self.heights)


def local_max_mask(h, r: int) -> np.ndarray:
    """Sites that equal the maximum over their l1 ball of radius ``r``
    within V_N (ties count)."""
    h = _values(h)
    footprint = ndimage.generate_binary_structure(DIM, 1)
    steps = min(int(r), DIM * (h.shape[0] - 1))
    m = h
    for _ in range(steps):
        # the l1 ball of radius r is the r-fold sum of the unit cross
        m = ndimage.maximum_filter(m, footprint=footprint, mode="constant", cval=-np.inf)
    return h == m


def extract_extremal_process(h, r: int, N: int | None = None) -> PointProcessSample:
    if r < 1:
        raise ValueError("radius must be at least 1")
    h = _values(h)
    N = _side(h, N)
    mask = local_max_mask(h, r)
    sites = np.argwhere(mask)
    return PointProcessSample(sites, h[mask] - centering_constant(N), N, int(r))


def level_set(h, lam: float, N: int | None = None) -> np.ndarray:
    """Sites with ``h_v >= m_N - lam`` as an ``(k, 4)`` array."""
    h = _values(h)
    N = _side(h, N)
    return np.argwhere(h >= centering_constant(N) - lam)


@dataclass(frozen=True)
class PairStatistic:
    value: float
    u: tuple[int, ...]
    v: tuple[int, ...]
    r: float
    N: int


def _pair_dist(a: np.ndarray, b: np.ndarray, norm: str) -> np.ndarray:
    d = np.abs(a - b)
    if norm == "linf":
        return d.max(axis=-1)
    if norm == "l2":
        return np.sqrt((d * d).sum(axis=-1))
    raise ValueError(f"unknown norm {norm!r}")


def pair_max(h, r: float, N: int | None = None, norm: str = "linf") -> PairStatistic | None:
    """Maximum of ``h_u + h_v`` over pairs with ``r <= |u - v| <= N/r``.

    Returns ``None`` when that window is empty (``r**2 > N``). Among equal
    sums the lexicographically smallest ``(u, v)`` with ``u < v`` wins.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    h = _values(h)
    N = _side(h, N)
    if r * r > N:
        return None
    flat = h.ravel()
    lat = Lattice4(N)
    coords = lat.all_coords()
    order = np.argsort(-flat, kind="stable")
    top = flat[order[0]]
    best = -np.inf
    best_pair = None
    for iu in order:
        hu = flat[iu]
        if hu + top < best:
            break
        d = _pair_dist(coords, coords[iu], norm)
        ok = (d >= r) & (d <= N / r)
        if not ok.any():
            continue
        cand = np.where(ok, flat, -np.inf)
        hv = cand.max()
        s = hu + hv
        if s < best:
            continue
        iv = int(np.flatnonzero(cand == hv)[0])
        pair = (min(iu, iv), max(iu, iv))
        if s > best or pair < best_pair:
            best, best_pair = s, pair
    if best_pair is None:
        return None
    u, v = (tuple(int(c) for c in coords[i]) for i in best_pair)
    return PairStatistic(float(best), u, v, float(r), N)


def top_ell_sum(h, ell: int) -> float:
    """Sum of the ``ell`` largest values over distinct sites."""
    flat = _values(h).ravel()
    if not 1 <= ell <= flat.size:
        raise ValueError(f"ell must be in [1, {flat.size}]")
    part = np.partition(flat, flat.size - ell)[flat.size - ell:]
    return float(np.sort(part).sum())


def top_ell_sums(h, ells) -> np.ndarray:
    flat = np.sort(_values(h).ravel())[::-1]
    cs = np.cumsum(flat)
    ells = np.asarray(ells)
    if np.any(ells < 1) or np.any(ells > flat.size):
        raise ValueError("ell out of range")
    return cs[ells - 1]


def derivative_martingale(h, N: int | None = None) -> float:
    """``sum_v (8 log N - π h_v)/√8 * exp(π h_v - 8 log N)``."""
    h = _values(h)
    N = _side(h, N)
    if N < 2:
        raise ValueError("N must be at least 2")
    lnN = math.log(N)
    flat = h.ravel()
    expo = math.pi * flat - 8.0 * lnN
    weight = (8.0 * lnN - math.pi * flat) / math.sqrt(8.0)
    safe = expo <= 700.0
    terms = np.empty_like(flat)
    terms[safe] = weight[safe] * np.exp(expo[safe])
    if not safe.all():
        w = weight[~safe]
        terms[~safe] = np.sign(w) * np.exp(np.log(np.abs(w)) + expo[~safe])
    return math.fsum(terms)


# --- test functions ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TestFunction:
    """Non-negative continuous ``f(x, h)`` on ``[0,1]^4 x R``, zero outside
    ``[lo, hi] x [hmin, hmax]``. ``func`` is vectorised: ``x`` has shape
    ``(..., 4)`` and ``h`` shape ``(...)``."""

    __test__ = False  # not a pytest class

    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hmin: float
    hmax: float
    lo: np.ndarray = field(default_factory=lambda: np.zeros(DIM))
    hi: np.ndarray = field(default_factory=lambda: np.ones(DIM))
    smooth: bool = True

    def __call__(self, x, h) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        inside = (h >= self.hmin) & (h <= self.hmax)
        inside &= np.all((x >= self.lo) & (x <= self.hi), axis=-1)
        out = np.where(inside, self.func(x, h), 0.0)
        return np.maximum(out, 0.0)


def _bump(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.zeros_like(u)
    m = np.abs(u) < 1
    out[m] = np.exp(1.0 - 1.0 / (1.0 - u[m] ** 2))
    return out


def bump_test_function(center: float = 0.0, half_width: float = 1.0,
                       amplitude: float = 1.0) -> TestFunction:
    """``amplitude * exp(1 - 1/(1 - s²))`` in ``s = (h - center)/half_width``,
    constant in space."""
    def func(x, h):
        return amplitude * _bump((h - center) / half_width)

    return TestFunction(func, center - half_width, center + half_width)


def standard_bump() -> TestFunction:
    """The bump used by the Dysonization experiment: height window
    ``[-1, 1]`` around ``m_N``, peak value 1, constant in space."""
    return bump_test_function(center=0.0, half_width=1.0, amplitude=1.0)


@dataclass(frozen=True, eq=False)
class SmoothedTestFunction:
    """``f_t(x, h) = -log E exp(-f(x, h + W_t - πt/2))``, ``W_t ~ N(0, t)``.

    Only heights inside the support of ``f`` contribute to ``1 - E[...]``,
    so that integral is taken over the support intersected with
    ``mean ± TAIL_SDS·√t`` by Gauss-Legendre quadrature. The node count
    starts at ``nodes`` and doubles until two successive values agree to
    ``tol``; the Gaussian mass outside the window is below 1e-22.
    """

    base: TestFunction
    t: float
    nodes: int = QUAD_NODES
    tol: float = QUAD_TOL

    TAIL_SDS = 10.0

    def _window(self, h):
        sd = math.sqrt(self.t)
        mean = h - math.pi * self.t / 2.0
        a = np.maximum(self.base.hmin, mean - self.TAIL_SDS * sd)
        b = np.minimum(self.base.hmax, mean + self.TAIL_SDS * sd)
        return mean, a, b

    def _mass(self, x, mean, a, b, n):
        z, w = leggauss(n)
        half = (b - a)[:, None] / 2.0
        s = (a + b)[:, None] / 2.0 + half * z
        sd = math.sqrt(self.t)
        dens = np.exp(-0.5 * ((s - mean[:, None]) / sd) ** 2) / (sd * math.sqrt(2.0 * math.pi))
        g = -np.expm1(-self.base(x[:, None, :], s))
        return np.sum(w * half * g * dens, axis=1)

    def __call__(self, x, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        shape = h.shape
        h = h.reshape(-1)
        x = np.broadcast_to(np.asarray(x, dtype=np.float64), shape + (DIM,)).reshape(-1, DIM)
        mean, a, b = self._window(h)
        out = np.zeros(h.shape)
        live = b > a
        if live.any():
            xl, ml, al, bl = x[live], mean[live], a[live], b[live]
            n = self.nodes
            prev = self._mass(xl, ml, al, bl, n)
            while True:
                n *= 2
                cur = self._mass(xl, ml, al, bl, n)
                if np.all(np.abs(cur - prev) <= self.tol):
                    break
                if n >= QUAD_MAX_NODES:
                    raise QuadratureError(
                        f"quadrature did not settle to {self.tol:g} with {n} nodes")
                prev = cur
            out[live] = -np.log1p(-np.minimum(cur, 1.0))
        return np.maximum(out, 0.0).reshape(shape)


def f_t_transform(f: TestFunction, t: float, nodes: int = QUAD_NODES) -> SmoothedTestFunction:
    if t <= 0:
        raise ValueError("t must be positive")
    return SmoothedTestFunction(f, float(t), nodes)


def laplace_functional(pp: PointProcessSample, f) -> tuple[float, float]:
    """``(<η, f>, exp(-<η, f>))``."""
    if len(pp) == 0:
        return 0.0, 1.0
    inner = float(np.sum(f(pp.positions, pp.heights)))
    return inner, math.exp(-inner)


# --- CSV ---------------------------------------------------------------------

CSV_HEADER = ["x1", "x2", "x3", "x4", "height"]


def write_point_process(pp: PointProcessSample, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for x, hgt in zip(pp.positions, pp.heights):
            w.writerow([f"{c:.12g}" for c in x] + [f"{hgt:.12g}"])


def read_point_process(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    data = np.array(rows[1:], dtype=np.float64).reshape(-1, 5)
    return data[:, :4], data[:, 4]
