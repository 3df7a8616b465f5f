"""Membrane field samples, Gibbs-Markov splitting and Dysonization."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .biharmonic import (
    GAMMA,
    ConditionalOperators,
    SolverHandle,
    exterior_row_mask,
    laplacian_adjoint,
)
from .lattice import Lattice4
from .rng import Stream

PROVENANCES = ("membrane", "brw", "mbrw", "interpolated", "fine", "smooth")

MAGIC = b"MBR4"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_SEED = struct.Struct("<Q")


@dataclass(frozen=True, eq=False)
class Field:
    """One realisation of a real field on ``lattice``.

    ``values`` has shape ``lattice.shape`` and is read-only. ``seed`` is the
    64-bit stream key the sample was drawn from (0 when not applicable).
    """

    lattice: Lattice4
    values: np.ndarray
    provenance: str = "membrane"
    seed: int = 0

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        vals = np.array(self.values, dtype=np.float64).reshape(self.lattice.shape)
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def N(self) -> int:
        return self.lattice.N

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __getitem__(self, v):
        return self.values[tuple(v)]


def write_field(f: Field, path) -> None:
    """Binary layout: magic, u16 version, u32 N, float64 values, u64 seed,
    then one provenance byte (index into ``PROVENANCES``). Little endian."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, f.N))
        fh.write(np.ascontiguousarray(f.flat, dtype="<f8").tobytes())
        fh.write(_SEED.pack(f.seed & ((1 << 64) - 1)))
        fh.write(bytes([PROVENANCES.index(f.provenance)]))


def read_field(path) -> Field:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise ValueError(f"{path}: not an MBR4 field file")
    _, version, N = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    lat = Lattice4(N)
    n = lat.vertex_count * 8
    body = data[_HEADER.size:_HEADER.size + n]
    tail = data[_HEADER.size + n:]
    if len(body) != n or len(tail) < _SEED.size:
        raise ValueError(f"{path}: truncated field file")
    (seed,) = _SEED.unpack_from(tail)
    prov = PROVENANCES[tail[_SEED.size]] if len(tail) > _SEED.size else "membrane"
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return Field(lat, values, prov, seed)


def membrane_noise(handle: SolverHandle, gen: np.random.Generator) -> np.ndarray:
    """Standard normals consumed by one membrane sample in ``handle``'s mode."""
    lat = handle.lattice
    if handle.mode == "dense":
        return gen.standard_normal(lat.vertex_count)
    mask = exterior_row_mask(lat)
    return gen.standard_normal(int(mask.sum()))


def sample_membrane_batch(handle: SolverHandle, streams) -> np.ndarray:
    """Membrane samples for several streams, shape ``(B,) + lattice.shape``.

    Dense mode solves ``Cᵀ h = z`` with ``A = C Cᵀ``. The other modes
    spread white noise over the non-zero Laplacian rows, ``b = Lᵀ z``, and
    solve ``A h = b``; since ``A = LᵀL`` this has covariance ``A^{-1}``.
    """
    lat = handle.lattice
    z = np.stack([membrane_noise(handle, s.generator()) for s in streams])
    if handle.mode == "dense":
        h = handle.factor_transpose_solve(z)
        return h.reshape((len(streams),) + lat.shape)
    mask = exterior_row_mask(lat)
    g = np.zeros((len(streams),) + mask.shape)
    g[:, mask] = z
    # normalised Laplacian is the integer stencil over 8
    b = laplacian_adjoint(g) / 8.0
    h = handle.solve(b.reshape(len(streams), -1))
    return h.reshape((len(streams),) + lat.shape)


def sample_membrane(handle: SolverHandle, stream: Stream) -> Field:
    values = sample_membrane_batch(handle, [stream])[0]
    return Field(handle.lattice, values, "membrane", stream.key)


class GibbsMarkovParts(NamedTuple):
    smooth: np.ndarray
    fine: np.ndarray


def gibbs_markov_decompose(h, cond: ConditionalOperators) -> GibbsMarkovParts:
    """Split ``h`` on ``cond.U`` into the conditional mean given the outside
    (``smooth``) and the remainder (``fine``).

    ``h`` may be a :class:`Field` or an array of flat fields ``(..., V)``;
    both parts are indexed like ``cond.U``.
    """
    flat = h.flat if isinstance(h, Field) else np.asarray(h, dtype=np.float64)
    smooth = cond.smooth(flat)
    fine = flat[..., cond.U] - smooth
    return GibbsMarkovParts(smooth, fine)


@dataclass(frozen=True)
class DysonParams:
    t: float
    N: int
    g: float = GAMMA

    def __post_init__(self):
        if self.t < 0:
            raise ValueError("diffusion time must be non-negative")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.t >= self.g * math.log(self.N):
            raise ValueError(f"t={self.t} must be below g*log(N)={self.g * math.log(self.N):.6g}")

    @property
    def weights(self) -> tuple[float, float]:
        """Coefficients ``(a, b)`` with ``a² + b² = 1`` applied to ``(h1, h2)``."""
        s = self.t / (self.g * math.log(self.N))
        return math.sqrt(1.0 - s), math.sqrt(s)


def interpolate(h1, h2, p: DysonParams) -> np.ndarray:
    a, b = p.weights
    return a * np.asarray(h1, dtype=np.float64) + b * np.asarray(h2, dtype=np.float64)


def dysonize(h1: Field, h2: Field, p: DysonParams) -> Field:
    if h1.lattice != h2.lattice:
        raise ValueError("fields live on different lattices")
    if p.N != h1.N:
        raise ValueError("Dyson parameters are for a different N")
    return Field(h1.lattice, interpolate(h1.values, h2.values, p), "interpolated", h1.seed)


def centering_constant(N) -> float:
    """``(8/π) log N - (3/(2π)) log log N``, natural logs."""
    if N < 4:
        raise ValueError("centering constant needs N >= 4")
    ln = math.log(N)
    return 8.0 / math.pi * ln - 3.0 / (2.0 * math.pi) * math.log(ln)
