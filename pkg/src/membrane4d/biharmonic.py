"""Precision operator of the 4D membrane model and linear solves with it.

The Hamiltonian is ``1/2 * sum_{w in Z^4} (Δh_w)^2`` with ``h = 0`` off V_N,
so the precision is ``A = LᵀL`` where ``L`` maps a zero-extended field on
V_N to its Laplacian on every site of Z^4 where that is non-zero, i.e. on
V_N and its outer l1-shell. Exterior rows make ``A`` differ from the
square of the Dirichlet Laplacian by a diagonal boundary term.

The Laplacian is the normalised one, ``Δh_v = (1/8) Σ_{u~v} (h_u - h_v)``,
under which ``G(x, x) ≈ (8/π²) log N``. The operator stores the integer
stencil ``B = 64 A`` (centre 72, axis neighbours -16, ...) together with
the scale ``1/64``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy import fft
from scipy.sparse.linalg import splu

from .lattice import DIM, Lattice4

log = logging.getLogger(__name__)

LAPLACIAN_CENTER = -8
PRECISION_SCALE = 1.0 / 64.0
GAMMA = 8.0 / np.pi**2

DENSE_MAX_N = 8
SPARSE_MAX_N = 12
MODES = ("dense", "sparse", "iterative")

_AXES = tuple(range(-DIM, 0))


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _padded_shape(lattice: Lattice4):
    return (lattice.side + 2,) * DIM


def exterior_row_mask(lattice: Lattice4) -> np.ndarray:
    """Sites of the padded grid ``[-1, N+1]^4`` where ``L`` has a non-zero row.

    These are V_N plus the exterior sites at l1 distance one from it.
    """
    m = lattice.side + 2
    c = np.arange(m)
    outside = (c == 0) | (c == m - 1)
    count = (
        outside[:, None, None, None].astype(int)
        + outside[None, :, None, None]
        + outside[None, None, :, None]
        + outside[None, None, None, :]
    )
    return count <= 1


def laplacian_matrix(lattice: Lattice4) -> sp.csr_matrix:
    """Integer Laplacian stencil (centre -8) from V_N to its non-zero rows.

    Rows follow the lexicographic order of :func:`exterior_row_mask`.
    """
    m = lattice.side
    vid = np.arange(lattice.vertex_count).reshape(lattice.shape)
    pid = np.full(_padded_shape(lattice), -1, dtype=np.int64)
    mask = exterior_row_mask(lattice)
    pid[mask] = np.arange(mask.sum())
    rows = [pid[(slice(1, -1),) * DIM].ravel()]
    cols = [vid.ravel()]
    vals = [np.full(vid.size, LAPLACIAN_CENTER, dtype=np.int64)]
    for ax in range(DIM):
        for shift in (0, 2):
            sl = [slice(1, -1)] * DIM
            sl[ax] = slice(shift, shift + m)
            rows.append(pid[tuple(sl)].ravel())
            cols.append(vid.ravel())
            vals.append(np.ones(vid.size, dtype=np.int64))
    L = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(int(mask.sum()), lattice.vertex_count),
    )
    return L.tocsr()


def laplacian_padded(h: np.ndarray) -> np.ndarray:
    """Integer-stencil Laplacian of a zero-extended field on the padded grid.

    ``h`` has shape ``(..., M, M, M, M)``; the result ``(..., M+2, ...)``.
    """
    m = h.shape[-1]
    g = np.zeros(h.shape[:-DIM] + (m + 2,) * DIM)
    inner = (Ellipsis,) + (slice(1, -1),) * DIM
    g[inner] = LAPLACIAN_CENTER * h
    for ax in range(DIM):
        for shift in (0, 2):
            sl = [slice(1, -1)] * DIM
            sl[ax] = slice(shift, shift + m)
            g[(Ellipsis,) + tuple(sl)] += h
    return g


def laplacian_adjoint(g: np.ndarray) -> np.ndarray:
    """Transpose of :func:`laplacian_padded` (padded grid back to V_N)."""
    m = g.shape[-1] - 2
    inner = (Ellipsis,) + (slice(1, -1),) * DIM
    out = LAPLACIAN_CENTER * g[inner]
    for ax in range(DIM):
        for shift in (0, 2):
            sl = [slice(1, -1)] * DIM
            sl[ax] = slice(shift, shift + m)
            out += g[(Ellipsis,) + tuple(sl)]
    return out


@dataclass(frozen=True, eq=False)
class PrecisionOperator:
    lattice: Lattice4
    stencil: sp.csr_matrix  # integer entries, A = scale * stencil
    scale: float = PRECISION_SCALE

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return (self.stencil * self.scale).tocsr()

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def apply(self, h: np.ndarray) -> np.ndarray:
        """Matrix-free ``A h``; the last axis (or last four) index V_N."""
        h = np.asarray(h, dtype=np.float64)
        flat = h.shape[-1] == self.lattice.vertex_count and h.shape[-DIM:] != self.lattice.shape
        grid = h.reshape(h.shape[:-1] + self.lattice.shape) if flat else h
        out = self.scale * laplacian_adjoint(laplacian_padded(grid))
        return out.reshape(h.shape)


def assemble_precision(lattice: Lattice4) -> PrecisionOperator:
    if lattice.N < 2:
        raise ValueError("N must be at least 2 so that V_N has an interior vertex")
    L = laplacian_matrix(lattice)
    B = (L.T @ L).tocsr()
    B.sort_indices()
    B.eliminate_zeros()
    return PrecisionOperator(lattice, B.astype(np.int64))


def write_matrix(op: PrecisionOperator, path) -> None:
    """Dump the integer stencil in MatrixMarket coordinate form (1-based)."""
    coo = op.stencil.tocoo()
    order = np.lexsort((coo.col, coo.row))
    n = op.lattice.vertex_count
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate integer general\n")
        fh.write(f"% membrane precision stencil, N={op.lattice.N}, A = stencil * {op.scale!r}\n")
        fh.write(f"{n} {n} {coo.nnz}\n")
        for i in order:
            fh.write(f"{coo.row[i] + 1} {coo.col[i] + 1} {coo.data[i]}\n")


def default_mode(N: int) -> str:
    if N <= DENSE_MAX_N:
        return "dense"
    if N <= SPARSE_MAX_N:
        return "sparse"
    return "iterative"


@dataclass(eq=False)
class SolverHandle:
    """Factorisation (or preconditioner) bound to one precision operator.

    Right-hand sides are arrays whose last axis indexes V_N, so a batch of
    fields is a ``(B, V)`` array.
    """

    op: PrecisionOperator
    mode: str
    tol: float = 1e-8
    maxiter: int | None = None
    _chol: np.ndarray | None = field(default=None, repr=False)
    _lu: object = field(default=None, repr=False)
    _eig: np.ndarray | None = field(default=None, repr=False)

    @property
    def lattice(self) -> Lattice4:
        return self.op.lattice

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        V = self.lattice.vertex_count
        if b.shape[-1] != V:
            raise ValueError(f"right-hand side must have last axis {V}")
        rows = b.reshape(-1, V)
        if self.mode == "dense":
            x = sla.cho_solve((self._chol, True), rows.T).T
        elif self.mode == "sparse":
            x = self._lu.solve(np.ascontiguousarray(rows.T)).T
        else:
            x = self._pcg(rows.reshape((-1,) + self.lattice.shape)).reshape(-1, V)
        return x.reshape(b.shape)

    def factor_transpose_solve(self, z) -> np.ndarray:
        """``C^{-T} z`` for the Cholesky factor ``A = C Cᵀ`` (dense mode)."""
        if self.mode != "dense":
            raise SolverError("transposed-factor solve needs the dense factor")
        z = np.asarray(z, dtype=np.float64)
        V = self.lattice.vertex_count
        x = sla.solve_triangular(self._chol, z.reshape(-1, V).T, lower=True, trans="T")
        return x.T.reshape(z.shape)

    def _precondition(self, r):
        y = fft.dstn(r, type=1, axes=_AXES, norm="ortho")
        y /= self._eig
        return fft.dstn(y, type=1, axes=_AXES, norm="ortho")

    def _pcg(self, b: np.ndarray) -> np.ndarray:
        # Preconditioner: square of the Dirichlet Laplacian, diagonal in the DST-I basis.
        maxiter = self.maxiter if self.maxiter is not None else 50 * self.lattice.N**2
        bnorm = np.sqrt(np.sum(b * b, axis=_AXES))
        done = bnorm == 0
        x = np.zeros_like(b)
        r = b.copy()
        z = self._precondition(r)
        p = z.copy()
        rz = np.sum(r * z, axis=_AXES)
        rnorm = bnorm.copy()
        expand = (Ellipsis,) + (None,) * DIM
        for it in range(1, maxiter + 1):
            if np.all(done):
                return x
            Ap = self.op.apply(p)
            pAp = np.sum(p * Ap, axis=_AXES)
            alpha = np.where(done, 0.0, rz / np.where(done, 1.0, pAp))
            x += alpha[expand] * p
            r -= alpha[expand] * Ap
            rnorm = np.sqrt(np.sum(r * r, axis=_AXES))
            done = done | (rnorm <= self.tol * bnorm)
            if np.all(done):
                return x
            z = self._precondition(r)
            rz_new = np.sum(r * z, axis=_AXES)
            beta = np.where(done, 0.0, rz_new / np.where(rz == 0, 1.0, rz))
            p = z + beta[expand] * p
            rz = rz_new
        worst = float(np.max(rnorm / np.where(bnorm == 0, 1.0, bnorm)))
        raise ConvergenceError(
            f"CG did not reach relative residual {self.tol:g} in {maxiter} iterations "
            f"(achieved {worst:.3e})",
            residual=worst,
            iterations=maxiter,
        )

    def green_column(self, v) -> np.ndarray:
        """Column ``A^{-1} e_v`` as a flat vector."""
        lat = self.lattice
        idx = lat.index(v) if np.ndim(v) else int(v)
        e = np.zeros(lat.vertex_count)
        e[idx] = 1.0
        return self.solve(e)

    def green_entry(self, u, v) -> float:
        lat = self.lattice
        return float(self.green_column(v)[lat.index(u)])

    def green_diag(self, batch: int = 64) -> np.ndarray:
        V = self.lattice.vertex_count
        if self.mode == "dense":
            cinv = sla.solve_triangular(self._chol, np.eye(V), lower=True)
            return np.einsum("ij,ij->j", cinv, cinv)
        out = np.empty(V)
        for start in range(0, V, batch):
            idx = np.arange(start, min(start + batch, V))
            e = np.zeros((idx.size, V))
            e[np.arange(idx.size), idx] = 1.0
            out[idx] = self.solve(e)[np.arange(idx.size), idx]
        return out


def make_solver(op: PrecisionOperator, mode: str | None = None, tol: float = 1e-8,
                maxiter: int | None = None) -> SolverHandle:
    mode = mode or default_mode(op.lattice.N)
    if mode not in MODES:
        raise ValueError(f"unknown solver mode {mode!r}")
    handle = SolverHandle(op, mode, tol=tol, maxiter=maxiter)
    if mode == "dense":
        try:
            handle._chol = np.linalg.cholesky(op.to_dense())
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"Cholesky factorisation failed: {exc}") from exc
    elif mode == "sparse":
        try:
            handle._lu = splu(op.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A",
                              diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise SolverError(f"sparse factorisation failed: {exc}") from exc
    else:
        m = op.lattice.side
        k = np.arange(1, m + 1)
        lam = (2.0 - 2.0 * np.cos(np.pi * k / (m + 1))) / 8.0
        s = (lam[:, None, None, None] + lam[None, :, None, None]
             + lam[None, None, :, None] + lam[None, None, None, :])
        handle._eig = s * s
    log.debug("built %s solver for N=%d", mode, op.lattice.N)
    return handle


def solve(handle: SolverHandle, b) -> np.ndarray:
    return handle.solve(b)


def green_diag(handle: SolverHandle) -> np.ndarray:
    return handle.green_diag()


def sub_box(lattice: Lattice4, corner, sites: int) -> np.ndarray:
    """Flat indices of the box ``corner + [0, sites)^4`` in lexicographic order."""
    corner = np.asarray(corner)
    if sites < 1 or np.any(corner < 0) or np.any(corner + sites - 1 > lattice.N):
        raise ValueError("sub-box does not fit inside the lattice")
    axes = [np.arange(c, c + sites) for c in corner]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, DIM)
    return lattice.index(grid)


@dataclass(frozen=True, eq=False)
class ConditionalOperators:
    """Blocks of ``A`` needed to condition on the field outside ``U``.

    ``boundary`` holds the vertices of V_N \\ U that couple to ``U``; by the
    range of the stencil these lie within graph distance 2 of ``U``.
    """

    U: np.ndarray
    boundary: np.ndarray
    A_UU: np.ndarray
    coupling: sp.csr_matrix
    _chol: np.ndarray = field(repr=False)

    def smooth(self, h) -> np.ndarray:
        """``-A_UU^{-1} A_{U,∂} h_∂`` for flat fields ``h`` (any leading axes)."""
        h = np.asarray(h, dtype=np.float64)
        lead = h.shape[:-1]
        hb = h.reshape(-1, h.shape[-1])[:, self.boundary]
        if self.boundary.size == 0:
            return np.zeros(lead + (self.U.size,))
        rhs = (self.coupling @ hb.T)
        out = -sla.cho_solve((self._chol, True), rhs).T
        return out.reshape(lead + (self.U.size,))

    def covariance(self) -> np.ndarray:
        return sla.cho_solve((self._chol, True), np.eye(self.U.size))


def conditional_operators(op: PrecisionOperator, U) -> ConditionalOperators:
    """Conditioning blocks for a vertex set ``U`` (flat indices or coordinates)."""
    U = np.asarray(U)
    if U.size == 0:
        raise ValueError("U must be non-empty")
    if U.ndim == 2:
        U = op.lattice.index(U)
    U = np.unique(U.astype(np.int64))
    A = op.matrix
    A_U = A[U]
    inside = np.zeros(op.lattice.vertex_count, dtype=bool)
    inside[U] = True
    cols = np.unique(A_U.indices)
    boundary = cols[~inside[cols]]
    A_UU = A_U[:, U].toarray()
    coupling = A_U[:, boundary].tocsr()
    return ConditionalOperators(U, boundary, A_UU, coupling, np.linalg.cholesky(A_UU))
