import itertools

import numpy as np
import pytest
import scipy.sparse as sp

from membrane4d.biharmonic import (
    GAMMA,
    ConvergenceError,
    exterior_row_mask,
    assemble_precision,
    conditional_operators,
    default_mode,
    green_diag,
    laplacian_matrix,
    make_solver,
    solve,
    sub_box,
    write_matrix,
)
from membrane4d.lattice import Lattice4

NEIGHBOURS = [tuple(s * (i == a) for i in range(4)) for a in range(4) for s in (1, -1)]


@pytest.fixture(scope="module")
def B8():
    return assemble_precision(Lattice4(8)).stencil


@pytest.fixture(scope="module")
def box8():
    op = assemble_precision(Lattice4(8))
    U = sub_box(op.lattice, (3, 3, 3, 3), 3)
    return op, U, conditional_operators(op, U)


def stencil_oracle(N):
    """Dense integer LᵀL built from explicit loops over every padded site."""
    lat = Lattice4(N)
    span = range(-1, N + 2)
    L = np.zeros(((N + 3) ** 4, lat.vertex_count), dtype=np.int64)
    for row, w in enumerate(itertools.product(span, repeat=4)):
        if lat.contains(w):
            L[row, lat.index(w)] -= 8
        for e in NEIGHBOURS:
            u = tuple(a + b for a, b in zip(w, e))
            if lat.contains(u):
                L[row, lat.index(u)] += 1
    return L.T @ L


def _inner_rows(lat):
    """Row numbers of L that sit on V_N itself (not the exterior shell)."""
    mask = exterior_row_mask(lat)
    pid = np.full(mask.shape, -1)
    pid[mask] = np.arange(mask.sum())
    return pid[(slice(1, -1),) * 4].ravel()


def test_precision_matches_stencil_oracle():
    op = assemble_precision(Lattice4(4))
    B = op.stencil.toarray()
    assert B.dtype.kind == "i"
    assert np.array_equal(B, stencil_oracle(4))


@pytest.mark.parametrize("N", [2, 3])
def test_small_lattices_match_oracle(N):
    assert np.array_equal(assemble_precision(Lattice4(N)).stencil.toarray(), stencil_oracle(N))


class TestStencil:
    @pytest.mark.parametrize("offset, value", [
        ((0, 0, 0, 0), 72),
        ((1, 0, 0, 0), -16),
        ((0, 0, 0, -1), -16),
        ((2, 0, 0, 0), 1),
        ((1, 1, 0, 0), 2),
        ((0, 1, 0, -1), 2),
        ((1, 1, 1, 0), 0),
        ((3, 0, 0, 0), 0),
    ])
    def test_deep_interior_entries(self, B8, offset, value):
        lat = Lattice4(8)
        c = np.array(lat.center)
        assert B8[lat.index(c), lat.index(c + offset)] == value

    def test_symmetric(self, B8):
        assert (B8 - B8.T).nnz == 0

    def test_range_two(self, B8):
        lat = Lattice4(8)
        coo = B8.tocoo()
        d = np.abs(lat.coords(coo.row) - lat.coords(coo.col)).sum(axis=1)
        assert d.max() == 2

    def test_boundary_differs_from_dirichlet_square(self):
        # exterior rows make A differ from the squared Dirichlet Laplacian
        lat = Lattice4(4)
        B = assemble_precision(lat).stencil.toarray()
        L = laplacian_matrix(lat).toarray()
        D = L[_inner_rows(lat)]
        corner = lat.index((0, 0, 0, 0))
        assert B[corner, corner] == 72
        assert (D.T @ D)[corner, corner] == 68


def test_n_too_small():
    with pytest.raises(ValueError):
        assemble_precision(Lattice4(1))


def test_matrix_dump(tmp_path):
    op = assemble_precision(Lattice4(2))
    path = tmp_path / "A.mtx"
    write_matrix(op, path)
    lines = path.read_text().splitlines()
    n, _, nnz = map(int, lines[2].split())
    assert n == 81 and nnz == op.stencil.nnz
    ijv = np.array([list(map(int, l.split())) for l in lines[3:]])
    assert np.array_equal(ijv[:, :2], ijv[np.lexsort((ijv[:, 1], ijv[:, 0]))][:, :2])
    back = sp.coo_matrix((ijv[:, 2], (ijv[:, 0] - 1, ijv[:, 1] - 1)), shape=(n, n))
    assert (back.tocsr() != op.stencil).nnz == 0


class TestSolve:
    @pytest.mark.parametrize("mode", ["dense", "sparse", "iterative"])
    def test_zero_rhs(self, op4, mode):
        assert np.all(solve(make_solver(op4, mode), np.zeros(625)) == 0)

    @pytest.mark.parametrize("mode", ["dense", "sparse", "iterative"])
    def test_ones(self, op4, mode):
        b = op4.matrix @ np.ones(625)
        assert np.allclose(solve(make_solver(op4, mode), b), 1.0, atol=1e-6)

    @pytest.mark.parametrize("mode", ["dense", "sparse", "iterative"])
    def test_green_column(self, op4, inv4, mode):
        lat = op4.lattice
        v = lat.index(lat.center)
        x = make_solver(op4, mode).green_column(lat.center)
        A = op4.to_dense()
        resid = np.linalg.norm(A @ x - np.eye(625)[v])
        assert resid < (1e-10 if mode != "iterative" else 1e-8)
        assert np.allclose(x, inv4[:, v], rtol=1e-6, atol=1e-9)

    def test_batched_rhs(self, op4, rng):
        b = rng.standard_normal((3, 625))
        h = make_solver(op4, "iterative")
        x = h.solve(b)
        assert np.allclose(op4.matrix @ x.T, b.T, atol=1e-6)

    def test_iteration_budget(self, op4, rng):
        h = make_solver(op4, "iterative", maxiter=2)
        with pytest.raises(ConvergenceError) as err:
            h.solve(rng.standard_normal(625))
        assert err.value.residual > 1e-8
        assert err.value.iterations == 2

    def test_bad_rhs_shape(self, dense4):
        with pytest.raises(ValueError):
            dense4.solve(np.zeros(10))

    @pytest.mark.parametrize("N, mode", [(4, "dense"), (8, "dense"), (10, "sparse"), (16, "iterative")])
    def test_default_mode(self, N, mode):
        assert default_mode(N) == mode

    @pytest.mark.parametrize("N", range(2, 9))
    def test_positive_definite(self, N):
        A = assemble_precision(Lattice4(N)).to_dense()
        C = np.linalg.cholesky(A)
        assert np.all(np.diag(C) > 0)

    @pytest.mark.slow
    @pytest.mark.parametrize("N", range(9, 12))
    def test_positive_definite_sparse(self, N):
        h = make_solver(assemble_precision(Lattice4(N)), "sparse")
        assert np.all(h._lu.U.diagonal() > 0)

    @pytest.mark.slow
    def test_sparse_tier_top(self, rng):
        # N = 12 peaks at ~2.2 GB; copying U out for the check above would
        # add ~1.1 GB, so only the solve is checked here
        op = assemble_precision(Lattice4(12))
        b = rng.standard_normal(op.lattice.vertex_count)
        x = make_solver(op, "sparse").solve(b)
        assert np.linalg.norm(op.matrix @ x - b) <= 1e-10 * np.linalg.norm(b)


class TestGreen:
    def test_diag_dense_oracle(self, dense4, inv4):
        assert np.allclose(green_diag(dense4), np.diag(inv4), rtol=1e-10)

    def test_positive_and_boundary_smaller(self, dense4):
        g = green_diag(dense4).reshape(Lattice4(4).shape)
        assert np.all(g > 0)
        assert g[1, 2, 2, 2] < g[2, 2, 2, 2]
        assert g[0, 0, 0, 0] < g[2, 2, 2, 2]

    def test_center_n8_dense_oracle(self):
        op = assemble_precision(Lattice4(8))
        lat = op.lattice
        c = lat.index(lat.center)
        # LU solve of the dense matrix, independent of the Cholesky path
        oracle = np.linalg.solve(op.to_dense(), np.eye(lat.vertex_count)[c])[c]
        for mode in ("dense", "sparse"):
            assert make_solver(op, mode).green_entry(lat.center, lat.center) == pytest.approx(
                oracle, rel=1e-8)

    def test_iterative_diag_agrees(self, op4, dense4):
        it = make_solver(op4, "iterative", tol=1e-12)
        assert np.allclose(it.green_diag(batch=100), green_diag(dense4), rtol=1e-8)

    @pytest.mark.slow
    def test_log_growth(self):
        # G_center(N) - γ ln N stays within 0.5 between consecutive N
        vals = []
        for N in (8, 16, 32):
            h = make_solver(assemble_precision(Lattice4(N)), tol=1e-10)
            c = Lattice4(N).center
            vals.append(h.green_entry(c, c) - GAMMA * np.log(N))
        assert all(abs(b - a) < 0.5 for a, b in zip(vals, vals[1:]))


class TestConditional:
    def test_whole_lattice(self, op4, inv4):
        cond = conditional_operators(op4, np.arange(625))
        assert cond.boundary.size == 0
        assert np.allclose(cond.covariance(), inv4, atol=1e-10)
        assert np.all(cond.smooth(np.ones(625)) == 0)

    def test_coupling_within_two(self, box8):
        op, U, cond = box8
        lat = op.lattice
        cu = lat.coords(U)
        for w in lat.coords(cond.boundary):
            assert np.abs(cu - w).sum(axis=1).min() <= 2
        # and every vertex at l1 distance <= 2 does couple
        everything = lat.all_coords()
        dist = np.abs(everything[:, None, :] - cu[None]).sum(axis=2).min(axis=1)
        near = np.flatnonzero((dist <= 2) & (dist > 0))
        assert np.array_equal(near, cond.boundary)

    def test_restriction_is_own_lattice(self, box8):
        op, U, cond = box8
        own = assemble_precision(Lattice4(2)).to_dense()
        assert np.array_equal(cond.A_UU, own)

    def test_covariance_is_green_on_u(self, box8):
        _, _, cond = box8
        G_U = np.linalg.inv(assemble_precision(Lattice4(2)).to_dense())
        assert np.allclose(cond.covariance(), G_U, rtol=1e-8, atol=1e-12)

    def test_accepts_coordinates(self, op4):
        a = conditional_operators(op4, [[2, 2, 2, 2], [2, 2, 2, 3]])
        b = conditional_operators(op4, op4.lattice.index([[2, 2, 2, 2], [2, 2, 2, 3]]))
        assert np.array_equal(a.U, b.U) and np.array_equal(a.boundary, b.boundary)

    def test_empty(self, op4):
        with pytest.raises(ValueError):
            conditional_operators(op4, [])

    def test_sub_box_must_fit(self):
        with pytest.raises(ValueError):
            sub_box(Lattice4(4), (3, 3, 3, 3), 3)
