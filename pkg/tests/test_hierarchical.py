import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from membrane4d.harness import jackknife_cov
from membrane4d.hierarchical import (
    TOP_SUBSETS,
    DyadicDepth,
    _ShapeOnly,
    brw_cov,
    ceil_log2,
    mbrw_cov,
    mbrw_from_noise,
    mbrw_from_noise_bruteforce,
    mbrw_from_noise_windows,
    mbrw_noise,
    sample_brw,
    sample_brw_batch,
    sample_mbrw,
    sample_mbrw_batch,
)
from membrane4d.lattice import wrapped_distances
from membrane4d.rng import stream, streams


def dyadic(noise, bits=24):
    """Round to multiples of 2**-bits so every partial sum is exact."""
    return [np.round(g * 2**bits) / 2**bits for g in noise]


def chunked(sample, depth, count, seed, chunk=200):
    parts = [sample(depth, streams(seed, range(a, min(a + chunk, count))))
             for a in range(0, count, chunk)]
    return np.concatenate(parts)


class TestClosedForms:
    @pytest.mark.parametrize("n", [1, 2, 5])
    def test_variance(self, n):
        d = DyadicDepth(n)
        v = (1, 0, 3 % d.N, 0)
        assert brw_cov(v, v, d) == n + 1
        assert mbrw_cov(v, v, d) == pytest.approx(n + 1)

    def test_brw_example(self):
        assert brw_cov((0, 0, 0, 0), (1, 0, 0, 0), DyadicDepth(2)) == 2

    @pytest.mark.parametrize("v, value", [((0, 0, 0, 0), 3.0), ((1, 0, 0, 0), 1.25),
                                          ((2, 0, 0, 0), 0.5)])
    def test_mbrw_examples(self, v, value):
        assert mbrw_cov((0, 0, 0, 0), v, DyadicDepth(2)) == pytest.approx(value, abs=1e-15)

    @pytest.mark.parametrize("d, k", [(0, 0), (1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (8, 3)])
    def test_ceil_log2(self, d, k):
        assert ceil_log2(d) == k

    @given(st.lists(st.integers(0, 63), min_size=4, max_size=4),
           st.lists(st.integers(0, 63), min_size=4, max_size=4),
           st.lists(st.integers(-3, 3), min_size=4, max_size=4))
    def test_translation_invariant(self, u, v, shift):
        d = DyadicDepth(6)
        u2 = np.mod(np.add(u, np.multiply(shift, 7)), 64)
        v2 = np.mod(np.add(v, np.multiply(shift, 7)), 64)
        assert mbrw_cov(u, v, d) == pytest.approx(mbrw_cov(u2, v2, d), abs=1e-12)
        assert mbrw_cov(u, v, d) == mbrw_cov(v, u, d)

    @pytest.mark.parametrize("n", [3, 4, 5, 6])
    def test_log_envelope(self, n):
        d = DyadicDepth(n)
        half = d.N // 2
        # the covariance depends only on the sorted t vector
        worst = 0.0
        for t in itertools.combinations_with_replacement(range(half + 1), 4):
            if max(t) == 0:
                continue
            gap = abs(mbrw_cov((0, 0, 0, 0), t, d) - (n - math.log2(max(t))))
            worst = max(worst, gap)
        assert worst <= 5

    def test_depth_validation(self):
        with pytest.raises(ValueError):
            DyadicDepth(0)


class TestMBRWSampler:
    def test_noise_layout(self):
        shapes = [g.shape for g in mbrw_noise(DyadicDepth(2), _ShapeOnly())]
        assert shapes[:2] == [(4, 4, 4, 4)] * 2
        assert len(shapes) == 2 + 16 and len(TOP_SUBSETS) == 16
        assert shapes[2] == (1, 1, 1, 1) and shapes[-1] == (4, 4, 4, 4)

    @pytest.mark.parametrize("n", [1, 2])
    def test_windows_equal_bruteforce_exactly(self, n):
        d = DyadicDepth(n)
        noise = dyadic(mbrw_noise(d, stream(17, 0).generator()))
        assert np.array_equal(mbrw_from_noise_windows(d, noise),
                              mbrw_from_noise_bruteforce(d, noise))

    @pytest.mark.parametrize("replicate", [0, 1])
    def test_windows_equal_bruteforce_rational(self, replicate):
        # the raw stream values, carried as exact rationals
        d = DyadicDepth(2)
        noise = mbrw_noise(d, stream(17, replicate).generator())
        exact = [np.vectorize(Fraction, otypes=[object])(g) for g in noise]
        a = mbrw_from_noise_windows(d, exact)
        assert a.dtype == object
        assert np.array_equal(a, mbrw_from_noise_bruteforce(d, exact))
        assert np.allclose(a.astype(float), mbrw_from_noise(d, noise), rtol=0, atol=1e-13)

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_nested_doubling_matches_windows(self, n):
        d = DyadicDepth(n)
        noise = mbrw_noise(d, stream(4, n).generator())
        assert np.allclose(mbrw_from_noise(d, noise), mbrw_from_noise_windows(d, noise),
                           rtol=0, atol=1e-12)

    def test_integer_noise_levels_exact(self):
        # below the top level every path is integer arithmetic
        d = DyadicDepth(3)
        gen = np.random.default_rng(0)
        noise = mbrw_noise(d, gen)
        noise = [gen.integers(-50, 50, g.shape).astype(float) for g in noise[:3]] + \
                [np.zeros_like(g) for g in noise[3:]]
        assert np.array_equal(mbrw_from_noise(d, noise), mbrw_from_noise_windows(d, noise))

    def test_sampler_uses_stream_noise(self):
        d = DyadicDepth(2)
        s = stream(8, 3)
        torus = mbrw_from_noise(d, mbrw_noise(d, s.generator()))
        f = sample_mbrw(d, s)
        assert np.allclose(f.values[:4, :4, :4, :4], torus, atol=1e-12)
        assert f.provenance == "mbrw" and f.seed == s.key
        # site N is identified with site 0
        assert np.array_equal(f.values[4], f.values[0])

    def test_exact_covariance_by_basis_propagation(self):
        # push every unit noise vector through the sampler: Σ MMᵀ is the covariance
        d = DyadicDepth(2)
        shapes = [g.shape for g in mbrw_noise(d, _ShapeOnly())]
        cols = []
        for j, shape in enumerate(shapes):
            for idx in np.ndindex(shape):
                noise = [np.zeros(s) for s in shapes]
                noise[j][idx] = 1.0
                cols.append(mbrw_from_noise(d, noise).ravel())
        M = np.array(cols)
        cov = M.T @ M
        sites = list(np.ndindex(4, 4, 4, 4))
        exact = np.array([[mbrw_cov(u, v, d) for v in sites] for u in sites])
        assert np.allclose(cov, exact, atol=1e-12)

    def test_variance_mc(self):
        d = DyadicDepth(2)
        x = chunked(sample_mbrw_batch, d, 4000, seed=1).reshape(4000, -1)
        est, se = jackknife_cov(x[:, 37], x[:, 37])
        assert abs(est - 3) <= 4 * se

    @pytest.mark.slow
    def test_covariance_mc_n4(self):
        d = DyadicDepth(4)
        rng = np.random.default_rng(3)
        pairs = rng.integers(0, 16, size=(10, 2, 4))
        lat = d.lattice
        flat = [(lat.index(u), lat.index(v)) for u, v in pairs]
        sites = sorted({i for p in flat for i in p})
        parts = []
        for a in range(0, 20_000, 100):
            b = sample_mbrw_batch(d, streams(5, range(a, a + 100)))
            parts.append(b.reshape(100, -1)[:, sites])
        x = np.concatenate(parts)
        col = {s: j for j, s in enumerate(sites)}
        for (u, v), (iu, iv) in zip(pairs, flat):
            est, se = jackknife_cov(x[:, col[iu]], x[:, col[iv]])
            assert abs(est - mbrw_cov(u, v, d)) <= 4 * se


class TestBRWSampler:
    def test_shape_and_provenance(self):
        f = sample_brw(DyadicDepth(2), stream(0, 0))
        assert f.values.shape == (5, 5, 5, 5) and f.provenance == "brw"

    def test_exact_covariance_by_basis_propagation(self):
        from membrane4d.hierarchical import brw_from_noise, brw_noise
        d = DyadicDepth(2)
        shapes = [g.shape for g in brw_noise(d, _ShapeOnly())]
        cols = []
        for j, shape in enumerate(shapes):
            for idx in np.ndindex(shape):
                noise = [np.zeros(s) for s in shapes]
                noise[j][idx] = 1.0
                cols.append(brw_from_noise(d, noise).ravel())
        M = np.array(cols)
        cov = M.T @ M
        sites = list(np.ndindex(5, 5, 5, 5))
        rng = np.random.default_rng(1)
        for a, b in rng.integers(0, len(sites), size=(300, 2)):
            assert cov[a, b] == brw_cov(sites[a], sites[b], d)

    @pytest.mark.slow
    def test_covariance_mc_n3(self):
        d = DyadicDepth(3)
        x = chunked(sample_brw_batch, d, 50_000, seed=6, chunk=1000).reshape(50_000, -1)
        lat = d.lattice
        rng = np.random.default_rng(7)
        for u, v in rng.integers(0, 9, size=(10, 2, 4)):
            est, se = jackknife_cov(x[:, lat.index(u)], x[:, lat.index(v)])
            assert abs(est - brw_cov(u, v, d)) <= 4 * se
