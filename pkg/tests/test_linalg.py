import math

import numpy as np
import pytest

from taq.errors import InvalidInput, InvalidShape
from taq.linalg import SeededRng, Tensor, center_rows, gram_matrix, rng_normal, sym_eigvals

from oracles import charpoly_roots, gram_triple_loop


class TestTensor:
    def test_rejects_non_2d(self):
        with pytest.raises(InvalidShape):
            Tensor(np.zeros(3))

    def test_rejects_empty(self):
        with pytest.raises(InvalidShape):
            Tensor(np.zeros((0, 3)))

    def test_rejects_nan(self):
        with pytest.raises(InvalidInput):
            Tensor(np.array([[1.0, np.nan]]))

    def test_accepts_lists(self):
        t = Tensor([[1, 2], [3, 4]], label="w")
        assert t.rows == 2 and t.cols == 2
        assert t.values.dtype == np.float64


class TestGramMatrix:
    def test_identity(self):
        k = gram_matrix(Tensor(np.eye(2)))
        np.testing.assert_allclose(k.values, [[0.5, 0.0], [0.0, 0.5]])

    def test_zeros(self):
        k = gram_matrix(Tensor(np.zeros((3, 4))))
        np.testing.assert_array_equal(k.values, np.zeros((3, 3)))

    def test_matches_triple_loop_oracle(self):
        rng = SeededRng(7)
        z = rng.normals(24).reshape(4, 6)
        k = gram_matrix(Tensor(z))
        np.testing.assert_allclose(k.values, gram_triple_loop(z), atol=1e-12)

    def test_symmetric_and_psd(self):
        rng = SeededRng(11)
        for trial in range(10):
            z = rng.normals(5 * 7).reshape(5, 7)
            k = gram_matrix(Tensor(z))
            assert np.max(np.abs(k.values - k.values.T)) <= 1e-10
            assert min(sym_eigvals(k)) >= -1e-9


class TestCenterRows:
    def test_symmetric_pair(self):
        out = center_rows(Tensor([[1.0], [3.0]]))
        np.testing.assert_allclose(out.values, [[-1.0], [1.0]])

    def test_idempotent(self):
        rng = SeededRng(3)
        x = Tensor(rng.normals(15).reshape(5, 3))
        once = center_rows(x)
        twice = center_rows(once)
        np.testing.assert_allclose(twice.values, once.values, atol=1e-12)

    def test_column_sums_vanish(self):
        rng = SeededRng(5)
        x = Tensor(rng.normals(15).reshape(5, 3))
        out = center_rows(x)
        assert np.max(np.abs(out.values.sum(axis=0))) < 1e-10


class TestSymEigvals:
    def test_diagonal(self):
        vals = sym_eigvals(Tensor([[2.0, 0.0], [0.0, 3.0]]))
        np.testing.assert_allclose(vals, [3.0, 2.0])

    def test_offdiagonal_keeps_genuine_negative(self):
        vals = sym_eigvals(Tensor([[0.0, 1.0], [1.0, 0.0]]))
        np.testing.assert_allclose(vals, [1.0, -1.0], atol=1e-12)

    def test_noise_negative_clamped(self):
        vals = sym_eigvals(Tensor([[1.0, 0.0], [0.0, -1e-10]]))
        assert vals[1] == 0.0

    def test_non_square_rejected(self):
        with pytest.raises(InvalidShape):
            sym_eigvals(Tensor(np.zeros((2, 3))))

    def test_asymmetric_rejected(self):
        with pytest.raises(InvalidInput):
            sym_eigvals(Tensor([[0.0, 1.0], [0.0, 0.0]]))

    def test_matches_charpoly_roots_3x3(self):
        rng = SeededRng(13)
        for trial in range(20):
            m = rng.normals(9).reshape(3, 3)
            k = (m + m.T) / 2
            got = sym_eigvals(Tensor(k))
            want = charpoly_roots(k)
            np.testing.assert_allclose(got, want, atol=1e-8)

    def test_matches_charpoly_roots_n_le_4(self):
        rng = SeededRng(17)
        for n in (1, 2, 3, 4):
            for trial in range(10):
                m = rng.normals(n * n).reshape(n, n)
                k = (m + m.T) / 2
                got = sym_eigvals(Tensor(k))
                want = charpoly_roots(k)
                np.testing.assert_allclose(got, want, atol=1e-8)

    def test_trace_identity(self):
        rng = SeededRng(19)
        for n in (2, 5, 16, 33):
            m = rng.normals(n * n).reshape(n, n)
            k = (m + m.T) / 2
            vals = sym_eigvals(Tensor(k))
            assert abs(vals.sum() - np.trace(k)) <= 1e-8 * n


class TestSeededRng:
    def test_empty_draw(self):
        assert list(rng_normal(SeededRng(1), 0)) == []

    def test_same_seed_same_stream(self):
        a = rng_normal(SeededRng(42), 8)
        b = rng_normal(SeededRng(42), 8)
        np.testing.assert_array_equal(a, b)

    def test_scalar_batch_equivalence(self):
        batched = SeededRng(9).normals(7)
        scalar_rng = SeededRng(9)
        singles = np.array([scalar_rng.normal() for _ in range(7)])
        np.testing.assert_array_equal(batched, singles)

    def test_moments(self):
        draws = rng_normal(SeededRng(123), 100_000)
        assert abs(draws.mean()) < 0.02
        assert abs(draws.var() - 1.0) < 0.05

    def test_derive_independent(self):
        root = SeededRng(5)
        a = root.derive(1).normals(4)
        b = root.derive(2).normals(4)
        a2 = root.derive(1).normals(4)
        np.testing.assert_array_equal(a, a2)
        assert not np.array_equal(a, b)

    def test_randint_range(self):
        rng = SeededRng(77)
        draws = [rng.randint(10) for _ in range(1000)]
        assert min(draws) >= 0 and max(draws) < 10
        assert len(set(draws)) == 10
