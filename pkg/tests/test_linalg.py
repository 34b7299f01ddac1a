import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdlt import linalg


def rng_for(tag):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([0x7E57, tag])))


class TestOrth:
    def test_already_orthonormal_returned_unchanged(self):
        a = np.eye(2)
        assert np.allclose(linalg.orth(a), a, atol=1e-15)

    def test_rank_deficient_column_completed(self):
        e1 = np.array([1.0, 0.0])
        a = np.column_stack([e1, 2.0 * e1])
        q = linalg.orth(a)
        assert np.allclose(q[:, 0], e1, atol=1e-14)
        assert abs(q[:, 1] @ e1) <= 1e-12
        assert abs(np.linalg.norm(q[:, 1]) - 1.0) <= 1e-12

    def test_random_input_gram_and_projection(self):
        a = rng_for(1).standard_normal((8, 3))
        q = linalg.orth(a)
        assert np.linalg.norm(q.T @ q - np.eye(3)) <= 1e-10
        assert np.linalg.norm(q @ (q.T @ a) - a) <= 1e-10

    def test_zero_matrix_completes_to_full_basis(self):
        q = linalg.orth(np.zeros((5, 3)))
        assert np.linalg.norm(q.T @ q - np.eye(3)) <= 1e-10

    def test_wide_input_rejected(self):
        with pytest.raises(ValueError, match="rows"):
            linalg.orth(np.ones((2, 3)))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            linalg.orth(np.array([[np.nan], [1.0]]))

    def test_deterministic_completion(self):
        a = np.column_stack([np.ones(4), np.ones(4)])
        assert np.array_equal(linalg.orth(a), linalg.orth(a))

    @settings(max_examples=40, deadline=None, derandomize=True)
    @given(
        n=st.integers(2, 20),
        k=st.integers(1, 20),
        seed=st.integers(0, 2**20),
        duplicate=st.booleans(),
    )
    def test_span_containment_property(self, n, k, seed, duplicate):
        k = min(k, n)
        a = rng_for(seed).standard_normal((n, k))
        if duplicate and k >= 2:
            a[:, -1] = 3.0 * a[:, 0]
        q = linalg.orth(a)
        assert q.shape == (n, k)
        assert np.linalg.norm(q.T @ q - np.eye(k)) <= 1e-10
        assert np.linalg.norm(q @ (q.T @ a) - a) <= 1e-10 * max(1.0, np.linalg.norm(a))


class TestSvd:
    def test_diagonal(self):
        res = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        assert np.allclose(res.singular_values, [3.0, 2.0, 1.0], atol=1e-14)

    def test_zero_matrix(self):
        res = linalg.svd(np.zeros((2, 2)))
        assert np.array_equal(res.singular_values, [0.0, 0.0])
        assert np.linalg.norm(res.left.T @ res.left - np.eye(2)) <= 1e-10
        assert np.linalg.norm(res.right.T @ res.right - np.eye(2)) <= 1e-10

    def test_matches_symmetric_eigensolve(self):
        a = rng_for(2).standard_normal((16, 16))
        res = linalg.svd(a)
        assert np.linalg.norm(res.reconstruct() - a) <= 1e-9 * max(1.0, np.linalg.norm(a))
        oracle = np.sqrt(np.maximum(np.linalg.eigvalsh(a.T @ a)[::-1], 0.0))
        assert np.abs(res.singular_values - oracle).max() <= 1e-8 * max(1.0, res.singular_values[0])

    def test_wide_matrix(self):
        a = rng_for(3).standard_normal((3, 7))
        res = linalg.svd(a)
        assert res.left.shape == (3, 3)
        assert res.right.shape == (7, 3)
        assert np.linalg.norm(res.reconstruct() - a) <= 1e-9

    def test_reconstruction_sweep(self):
        # Spec-level invariant: random shapes up to 64x64.
        rng = rng_for(4)
        sizes = [(int(rng.integers(1, 25)), int(rng.integers(1, 25))) for _ in range(930)]
        sizes += [(int(rng.integers(25, 49)), int(rng.integers(25, 49))) for _ in range(60)]
        sizes += [(64, 64)] * 10
        for m, n in sizes:
            a = rng.standard_normal((m, n))
            res = linalg.svd(a)
            err = np.linalg.norm(res.reconstruct() - a)
            assert err <= 1e-9 * max(1.0, np.linalg.norm(a))
            assert np.all(np.diff(res.singular_values) <= 0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            linalg.svd(np.array([[np.inf, 0.0], [0.0, 1.0]]))


class TestTruncateByThreshold:
    def test_tail_norm_rule(self):
        sv = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        # discarded-tail norms: keep 1 -> sqrt(5) >= theta, keep 2 -> 1 < theta
        r1, trunc = linalg.truncate_by_threshold(sv, 1.1225, 1)
        assert r1 == 2
        assert np.allclose(trunc.singular_values, [3.0, 2.0])

    def test_zero_threshold_keeps_everything(self):
        sv = linalg.svd(np.diag([3.0, 2.0, 1.0]))
        r1, _ = linalg.truncate_by_threshold(sv, 0.0, 1)
        assert r1 == 3

    def test_floor_clamp(self):
        sv = linalg.svd(np.diag([1e-16, 1e-17]))
        r1, _ = linalg.truncate_by_threshold(sv, 1.0, 2)
        assert r1 == 2

    def test_negative_threshold_rejected(self):
        sv = linalg.svd(np.eye(2))
        with pytest.raises(ValueError):
            linalg.truncate_by_threshold(sv, -1.0, 1)

    @settings(max_examples=40, deadline=None, derandomize=True)
    @given(seed=st.integers(0, 2**20))
    def test_monotone_in_threshold(self, seed):
        sv = linalg.svd(rng_for(seed).standard_normal((10, 10)))
        total = float(np.linalg.norm(sv.singular_values))
        ranks = [
            linalg.truncate_by_threshold(sv, theta, 1)[0]
            for theta in np.linspace(0.0, 1.5 * total, 40)
        ]
        assert all(r2 <= r1 for r1, r2 in zip(ranks, ranks[1:]))


class TestConditionNumber:
    def test_diagonal(self):
        assert linalg.condition_number(np.diag([2.0, 1.0])) == pytest.approx(2.0)

    def test_reported_reference_spectrum(self):
        # Spectrum endpoints 2.7785 / 0.8210 as displayed in the source
        # material (4-decimal rounding there makes the last digit soft).
        kappa = linalg.condition_number(np.diag([2.7785, 1.9, 1.2, 0.8210]))
        assert kappa == pytest.approx(2.7785 / 0.8210, rel=1e-12)
        assert kappa == pytest.approx(3.3844, abs=5e-4)

    def test_orthonormal_is_one(self):
        q = linalg.orth(rng_for(5).standard_normal((9, 9)))
        assert abs(linalg.condition_number(q) - 1.0) <= 1e-10

    def test_sentinel_for_tiny_ratio(self):
        assert math.isinf(linalg.condition_number(np.diag([1.0, 1e-20])))

    def test_zero_matrix_rejected(self):
        with pytest.raises(ValueError, match="zero matrix"):
            linalg.condition_number(np.zeros((2, 2)))

    def test_exact_zero_singular_values_ignored(self):
        assert linalg.condition_number(np.diag([2.0, 1.0, 0.0])) == pytest.approx(2.0)

    @settings(max_examples=40, deadline=None, derandomize=True)
    @given(seed=st.integers(0, 2**20), scale_exp=st.integers(-8, 8))
    def test_scale_invariance(self, seed, scale_exp):
        a = rng_for(seed).standard_normal((6, 6))
        base = linalg.condition_number(a)
        scaled = linalg.condition_number(a * 10.0**scale_exp)
        if math.isinf(base):
            assert math.isinf(scaled)
        else:
            assert abs(scaled - base) <= 1e-10 * base


class TestUnfold:
    def test_identity_kernel(self):
        c = np.zeros((2, 2, 1, 1))
        c[0, 0, 0, 0] = 1.0
        c[1, 1, 0, 0] = 1.0
        assert np.array_equal(linalg.unfold_output_mode(c), np.eye(2))

    def test_refold_is_inverse(self):
        c = rng_for(6).standard_normal((3, 4, 2, 5))
        mat = linalg.unfold_output_mode(c)
        assert np.array_equal(linalg.refold_output_mode(mat, c.shape), c)

    def test_row_is_flattened_slice(self):
        c = rng_for(7).standard_normal((2, 3, 2, 2))
        mat = linalg.unfold_output_mode(c)
        for o in range(2):
            flat = np.empty(12)
            pos = 0
            for i in range(3):  # input channel slowest
                for a in range(2):
                    for b in range(2):
                        flat[pos] = c[o, i, a, b]
                        pos += 1
            assert np.array_equal(mat[o], flat)

    def test_input_mode_unfold(self):
        c = rng_for(8).standard_normal((2, 3, 2, 2))
        mat = linalg.unfold_input_mode(c)
        assert mat.shape == (3, 8)
        assert np.array_equal(mat[1], np.transpose(c, (1, 0, 2, 3))[1].ravel())
