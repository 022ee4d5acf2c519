"""
Pytest test suite for factorization.py (truncated SVD and HOSVD).
"""

import numpy as np
import pytest

from common.errors import InvalidArgumentError, UndefinedRatioError
from factorization import hosvd, reconstruct, relative_error, singular_values, truncated_svd
from tensor_core import matricize, multi_mode_product


def _planted_kernel(rng, shape, r3, r4):
    core = rng.normal(size=shape[:2] + (r3, r4))
    c3 = np.linalg.qr(rng.normal(size=(shape[2], r3)))[0]
    c4 = np.linalg.qr(rng.normal(size=(shape[3], r4)))[0]
    return multi_mode_product(core, {3: c3, 4: c4})


def test_truncated_svd_shapes_and_orthonormality(rng):
    """Test output shapes, orthonormal columns and non-increasing values."""
    a = rng.normal(size=(7, 5))
    r = truncated_svd(a, 3)
    assert r.u.shape == (7, 3) and r.v.shape == (5, 3) and r.s.shape == (3,)
    np.testing.assert_allclose(r.u.T @ r.u, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(r.v.T @ r.v, np.eye(3), atol=1e-12)
    assert np.all(np.diff(r.s) <= 0)


def test_truncated_svd_full_rank_is_exact(rng):
    """Test that p = min(m, n) reproduces the matrix."""
    a = rng.normal(size=(6, 4))
    np.testing.assert_allclose(reconstruct(truncated_svd(a, 4)), a, atol=1e-12)


def test_truncated_svd_sign_convention(rng):
    """Test that the largest-magnitude entry of every left vector is positive."""
    r = truncated_svd(rng.normal(size=(8, 6)), 4)
    for j in range(4):
        column = r.u[:, j]
        assert column[np.argmax(np.abs(column))] > 0


def test_truncated_svd_is_deterministic(rng):
    """Test identical factors on repeated calls."""
    a = rng.normal(size=(9, 7))
    first, second = truncated_svd(a, 5), truncated_svd(a, 5)
    np.testing.assert_array_equal(first.u, second.u)
    np.testing.assert_array_equal(first.v, second.v)


@pytest.mark.parametrize("p", [0, 5, 2.0, True])
def test_truncated_svd_rejects_bad_rank(p, rng):
    """Test ranks outside 1..min(m, n)."""
    with pytest.raises(InvalidArgumentError):
        truncated_svd(rng.normal(size=(4, 4)), p)


def test_truncated_svd_rejects_non_finite():
    """Test NaN input."""
    a = np.ones((3, 3))
    a[1, 1] = np.nan
    with pytest.raises(InvalidArgumentError):
        truncated_svd(a, 1)


@pytest.mark.numerics
def test_eckart_young_suite():
    """Test optimal error sqrt(Σ discarded s²) and dominance over random rank-p matrices."""
    rng = np.random.default_rng(77)
    for _ in range(100):
        m, n = (int(x) for x in rng.integers(2, 65, size=2))
        a = rng.normal(size=(m, n))
        s = np.linalg.svd(a, compute_uv=False)
        p = int(rng.integers(1, min(m, n) + 1))
        error = np.linalg.norm(a - reconstruct(truncated_svd(a, p)))
        assert error == pytest.approx(np.sqrt(np.sum(s[p:] ** 2)), abs=1e-8)
        for _ in range(20):
            baseline = rng.normal(size=(m, p)) @ rng.normal(size=(p, n))
            assert error <= np.linalg.norm(a - baseline)


def test_svd_agrees_with_gram_eigendecomposition(rng):
    """Test singular values against eigenvalues of aᵀa."""
    a = rng.normal(size=(10, 6))
    eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
    np.testing.assert_allclose(truncated_svd(a, 6).s ** 2, eig, rtol=1e-9)
    np.testing.assert_allclose(singular_values(a) ** 2, eig, rtol=1e-9)


def test_hosvd_recovers_planted_ranks(rng):
    """Test exact recovery at the planted channel ranks."""
    kernel = _planted_kernel(rng, (3, 3, 16, 24), 5, 7)
    result = hosvd(kernel, {3: 5, 4: 7})
    assert result.core.shape == (3, 3, 5, 7)
    assert result.ranks == {3: 5, 4: 7}
    assert relative_error(kernel, reconstruct(result)) <= 1e-9


def test_hosvd_full_rank_is_lossless(rng):
    """Test that decomposing at full rank loses nothing."""
    kernel = rng.normal(size=(3, 3, 4, 5))
    result = hosvd(kernel, {3: 4, 4: 5})
    assert relative_error(kernel, reconstruct(result)) <= 1e-10


def test_hosvd_factors_are_orthonormal_and_core_all_orthogonal(rng):
    """Test orthonormal factors and mutually orthogonal core slices on every decomposed mode."""
    kernel = rng.normal(size=(3, 3, 8, 10))
    result = hosvd(kernel, {3: 8, 4: 10})
    for mode, factor in result.factors.items():
        np.testing.assert_allclose(factor.T @ factor, np.eye(factor.shape[1]), atol=1e-12)
        unfolded = matricize(result.core, mode)
        gram = unfolded @ unfolded.T
        np.testing.assert_allclose(gram - np.diag(np.diag(gram)), 0.0, atol=1e-9)
        assert np.all(np.diff(np.diag(gram)) <= 1e-9)


def test_hosvd_core_is_projection(rng):
    """Test core == t ×_3 C3ᵀ ×_4 C4ᵀ."""
    kernel = rng.normal(size=(3, 3, 6, 7))
    result = hosvd(kernel, {3: 3, 4: 4})
    projected = multi_mode_product(kernel, {3: result.factors[3].T, 4: result.factors[4].T})
    np.testing.assert_allclose(result.core, projected, atol=1e-12)


def test_hosvd_error_is_monotone_in_rank(rng):
    """Test that larger ranks never increase the reconstruction error."""
    kernel = rng.normal(size=(3, 3, 10, 10))
    errors = [relative_error(kernel, reconstruct(hosvd(kernel, {3: r, 4: r}))) for r in range(1, 11)]
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
    assert errors[-1] <= 1e-10


def test_hosvd_only_decomposes_channel_modes_of_kernels(rng):
    """Test that spatial modes of a 4-way kernel are refused."""
    with pytest.raises(InvalidArgumentError):
        hosvd(rng.normal(size=(3, 3, 4, 4)), {1: 2, 3: 2})


def test_hosvd_rejects_rank_above_extent(rng):
    """Test a rank larger than the unfolding allows."""
    with pytest.raises(InvalidArgumentError):
        hosvd(rng.normal(size=(3, 3, 4, 5)), {3: 5, 4: 2})


def test_hosvd_on_three_way_tensor(rng):
    """Test HOSVD on a general 3-way tensor with all modes decomposed."""
    t = rng.normal(size=(4, 5, 6))
    result = hosvd(t, {1: 4, 2: 5, 3: 6})
    assert relative_error(t, reconstruct(result)) <= 1e-10


def test_relative_error_values(rng):
    """Test 0 for identical inputs and the zero-norm guard."""
    a = rng.normal(size=(3, 3))
    assert relative_error(a, a) == 0.0
    assert relative_error(a, np.zeros_like(a)) == pytest.approx(1.0)
    with pytest.raises(UndefinedRatioError):
        relative_error(np.zeros((2, 2)), np.ones((2, 2)))
    with pytest.raises(InvalidArgumentError):
        relative_error(a, np.zeros((2, 2)))
