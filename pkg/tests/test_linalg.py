import math

import numpy as np
import pytest

from onglab.errors import EmptyBatchError, StructuralError
from onglab.linalg import eigenbasis_transform, gram_matrix, jacobi_eig, sym_eig


def random_symmetric(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    return a + a.T


def rot(deg):
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_identity(method):
    q, lam = sym_eig(np.eye(3), method=method)
    np.testing.assert_array_equal(lam, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(np.abs(q) @ np.ones(3), np.ones(3))
    np.testing.assert_allclose(q.T @ q, np.eye(3), atol=1e-12)


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
def test_diagonal(method):
    q, lam = sym_eig(np.diag([1.0, 2.0]), method=method)
    np.testing.assert_allclose(lam, [2.0, 1.0])
    np.testing.assert_allclose(np.abs(q), [[0.0, 1.0], [1.0, 0.0]])


@pytest.mark.parametrize("method", ["lapack", "jacobi"])
@pytest.mark.parametrize("n", [5, 17, 128])
def test_reconstruction_and_orthogonality(method, n):
    m = random_symmetric(n, seed=n)
    q, lam = sym_eig(m, method=method)
    resid = np.linalg.norm(q @ np.diag(lam) @ q.T - m) / np.linalg.norm(m)
    assert resid < 1e-8
    assert np.abs(q.T @ q - np.eye(n)).max() < 1e-10
    assert np.all(np.diff(lam) <= 0)


def test_jacobi_agrees_with_lapack():
    m = random_symmetric(30, seed=3)
    _, lam_j = sym_eig(m, method="jacobi")
    _, lam_l = sym_eig(m, method="lapack")
    np.testing.assert_allclose(lam_j, lam_l, rtol=1e-10, atol=1e-10)


def test_jacobi_reports_nonconvergence():
    from onglab.errors import NumericalError

    with pytest.raises(NumericalError, match="residual"):
        jacobi_eig(random_symmetric(8, seed=1), max_sweeps=1)


def test_symmetrizes_tiny_asymmetry():
    m = random_symmetric(4, seed=2)
    m[0, 1] += 1e-13
    q, lam = sym_eig(m)
    np.testing.assert_allclose(q @ np.diag(lam) @ q.T, 0.5 * (m + m.T), atol=1e-12)


@pytest.mark.parametrize("bad", [np.ones((2, 3)), np.array([[1.0, 2.0], [0.0, 1.0]])])
def test_structural_errors(bad):
    with pytest.raises(StructuralError):
        sym_eig(bad)


def test_transform_identity_bases(rng):
    g = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(eigenbasis_transform(np.eye(3), g, np.eye(4)), g)


def test_transform_rotation_bases():
    # R(a)^T R(b) = R(b - a)
    out = eigenbasis_transform(rot(30), np.eye(2), rot(75))
    np.testing.assert_allclose(out, rot(45), atol=1e-15)


def test_transform_round_trip(rng):
    qb, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    qa, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    g = rng.normal(size=(4, 3))
    back = eigenbasis_transform(qb, eigenbasis_transform(qb, g, qa), qa, inverse=True)
    assert np.linalg.norm(back - g) / np.linalg.norm(g) < 1e-12


def test_transform_shape_mismatch():
    with pytest.raises(StructuralError):
        eigenbasis_transform(np.eye(3), np.ones((3, 4)), np.eye(3))


def test_gram_examples():
    np.testing.assert_array_equal(gram_matrix([[1.0, 0.0]]), [[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(gram_matrix([[1.0, 1.0], [1.0, -1.0]]), np.eye(2))


def test_gram_is_symmetric_psd(rng):
    for _ in range(20):
        x = rng.normal(size=(rng.integers(1, 10), 6)) * rng.uniform(0.1, 100)
        g = gram_matrix(x)
        np.testing.assert_array_equal(g, g.T)
        assert np.linalg.eigvalsh(g).min() >= -1e-12 * max(1.0, np.abs(g).max())


def test_gram_empty():
    with pytest.raises(EmptyBatchError):
        gram_matrix(np.empty((0, 3)))
