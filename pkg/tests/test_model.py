import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvcce.model import (
    ELECTRON_GYRO,
    MAX_CLUSTER_SIZE,
    BathSpin,
    CentralSpin,
    ExternalField,
    build_cluster_hamiltonian,
    cluster_operators,
    dipolar_tensor,
    rotate_from_nv_frame,
    rotate_to_nv_frame,
    spin_matrices,
    zeeman_term,
)

# (mu0/4pi) gamma_e^2 hbar / r^3 at r = 10 A, from the constants by hand
DIPOLE_10A = 326983.3726

coord = st.floats(-60, 60, allow_nan=False)
vec = st.tuples(coord, coord, coord).map(np.array)


def test_dipolar_tensor_along_z():
    k = dipolar_tensor(np.zeros(3), np.array([0.0, 0.0, 10.0]))
    assert k[2, 2] == pytest.approx(-2 * DIPOLE_10A, rel=1e-9)
    assert abs(k[2, 2]) == pytest.approx(6.54e5, rel=1e-3)
    assert k[0, 0] == pytest.approx(-k[2, 2] / 2, rel=1e-12)
    assert k[1, 1] == pytest.approx(-k[2, 2] / 2, rel=1e-12)
    assert np.abs(k - np.diag(np.diag(k))).max() == 0


@settings(max_examples=50, deadline=None)
@given(vec, vec)
def test_dipolar_tensor_traceless_symmetric(a, b):
    if np.linalg.norm(a - b) < 1.0:
        return
    k = dipolar_tensor(a, b)
    assert abs(np.trace(k)) <= 1e-9 * np.abs(k).max()
    np.testing.assert_allclose(k, k.T, rtol=0, atol=1e-12 * np.abs(k).max())
    np.testing.assert_allclose(dipolar_tensor(b, a), k, rtol=1e-12)


def test_dipolar_tensor_coincident():
    with pytest.raises(ValueError):
        dipolar_tensor(np.ones(3), np.ones(3))


def test_zeeman():
    np.testing.assert_allclose(zeeman_term(ELECTRON_GYRO, ExternalField.along_z(100)), [0, 0, -1.7608597e6])
    assert not np.any(zeeman_term(ELECTRON_GYRO, ExternalField.along_z(0)))
    one, hundred = (zeeman_term(ELECTRON_GYRO, ExternalField.along_z(b)) for b in (1, 100))
    np.testing.assert_allclose(100 * one, hundred)
    with pytest.raises(ValueError):
        ExternalField((0, 0, np.nan))


def test_nv_frame():
    np.testing.assert_allclose(rotate_to_nv_frame(np.ones(3) / np.sqrt(3)), [0, 0, 1], atol=1e-15)
    v = rotate_to_nv_frame(np.array([1.0, -1.0, 0.0]) / np.sqrt(2))
    assert np.linalg.norm(v) == pytest.approx(1)
    assert abs(v[2]) < 1e-15


@settings(max_examples=50, deadline=None)
@given(vec)
def test_rotation_preserves_norm(v):
    w = rotate_to_nv_frame(v)
    assert np.linalg.norm(w) == pytest.approx(np.linalg.norm(v), rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(rotate_from_nv_frame(w), v, atol=1e-12)


def test_spin_matrices_commutators():
    for s in (0.5, 1.0):
        x, y, z = spin_matrices(s)
        np.testing.assert_allclose(x @ y - y @ x, 1j * z, atol=1e-14)
        np.testing.assert_allclose(x @ x + y @ y + z @ z, s * (s + 1) * np.eye(len(z)), atol=1e-14)
        assert z[0, 0] == s  # descending-m ordering


def test_empty_cluster_diagonal():
    h = build_cluster_hamiltonian([], CentralSpin(), ExternalField.along_z(100))
    assert h.shape == (3, 3)
    assert np.abs(h - np.diag(np.diag(h))).max() == 0


def test_single_spin_hermitian():
    h = build_cluster_hamiltonian([BathSpin((3.0, -4.0, 12.0))], CentralSpin(), ExternalField((1.0, 2.0, 50.0)))
    assert h.shape == (6, 6)
    assert np.abs(h - h.conj().T).max() < 1e-12 * np.abs(h).max()


def _kron(*ops):
    out = np.ones((1, 1))
    for o in ops:
        out = np.kron(out, o)
    return out


def test_two_spin_kronecker_oracle():
    """Cluster Hamiltonian against an expansion written out with explicit Kronecker products."""
    r1, r2 = np.array([5.0, 1.0, -8.0]), np.array([-3.0, 6.0, 9.0])
    central, fld = CentralSpin(), ExternalField((0.3, -0.2, 80.0))
    shifts = np.array([1234.0, -567.0])
    h = build_cluster_hamiltonian([BathSpin(tuple(r1)), BathSpin(tuple(r2))], central, fld, shifts, central_shift=42.0)
    S, I = spin_matrices(1.0), spin_matrices(0.5)
    e3, e2 = np.eye(3), np.eye(2)
    b = fld.vector
    g = ELECTRON_GYRO
    ref = np.zeros((12, 12), dtype=complex)
    for a in range(3):
        ref += g * b[a] * _kron(S[a], e2, e2)
        ref += g * b[a] * (_kron(e3, I[a], e2) + _kron(e3, e2, I[a]))
        for c in range(3):
            ref += central.zfs[a, c] * _kron(S[a] @ S[c], e2, e2)
            ref += dipolar_tensor(np.zeros(3), r1)[a, c] * _kron(S[a], I[c], e2)
            ref += dipolar_tensor(np.zeros(3), r2)[a, c] * _kron(S[a], e2, I[c])
            ref += dipolar_tensor(r1, r2)[a, c] * _kron(e3, I[a], I[c])
    ref += shifts[0] * _kron(e3, I[2], e2) + shifts[1] * _kron(e3, e2, I[2]) + 42.0 * _kron(S[2], e2, e2)
    assert np.abs(h - ref).max() <= 1e-9 * np.abs(ref).max()


def test_cluster_size_guard():
    with pytest.raises(ValueError):
        cluster_operators(MAX_CLUSTER_SIZE + 1)


def test_central_spin_validation():
    with pytest.raises(ValueError):
        CentralSpin(qubit_levels=(1, 1))
    with pytest.raises(ValueError):
        CentralSpin(zfs=np.eye(2))
