"""Physical constants, spin operators and Hamiltonian construction.

Units used throughout the package:

- distance: Angstrom
- time: millisecond
- magnetic field: Gauss
- gyromagnetic ratio: rad / ms / G
- every Hamiltonian and coupling: angular frequency, rad / ms (H / hbar)

Basis convention: the central spin is the slowest Kronecker index, bath spins
follow in cluster order. Each spin's levels are ordered by descending m, i.e.
``[+1, 0, -1]`` for the S = 1 centre and ``[+1/2, -1/2]`` for bath spins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

ELECTRON_GYRO = -17608.597
"""Electron gyromagnetic ratio, rad / ms / G."""

HBAR_MU0_O4PI = 1.054571817
"""mu0 * hbar / (4 pi) in units giving rad / ms for gammas in rad/ms/G and r in Angstrom."""

NV_ZFS = 2 * np.pi * 2.87e6
"""Axial zero-field splitting of the NV ground state, rad / ms."""

MAX_CLUSTER_SIZE = 6


@dataclass(frozen=True)
class PhysicalConstants:
    gamma_e: float = ELECTRON_GYRO
    dipole_prefactor: float = HBAR_MU0_O4PI
    hbar_convention: str = "H/hbar, rad/ms"


def axial_zfs_tensor(d: float = NV_ZFS) -> np.ndarray:
    """Traceless axial zero-field splitting tensor with splitting ``d`` along z."""
    return np.diag([-d / 3, -d / 3, 2 * d / 3])


@dataclass
class CentralSpin:
    """S = 1 central spin at the origin.

    ``qubit_levels`` are the two m_s values whose coherence is measured; the
    first is the reference level of the density-matrix element.
    """

    zfs: np.ndarray = field(default_factory=axial_zfs_tensor)
    gyro: float = ELECTRON_GYRO
    qubit_levels: tuple[int, int] = (0, 1)
    spin: float = 1.0

    def __post_init__(self):
        self.zfs = np.asarray(self.zfs, dtype=float)
        if self.zfs.shape != (3, 3):
            raise ValueError("zfs tensor must be 3x3")
        if not np.allclose(self.zfs, self.zfs.T, atol=1e-12 * max(1.0, np.abs(self.zfs).max())):
            raise ValueError("zfs tensor must be symmetric")
        a, b = self.qubit_levels
        if a == b or a not in (-1, 0, 1) or b not in (-1, 0, 1):
            raise ValueError(f"invalid qubit levels {self.qubit_levels}")

    @property
    def dim(self) -> int:
        return int(round(2 * self.spin + 1))

    def level_index(self, m: int) -> int:
        """Row of the m_s level in the ``[+1, 0, -1]`` ordering."""
        return int(round(self.spin - m))


@dataclass(frozen=True)
class BathSpin:
    position: tuple[float, float, float]
    gyro: float = ELECTRON_GYRO
    spin: float = 0.5


def _check_field(b) -> np.ndarray:
    b = np.asarray(b, dtype=float).reshape(3)
    if not np.all(np.isfinite(b)):
        raise ValueError(f"non-finite magnetic field {b}")
    return b


@dataclass(frozen=True)
class ExternalField:
    b: tuple[float, float, float] = (0.0, 0.0, 100.0)

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(_check_field(self.b)))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.b)

    @classmethod
    def along_z(cls, bz: float) -> ExternalField:
        return cls((0.0, 0.0, float(bz)))


def dipolar_tensor(r_i, r_j, gamma_i=ELECTRON_GYRO, gamma_j=ELECTRON_GYRO) -> np.ndarray:
    """Point dipole-dipole coupling tensor between two spins, rad / ms."""
    r = np.asarray(r_j, dtype=float) - np.asarray(r_i, dtype=float)
    d = np.linalg.norm(r)
    if d == 0.0:
        raise ValueError(f"coincident spin positions {tuple(np.asarray(r_i, dtype=float))}")
    n = r / d
    return -gamma_i * gamma_j * HBAR_MU0_O4PI / d**3 * (3 * np.outer(n, n) - np.eye(3))


def dipolar_tensors(r_a: np.ndarray, r_b: np.ndarray, gamma_a, gamma_b) -> np.ndarray:
    """Vectorised :func:`dipolar_tensor` over leading axes, shape ``(..., 3, 3)``."""
    r = np.asarray(r_b, dtype=float) - np.asarray(r_a, dtype=float)
    d = np.linalg.norm(r, axis=-1)
    if np.any(d == 0.0):
        raise ValueError("coincident spin positions")
    n = r / d[..., None]
    pref = -np.asarray(gamma_a) * np.asarray(gamma_b) * HBAR_MU0_O4PI / d**3
    return pref[..., None, None] * (3 * n[..., :, None] * n[..., None, :] - np.eye(3))


def zz_couplings(positions: np.ndarray, gyros: np.ndarray) -> np.ndarray:
    """Secular (zz) dipolar couplings between all bath spins; zero diagonal."""
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    out = np.zeros((n, n))
    if n < 2:
        return out
    r = positions[None, :, :] - positions[:, None, :]
    d2 = np.einsum("ijk,ijk->ij", r, r)
    np.fill_diagonal(d2, 1.0)
    if np.any(d2 == 0.0):
        raise ValueError("coincident spin positions")
    d = np.sqrt(d2)
    cos2 = r[..., 2] ** 2 / d2
    out = -np.outer(gyros, gyros) * HBAR_MU0_O4PI / d**3 * (3 * cos2 - 1)
    np.fill_diagonal(out, 0.0)
    return out


def zeeman_term(gamma: float, field: ExternalField | np.ndarray) -> np.ndarray:
    b = field.vector if isinstance(field, ExternalField) else _check_field(field)
    return gamma * b


_R_NV = np.array(
    [
        [1 / np.sqrt(6), 1 / np.sqrt(6), -2 / np.sqrt(6)],
        [-1 / np.sqrt(2), 1 / np.sqrt(2), 0.0],
        [1 / np.sqrt(3), 1 / np.sqrt(3), 1 / np.sqrt(3)],
    ]
)


def nv_frame_rotation() -> np.ndarray:
    """Proper rotation taking cubic lattice coordinates to the NV frame ([111] -> z)."""
    return _R_NV.copy()


def rotate_to_nv_frame(v) -> np.ndarray:
    return np.asarray(v, dtype=float) @ _R_NV.T


def rotate_from_nv_frame(v) -> np.ndarray:
    return np.asarray(v, dtype=float) @ _R_NV


@lru_cache(maxsize=None)
def spin_matrices(s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(Sx, Sy, Sz) for spin ``s`` in the descending-m basis."""
    m = np.arange(s, -s - 1, -1)
    dim = len(m)
    sp = np.zeros((dim, dim), dtype=complex)
    for k in range(1, dim):
        sp[k - 1, k] = np.sqrt(s * (s + 1) - m[k] * (m[k] + 1))
    sx = (sp + sp.conj().T) / 2
    sy = (sp - sp.conj().T) / 2j
    sz = np.diag(m).astype(complex)
    for a in (sx, sy, sz):
        a.flags.writeable = False
    return sx, sy, sz


def _embed(ops: list[np.ndarray]) -> np.ndarray:
    out = ops[0]
    for o in ops[1:]:
        out = np.kron(out, o)
    return out


class ClusterOperators:
    """Operator basis for a central spin-1 plus ``k`` spin-1/2 bath spins.

    Any cluster Hamiltonian is a real linear combination of these operators,
    so a whole batch of clusters is assembled with a single matrix product.
    Term layout (all real coefficients)::

        [ D (9) | gamma_S B (3) | A_i (9k) | gamma_i B (3k) | K_ij (9 per pair) ]

    Mean-field shifts only touch diagonal operators and are added separately
    through :attr:`diag_sz` and :attr:`diag_iz`.
    """

    def __init__(self, k: int):
        if k < 0 or k > MAX_CLUSTER_SIZE:
            raise ValueError(f"cluster size {k} exceeds the configured maximum {MAX_CLUSTER_SIZE}")
        self.k = k
        s_ops = spin_matrices(1.0)
        i_ops = spin_matrices(0.5)
        eye3, eye2 = np.eye(3), np.eye(2)
        self.dim = 3 * 2**k

        def central(op):
            return _embed([op] + [eye2] * k)

        def bath(i, op):
            return _embed([eye3] + [op if j == i else eye2 for j in range(k)])

        S = [central(o) for o in s_ops]
        I = [[bath(i, o) for o in i_ops] for i in range(k)]
        terms = []
        terms += [S[a] @ S[b] for a in range(3) for b in range(3)]
        terms += S
        for i in range(k):
            terms += [S[a] @ I[i][b] for a in range(3) for b in range(3)]
        for i in range(k):
            terms += I[i]
        self.pairs = list(combinations(range(k), 2))
        for i, j in self.pairs:
            terms += [I[i][a] @ I[j][b] for a in range(3) for b in range(3)]
        ops = np.array(terms).reshape(len(terms), self.dim * self.dim)
        self._ops_re = np.ascontiguousarray(ops.real)
        self._ops_im = np.ascontiguousarray(ops.imag)
        self.n_terms = len(terms)
        self.diag_sz = np.real(np.diag(S[2])).copy()
        self.diag_iz = np.array([np.real(np.diag(I[i][2])) for i in range(k)]).reshape(k, self.dim)

    def coefficients(
        self,
        central: CentralSpin,
        field: ExternalField,
        positions: np.ndarray,
        gyros: np.ndarray,
    ) -> np.ndarray:
        """Coefficient rows for a batch of clusters.

        positions: ``(n, k, 3)``; gyros: ``(n, k)``.
        """
        positions = np.asarray(positions, dtype=float)
        if positions.ndim == 2:
            positions = positions[None]
        n = len(positions)
        positions = positions.reshape(n, self.k, 3)
        gyros = np.asarray(gyros, dtype=float).reshape(n, self.k)
        b = field.vector
        coef = np.empty((n, self.n_terms))
        coef[:, :9] = central.zfs.reshape(9)
        coef[:, 9:12] = central.gyro * b
        off = 12
        if self.k:
            origin = np.zeros(3)
            a = dipolar_tensors(origin, positions, central.gyro, gyros)
            coef[:, off : off + 9 * self.k] = a.reshape(n, 9 * self.k)
            off += 9 * self.k
            coef[:, off : off + 3 * self.k] = (gyros[..., None] * b).reshape(n, 3 * self.k)
            off += 3 * self.k
        for i, j in self.pairs:
            kij = dipolar_tensors(positions[:, i], positions[:, j], gyros[:, i], gyros[:, j])
            coef[:, off : off + 9] = kij.reshape(n, 9)
            off += 9
        return coef

    def assemble(self, coef: np.ndarray) -> np.ndarray:
        coef = np.atleast_2d(coef)
        h = coef @ self._ops_re + 1j * (coef @ self._ops_im)
        return h.reshape(len(coef), self.dim, self.dim)

    def shift_diagonal(self, bath_shifts: np.ndarray, central_shift: np.ndarray) -> np.ndarray:
        """Diagonal contribution of mean-field shifts, shape ``(..., dim)``."""
        bath_shifts = np.asarray(bath_shifts, dtype=float)
        out = np.asarray(central_shift, dtype=float)[..., None] * self.diag_sz
        if self.k:
            out = out + bath_shifts @ self.diag_iz
        return out


@lru_cache(maxsize=None)
def cluster_operators(k: int) -> ClusterOperators:
    return ClusterOperators(k)


def build_cluster_hamiltonian(
    spins: list[BathSpin],
    central: CentralSpin,
    field: ExternalField,
    mean_field_shifts=None,
    central_shift: float = 0.0,
) -> np.ndarray:
    """Hermitian cluster Hamiltonian (rad / ms).

    H = S D S + gamma_S B.S + sum_i S A_i I_i + sum_{i<j} I_i K_ij I_j
        + sum_i gamma_i B.I_i + sum_i shift_i I_i^z + central_shift S^z
    """
    k = len(spins)
    ops = cluster_operators(k)
    pos = np.array([s.position for s in spins], dtype=float).reshape(1, k, 3)
    gy = np.array([s.gyro for s in spins], dtype=float).reshape(1, k)
    h = ops.assemble(ops.coefficients(central, field, pos, gy))[0]
    shifts = np.zeros(k) if mean_field_shifts is None else np.asarray(mean_field_shifts, dtype=float)
    if shifts.shape != (k,):
        raise ValueError(f"expected {k} mean-field shifts, got shape {shifts.shape}")
    h[np.diag_indices(ops.dim)] += ops.shift_diagonal(shifts, np.asarray(central_shift))
    return h
