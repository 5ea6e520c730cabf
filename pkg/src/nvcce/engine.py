"""Hahn-echo coherence of the NV spin: gCCE with mean-field bath sampling.

For a cluster C and one sampled bath state the coherence is obtained from the
full cluster Hamiltonian (central spin included). Spins outside C only enter
through static secular shifts at their sampled z-projections. Irreducible
cluster contributions are divided out over the subcluster lattice, the product
over clusters gives the coherence for that bath state, and the final curve is
the mean over bath states.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from ._kernels import echo_coherence
from .bath import SpinBathConfiguration
from .clusters import ClusterSet
from .model import (
    CentralSpin,
    ExternalField,
    cluster_operators,
    dipolar_tensor,
    dipolar_tensors,
    spin_matrices,
    zz_couplings,
)
from .seeds import rng

log = logging.getLogger(__name__)

DIVERGENCE_FLOOR = 1e-10
MASK_TOLERANCE = 1e-6  # per-sample |L| above 1 + tol is a factorisation artefact
EXACT_MAX_SPINS = 10
T2_REFERENCE_MS = 52.7e-3  # ensemble T2 at 1 ppm, scaled as 1/ppm for default grids
BATCH_MATRICES = 4096


@dataclass
class CoherenceCurve:
    times: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.times.shape != self.values.shape:
            raise ValueError("times and values differ in shape")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    def to_csv(self, path, metadata: bool = True) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "L_real", "L_imag"])
            for t, v in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(v.real)), repr(float(v.imag))])
        if metadata:
            path.with_suffix(".json").write_text(json.dumps(self.metadata, indent=1, sort_keys=True))

    @classmethod
    def from_csv(cls, path) -> CoherenceCurve:
        path = Path(path)
        with path.open() as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:3] != ["t_ms", "L_real", "L_imag"]:
            raise ValueError(f"{path}: expected header t_ms,L_real,L_imag")
        try:
            data = np.array([[float(x) for x in r[:3]] for r in rows[1:]]).reshape(-1, 3)
        except ValueError as err:
            raise ValueError(f"{path}: {err}") from err
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(data[:, 0], data[:, 1] + 1j * data[:, 2], meta)


def default_time_grid(ppm: float, n_points: int = 101, span: float = 4.0) -> np.ndarray:
    """Total echo times 0..span*T2_est (ms), T2_est = 52.7 us / (ppm)."""
    if ppm <= 0:
        t2 = T2_REFERENCE_MS
    else:
        t2 = T2_REFERENCE_MS / ppm
    return np.linspace(0.0, span * t2, n_points)


def swap_permutation(central: CentralSpin, n_bath: int) -> np.ndarray:
    """Row permutation implementing the pi pulse on the qubit levels."""
    dim_b = 2**n_bath
    perm = np.arange(central.dim)
    a, b = (central.level_index(m) for m in central.qubit_levels)
    perm[a], perm[b] = b, a
    return (perm[:, None] * dim_b + np.arange(dim_b)).reshape(-1)


def swap_operator(central: CentralSpin, n_bath: int) -> np.ndarray:
    perm = swap_permutation(central, n_bath)
    return np.eye(len(perm))[perm]


def hahn_echo_propagator(h: np.ndarray, tau: float, central: CentralSpin | None = None) -> np.ndarray:
    """U(2 tau) = exp(-i H tau) Pi exp(-i H tau) via eigendecomposition of H."""
    h = np.asarray(h)
    scale = max(1.0, float(np.abs(h).max()))
    if np.abs(h - h.conj().T).max() > 1e-12 * scale:
        raise ValueError("Hamiltonian is not Hermitian")
    central = central or CentralSpin()
    n_bath = int(round(np.log2(len(h) // central.dim)))
    pi = swap_operator(central, n_bath)
    e, v = np.linalg.eigh(h)
    u = (v * np.exp(-1j * e * tau)) @ v.conj().T
    return u @ pi @ u


def _echo_batch(h, rows, perm, taus, levels) -> np.ndarray:
    h = np.ascontiguousarray(h, dtype=np.complex128)
    r_a, r_b = (np.ascontiguousarray(r, dtype=np.int64) for r in rows)
    uniform = len(taus) > 2 and bool(np.allclose(np.diff(taus), taus[1] - taus[0], rtol=1e-12, atol=0))
    return echo_coherence(h, r_a, r_b, np.asarray(perm, dtype=np.int64), taus, levels[0], levels[1], uniform)


def _initial_rows(central: CentralSpin, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Basis rows of |m_a, bath> and |m_b, bath> for z product bath states (+-1/2)."""
    states = np.atleast_2d(states)
    k = states.shape[1]
    bits = (states < 0).astype(np.int64)
    b = np.zeros(len(states), dtype=np.int64)
    for i in range(k):
        b = b * 2 + bits[:, i]
    la, lb = (central.level_index(m) for m in central.qubit_levels)
    return la * 2**k + b, lb * 2**k + b


def _check_order(central: CentralSpin):
    if central.dim != 3:
        raise ValueError("only S = 1 central spins are supported")


def sample_bath_states(n_spins: int, n_samples: int, seed: int) -> np.ndarray:
    """Uniform +-1/2 projections, one row per sample; row k uses stream (seed, k)."""
    out = np.empty((n_samples, n_spins))
    for s in range(n_samples):
        out[s] = rng(seed, s).choice([0.5, -0.5], size=n_spins)
    return out


def all_bath_states(n_spins: int) -> np.ndarray:
    return np.array(list(product([0.5, -0.5], repeat=n_spins)), dtype=float).reshape(2**n_spins, n_spins)


class _ClusterSolver:
    """Per-configuration precomputation shared across bath-state samples."""

    def __init__(self, config, clusters, central, field, times):
        _check_order(central)
        self.central = central
        self.field = field
        self.levels = tuple(central.level_index(m) for m in central.qubit_levels)
        self.times = np.asarray(times, dtype=float)
        self.taus = self.times / 2
        pos = config.positions
        self.gyros = config.gyros
        self.kzz = zz_couplings(pos, self.gyros)
        if len(pos):
            self.azz = dipolar_tensors(np.zeros(3), pos, central.gyro, self.gyros)[:, 2, 2]
        else:
            self.azz = np.zeros(0)
        self.clusters = clusters
        self.static = {}
        for k, rows in clusters.by_size.items():
            if len(rows) == 0:
                continue
            ops = cluster_operators(k)
            coef = ops.coefficients(central, field, pos[rows], self.gyros[rows])
            self.static[k] = coef
        ops0 = cluster_operators(0)
        self.h0 = ops0.assemble(ops0.coefficients(central, field, np.zeros((1, 0, 3)), np.zeros((1, 0))))[0]

    def cluster_values(self, k: int, state: np.ndarray) -> np.ndarray:
        """Raw coherence of every size-k cluster for one bath state, ``(n_k, nt)``."""
        rows = self.clusters.by_size[k]
        ops = cluster_operators(k)
        field_all = self.kzz @ state
        central_all = self.azz @ state
        s_c = state[rows]  # (n, k)
        kin = self.kzz[rows[:, :, None], rows[:, None, :]]  # (n, k, k)
        shifts = field_all[rows] - np.einsum("nij,nj->ni", kin, s_c)
        hc = central_all - np.einsum("ni,ni->n", self.azz[rows], s_c)
        diag = ops.shift_diagonal(shifts, hc)
        r_a, r_b = _initial_rows(self.central, s_c)
        perm = swap_permutation(self.central, k)
        nt = len(self.taus)
        step = max(1, BATCH_MATRICES * 144 // ops.dim**2)
        out = np.empty((len(rows), nt), dtype=complex)
        d = np.arange(ops.dim)
        for lo in range(0, len(rows), step):
            sl = slice(lo, lo + step)
            h = ops.assemble(self.static[k][sl])
            h[:, d, d] += diag[sl]
            out[sl] = _echo_batch(h, (r_a[sl], r_b[sl]), perm, self.taus, self.levels)
        return out

    def empty_value(self, state: np.ndarray) -> np.ndarray:
        h = self.h0.copy()
        h[np.diag_indices(3)] += cluster_operators(0).shift_diagonal(np.zeros(0), self.azz @ state)
        r_a, r_b = _initial_rows(self.central, np.zeros((1, 0)))
        return _echo_batch(h[None], (r_a, r_b), swap_permutation(self.central, 0), self.taus, self.levels)[0]

    def sample_coherence(self, state: np.ndarray) -> tuple[np.ndarray, int]:
        """Factorised coherence for one bath state and the divergence-guard count."""
        l_empty = self.empty_value(state)
        total = l_empty.copy()
        irreducible: dict[int, np.ndarray] = {}
        events = 0
        for k in sorted(self.clusters.by_size):
            rows = self.clusters.by_size[k]
            if len(rows) == 0:
                irreducible[k] = np.zeros((0, len(self.taus)), dtype=complex)
                continue
            raw = self.cluster_values(k, state)
            den = np.broadcast_to(l_empty, raw.shape).copy()
            for j, idx in self.clusters.subclusters.get(k, {}).items():
                for c in range(idx.shape[1]):
                    present = idx[:, c] >= 0
                    den[present] *= irreducible[j][idx[present, c]]
            bad = np.abs(den) < DIVERGENCE_FLOOR
            events += int(bad.sum())
            tilde = np.where(bad, 1.0, raw / np.where(bad, 1.0, den))
            irreducible[k] = tilde
            total *= np.prod(tilde, axis=0)
        return total, events


def cluster_coherence(
    cluster,
    config: SpinBathConfiguration,
    central: CentralSpin,
    field: ExternalField,
    bath_state: np.ndarray,
    times: np.ndarray,
) -> np.ndarray:
    """Raw (not irreducible) coherence of one cluster under the sampled mean field.

    ``cluster`` is a tuple of spin indices; the empty tuple gives the
    central-spin-only factor.
    """
    cluster = tuple(sorted(int(i) for i in cluster))
    state = np.asarray(bath_state, dtype=float)
    k = len(cluster)
    cs = ClusterSet(k, np.nan, len(config), {k: np.array([cluster], dtype=np.int64).reshape(1, k)} if k else {})
    solver = _ClusterSolver(config, cs, central, field, times)
    if k == 0:
        return solver.empty_value(state)
    return solver.cluster_values(k, state)[0]


def gcce_coherence(
    config: SpinBathConfiguration,
    clusters: ClusterSet,
    central: CentralSpin,
    field: ExternalField,
    times,
    n_mc_samples: int = 128,
    seed: int = 0,
    bath_states: np.ndarray | None = None,
) -> CoherenceCurve:
    """Ensemble-of-bath-states gCCE coherence for one spatial configuration.

    Bath states are drawn with :func:`sample_bath_states` unless given
    explicitly (one row per state, entries +-1/2).
    """
    times = np.asarray(times, dtype=float)
    if bath_states is None:
        if n_mc_samples < 1:
            raise ValueError("need at least one bath-state sample")
        bath_states = sample_bath_states(len(config), n_mc_samples, seed)
    bath_states = np.asarray(bath_states, dtype=float)
    bath_states = bath_states.reshape(len(bath_states), len(config))
    solver = _ClusterSolver(config, clusters, central, field, times)
    acc = np.zeros(len(times), dtype=complex)
    kept = np.zeros(len(times))
    events = 0
    for state in bath_states:
        val, ev = solver.sample_coherence(state)
        ok = np.abs(val) <= 1.0 + MASK_TOLERANCE
        acc[ok] += val[ok]
        kept += ok
        events += ev
    masked = int(len(bath_states) * len(times) - kept.sum())
    with np.errstate(invalid="ignore"):
        values = np.where(kept > 0, acc / np.maximum(kept, 1), np.nan)
    max_imag = float(np.abs(values.imag).max()) if len(values) else 0.0
    if max_imag > 1e-3:
        log.info("config %s: |Im L| up to %.3g", config.config_id, max_imag)
    meta = {
        "method": "gcce",
        "order": clusters.order,
        "r_bath": config.r_bath,
        "r_dipole": clusters.r_dipole,
        "ppm": config.ppm,
        "n_spins": len(config),
        "n_clusters": len(clusters),
        "n_mc_samples": len(bath_states),
        "mc_seed": seed,
        "config_seed": config.seed,
        "config_id": config.config_id,
        "field_G": list(field.b),
        "max_abs_imag": max_imag,
        "divergence_events": events,
        "masked_points": masked,
    }
    return CoherenceCurve(times, values, meta)


# --- exact oracle -----------------------------------------------------------


def _site_operator(op: np.ndarray, site: int, dims: list[int]) -> np.ndarray:
    out = np.ones((1, 1))
    for s, d in enumerate(dims):
        out = np.kron(out, op if s == site else np.eye(d))
    return out


def full_hamiltonian(config: SpinBathConfiguration, central: CentralSpin, field: ExternalField) -> np.ndarray:
    """Complete central + bath Hamiltonian built term by term (reference path)."""
    n = len(config)
    dims = [3] + [2] * n
    S = [_site_operator(o, 0, dims) for o in spin_matrices(1.0)]
    I = [[_site_operator(o, i + 1, dims) for o in spin_matrices(0.5)] for i in range(n)]
    b = field.vector
    h = np.zeros((np.prod(dims), np.prod(dims)), dtype=complex)
    for x in range(3):
        h += central.gyro * b[x] * S[x]
        for y in range(3):
            h += central.zfs[x, y] * S[x] @ S[y]
    for i in range(n):
        a = dipolar_tensor(np.zeros(3), config.positions[i], central.gyro, config.gyros[i])
        for x in range(3):
            h += config.gyros[i] * b[x] * I[i][x]
            for y in range(3):
                h += a[x, y] * S[x] @ I[i][y]
        for j in range(i):
            kij = dipolar_tensor(config.positions[i], config.positions[j], config.gyros[i], config.gyros[j])
            for x in range(3):
                for y in range(3):
                    h += kij[x, y] * I[i][x] @ I[j][y]
    return h


def exact_coherence(
    config: SpinBathConfiguration,
    central: CentralSpin,
    field: ExternalField,
    times,
    n_mc_samples: int | None = None,
    seed: int = 0,
    bath_states: np.ndarray | None = None,
    max_spins: int = EXACT_MAX_SPINS,
) -> CoherenceCurve:
    """Brute-force echo coherence on the whole Hilbert space.

    Averages over the same bath-state samples as :func:`gcce_coherence`, or
    over every z product state (the infinite-temperature mixture) when neither
    ``n_mc_samples`` nor ``bath_states`` is given.
    """
    n = len(config)
    if n > max_spins:
        raise ValueError(f"exact evolution refused: {n} bath spins > cap {max_spins} (dim {3 * 2**n})")
    times = np.asarray(times, dtype=float)
    if bath_states is None:
        bath_states = sample_bath_states(n, n_mc_samples, seed) if n_mc_samples else all_bath_states(n)
    bath_states = np.asarray(bath_states, dtype=float)
    bath_states = bath_states.reshape(len(bath_states), n)
    h = full_hamiltonian(config, central, field)
    pi = swap_operator(central, n)
    dim_b = 2**n
    la, lb = (central.level_index(m) for m in central.qubit_levels)
    psi0 = []
    for st in bath_states:
        idx = 0
        for s in st:
            idx = 2 * idx + (0 if s > 0 else 1)
        v = np.zeros(len(h), dtype=complex)
        v[la * dim_b + idx] = v[lb * dim_b + idx] = np.sqrt(0.5)
        psi0.append(v)
    psi0 = np.array(psi0).T  # (dim, n_states)
    values = np.empty(len(times), dtype=complex)
    for it, t in enumerate(times):
        u_half = expm(-1j * h * (t / 2))
        psi = u_half @ (pi @ (u_half @ psi0))
        rho_qubit = psi[lb * dim_b : (lb + 1) * dim_b] * psi[la * dim_b : (la + 1) * dim_b].conj()
        values[it] = rho_qubit.sum(axis=0).mean() / 0.5
    meta = {
        "method": "exact",
        "n_spins": n,
        "n_mc_samples": len(bath_states),
        "mc_seed": seed,
        "config_id": config.config_id,
        "field_G": list(field.b),
    }
    return CoherenceCurve(times, values, meta)
