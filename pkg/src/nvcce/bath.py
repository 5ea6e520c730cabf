"""Random electron-spin baths on diamond carbon sites.

The supercell is never materialised. The number of bath spins is drawn from
a binomial over the carbon sites inside the bath sphere, then that many
distinct sites are drawn uniformly by rejection from the enclosing cube.
The NV occupies two lattice sites: the vacancy at the origin and the nitrogen
at ``a/4 (1, 1, 1)``; both are excluded.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .model import ELECTRON_GYRO, BathSpin, rotate_from_nv_frame, rotate_to_nv_frame
from .seeds import rng

SCHEMA = "nvcce.bath/1"

DIAMOND_BASIS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
        [0.25, 0.25, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
        [0.75, 0.75, 0.25],
    ]
)

# (basis index, cell) of the vacancy and the nitrogen
NV_SITES = ((0, (0, 0, 0)), (4, (0, 0, 0)))


class ConfigurationError(ValueError):
    """Invalid or unreadable bath configuration."""


@dataclass(frozen=True)
class LatticeSpec:
    a: float = 3.57
    sites_per_cell: int = 8
    supercell_edge: float = 4000.0

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("lattice constant must be positive")

    @property
    def density(self) -> float:
        """Carbon sites per cubic Angstrom."""
        return self.sites_per_cell / self.a**3


DIAMOND = LatticeSpec()


@dataclass
class SpinBathConfiguration:
    positions: np.ndarray
    ppm: float
    r_bath: float
    seed: int | None = None
    config_id: int = 0
    gyros: np.ndarray | None = None
    lattice: LatticeSpec = field(default_factory=LatticeSpec)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.gyros is None:
            self.gyros = np.full(len(self.positions), ELECTRON_GYRO)
        self.gyros = np.asarray(self.gyros, dtype=float).reshape(-1)
        if len(self.gyros) != len(self.positions):
            raise ConfigurationError("positions and gyros differ in length")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def spins(self) -> list[BathSpin]:
        return [BathSpin(tuple(p), g) for p, g in zip(self.positions, self.gyros)]

    def validate(self, tol: float = 1e-9) -> None:
        if len(self) == 0:
            return
        r = np.linalg.norm(self.positions, axis=1)
        if np.any(r == 0.0):
            raise ConfigurationError("bath spin at the central spin position")
        out = np.flatnonzero(r > self.r_bath + tol)
        if out.size:
            i = int(out[0])
            raise ConfigurationError(
                f"spins[{i}] lies at |r| = {r[i]:.6g} A, outside r_bath = {self.r_bath:g} A"
            )
        if len(np.unique(np.round(self.positions, 6), axis=0)) != len(self):
            raise ConfigurationError("duplicate bath spin positions")

    def subset(self, idx) -> SpinBathConfiguration:
        idx = np.asarray(idx, dtype=int)
        return SpinBathConfiguration(
            self.positions[idx], self.ppm, self.r_bath, self.seed, self.config_id, self.gyros[idx], self.lattice
        )

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "ppm": self.ppm,
            "r_bath": self.r_bath,
            "seed": self.seed,
            "config_id": self.config_id,
            "lattice_constant": self.lattice.a,
            "supercell_edge": self.lattice.supercell_edge,
            "spins": [
                {"position": [float(x) for x in p], "gyro": float(g)}
                for p, g in zip(self.positions, self.gyros)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SpinBathConfiguration:
        def need(key, kind=(int, float)):
            if key not in d:
                raise ConfigurationError(f"missing field '{key}'")
            v = d[key]
            if not isinstance(v, kind) or isinstance(v, bool):
                raise ConfigurationError(f"field '{key}' has invalid value {v!r}")
            return v

        if d.get("schema") != SCHEMA:
            raise ConfigurationError(f"field 'schema': expected {SCHEMA!r}, got {d.get('schema')!r}")
        ppm = float(need("ppm"))
        r_bath = float(need("r_bath"))
        seed = d.get("seed")
        if seed is not None and not isinstance(seed, int):
            raise ConfigurationError(f"field 'seed' has invalid value {seed!r}")
        spins = need("spins", list)
        pos = np.zeros((len(spins), 3))
        gy = np.zeros(len(spins))
        for i, s in enumerate(spins):
            try:
                p = s["position"]
                if len(p) != 3:
                    raise ValueError
                pos[i] = [float(x) for x in p]
                gy[i] = float(s.get("gyro", ELECTRON_GYRO))
            except (KeyError, TypeError, ValueError) as err:
                raise ConfigurationError(f"spins[{i}]: malformed entry {s!r}") from err
        lattice = LatticeSpec(
            a=float(d.get("lattice_constant", DIAMOND.a)),
            supercell_edge=float(d.get("supercell_edge", DIAMOND.supercell_edge)),
        )
        cfg = cls(pos, ppm, r_bath, seed, int(d.get("config_id", 0)), gy, lattice)
        cfg.validate()
        return cfg


def expected_spin_count(ppm: float, r_bath: float, lattice: LatticeSpec = DIAMOND) -> float:
    if ppm < 0 or r_bath <= 0:
        raise ValueError("need ppm >= 0 and r_bath > 0")
    return lattice.density * 4 * math.pi / 3 * r_bath**3 * ppm * 1e-6


@lru_cache(maxsize=64)
def count_sites(r_bath: float, a: float = DIAMOND.a) -> int:
    """Exact number of diamond sites with |r| <= r_bath, NV sites excluded."""
    rho = r_bath / a
    m = int(math.ceil(rho)) + 1
    n = np.arange(-m, m + 1, dtype=float)
    total = 0
    for b in DIAMOND_BASIS:
        x = n + b[0]
        y = n + b[1]
        rem = rho**2 - x[:, None] ** 2 - y[None, :] ** 2
        ok = rem >= 0
        h = np.sqrt(np.where(ok, rem, 0.0))
        # integers nz with |nz + bz| <= h
        lo = np.ceil(-h - b[2] - 1e-12)
        hi = np.floor(h - b[2] + 1e-12)
        total += int(np.sum(np.where(ok & (hi >= lo), hi - lo + 1, 0)))
    return total - len(NV_SITES)


def generate_configuration(
    ppm: float,
    r_bath: float,
    lattice: LatticeSpec = DIAMOND,
    seed: int = 0,
    config_id: int = 0,
) -> SpinBathConfiguration:
    """Place bath electrons on random, distinct carbon sites within ``r_bath``."""
    if not 0 <= ppm <= 1e6:
        raise ValueError(f"concentration {ppm} ppm outside [0, 1e6]")
    if r_bath <= 0:
        raise ValueError("r_bath must be positive")
    if r_bath > lattice.supercell_edge / 2:
        raise ValueError(
            f"r_bath = {r_bath} A exceeds half the supercell edge ({lattice.supercell_edge / 2} A)"
        )
    gen = rng(seed)
    n_sites = count_sites(float(r_bath), lattice.a)
    n = int(gen.binomial(n_sites, ppm * 1e-6))
    rho2 = (r_bath / lattice.a) ** 2
    m = int(math.ceil(r_bath / lattice.a)) + 1
    excluded = {(b, c) for b, c in NV_SITES}
    chosen: dict[tuple, None] = {}
    while len(chosen) < n:
        need = n - len(chosen)
        batch = max(64, 3 * need)
        cells = gen.integers(-m, m + 1, size=(batch, 3))
        basis = gen.integers(0, len(DIAMOND_BASIS), size=batch)
        frac = cells + DIAMOND_BASIS[basis]
        inside = np.einsum("ij,ij->i", frac, frac) <= rho2
        for c, b, ok in zip(cells, basis, inside):
            if not ok:
                continue
            key = (int(b), (int(c[0]), int(c[1]), int(c[2])))
            if key in excluded or key in chosen:
                continue
            chosen[key] = None
            if len(chosen) == n:
                break
    if n:
        frac = np.array([np.array(c) + DIAMOND_BASIS[b] for b, c in chosen])
        positions = rotate_to_nv_frame(frac * lattice.a)
    else:
        positions = np.zeros((0, 3))
    return SpinBathConfiguration(positions, ppm, r_bath, int(seed), config_id, lattice=lattice)


def lattice_residual(config: SpinBathConfiguration) -> float:
    """Largest distance (A) between a spin and its nearest ideal diamond site."""
    if len(config) == 0:
        return 0.0
    a = config.lattice.a
    frac = rotate_from_nv_frame(config.positions) / a
    best = np.full(len(frac), np.inf)
    for b in DIAMOND_BASIS:
        d = frac - b
        best = np.minimum(best, np.linalg.norm(d - np.round(d), axis=1))
    return float(best.max() * a)


def save_configuration(config: SpinBathConfiguration, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=1))


def load_configuration(path) -> SpinBathConfiguration:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}") from err
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: top-level JSON value must be an object")
    try:
        return SpinBathConfiguration.from_dict(d)
    except ConfigurationError as err:
        raise ConfigurationError(f"{path}: {err}") from err
