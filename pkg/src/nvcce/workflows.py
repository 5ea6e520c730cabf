"""End-to-end experiments: ensembles, concentration sweeps, order and field scans.

Output layout of :func:`run_simulation` under ``output_dir``::

    ppm_<rho>/order_<n>/B_<field>/config_<id>.csv   per-configuration curve (+ .json)
    ppm_<rho>/order_<n>/B_<field>/average.csv       ensemble average (+ .json)
    summary.json                                    resolved config, fits, provenance

Per-configuration files double as checkpoints: a rerun reuses every curve
whose recorded run key matches, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .bath import DIAMOND, SpinBathConfiguration, generate_configuration
from .clusters import build_cluster_set
from .engine import CoherenceCurve, default_time_grid, gcce_coherence
from .ensemble import ensemble_average
from .fitting import METHODS, FitError, FitResult, fit_curve
from .model import CentralSpin, ExternalField, axial_zfs_tensor
from .seeds import BATH_STREAM, MC_STREAM, derive_seed, rng

log = logging.getLogger(__name__)

# Converged (r_dipole, r_bath) in Angstrom per CCE order and concentration (ppm).
CUTOFF_TABLE = {
    2: {0.1: (850.0, 1000.0), 1.0: (400.0, 500.0), 10.0: (210.0, 250.0), 100.0: (105.0, 125.0)},
    3: {0.1: (650.0, 1100.0), 1.0: (300.0, 600.0), 10.0: (170.0, 340.0), 100.0: (90.0, 180.0)},
}

SCALES = {"desk": (100, 64), "production": (500, 128)}
FAILURE_FRACTION = 0.01
ORDER4_MAX_PPM = 1.0


class ValidationError(ValueError):
    pass


class ComputeFailure(RuntimeError):
    pass


def code_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:  # pragma: no cover
        return "unknown"


def auto_cutoffs(ppm: float, order: int) -> tuple[float, float]:
    """(r_dipole, r_bath) interpolated log-log in ppm from the converged table.

    Orders above 3 reuse the third-order values.
    """
    if ppm <= 0:
        ppm = min(CUTOFF_TABLE[2])
    table = CUTOFF_TABLE[min(max(order, 2), 3)]
    xs = np.log(sorted(table))
    rd = np.log([table[k][0] for k in sorted(table)])
    rb = np.log([table[k][1] for k in sorted(table)])
    x = math.log(ppm)

    def interp(y):
        if x <= xs[0]:
            i = 0
        elif x >= xs[-1]:
            i = len(xs) - 2
        else:
            i = int(np.searchsorted(xs, x)) - 1
        slope = (y[i + 1] - y[i]) / (xs[i + 1] - xs[i])
        return float(math.exp(y[i] + slope * (x - xs[i])))

    return interp(rd), interp(rb)


@dataclass
class RunConfig:
    ppm: list[float] = field(default_factory=lambda: [1.0])
    order: int = 2
    r_bath: float | str = "auto"
    r_dipole: float | str = "auto"
    field_G: float = 100.0
    scale: str = "desk"
    n_configs: int | None = None
    n_mc_samples: int | None = None
    n_times: int = 101
    t_max_ms: float | None = None
    grid_span: float = 4.0
    fit_methods: list[str] = field(default_factory=lambda: ["exponential"])
    l_f: list[float] = field(default_factory=lambda: [0.4])
    seed: int = 0
    output_dir: str | None = None
    workers: int = 1
    zfs: float | None = None

    def __post_init__(self):
        if isinstance(self.ppm, (int, float)):
            self.ppm = [float(self.ppm)]
        self.ppm = [float(x) for x in self.ppm]
        if isinstance(self.fit_methods, str):
            self.fit_methods = [self.fit_methods]
        if isinstance(self.l_f, (int, float)):
            self.l_f = [float(self.l_f)]
        if self.scale in SCALES:
            nc, ns = SCALES[self.scale]
            self.n_configs = nc if self.n_configs is None else self.n_configs
            self.n_mc_samples = ns if self.n_mc_samples is None else self.n_mc_samples

    def validate(self) -> None:
        problems = []
        if not self.ppm:
            problems.append("ppm list is empty")
        if any(not 0 <= p <= 1e6 for p in self.ppm):
            problems.append("ppm values must lie in [0, 1e6]")
        if self.order < 1 or self.order > 4:
            problems.append("order must be 1..4")
        if self.scale not in SCALES:
            problems.append(f"scale must be one of {sorted(SCALES)}")
        for name in ("r_bath", "r_dipole"):
            v = getattr(self, name)
            if isinstance(v, str):
                if v != "auto":
                    problems.append(f"{name} must be a number or 'auto'")
            elif not v > 0:
                problems.append(f"{name} must be positive")
        if not isinstance(self.r_bath, str) and self.r_bath > DIAMOND.supercell_edge / 2:
            problems.append("r_bath exceeds half the supercell edge")
        if not math.isfinite(self.field_G):
            problems.append("field must be finite")
        if not self.n_configs or self.n_configs < 1:
            problems.append("n_configs must be >= 1")
        if not self.n_mc_samples or self.n_mc_samples < 1:
            problems.append("n_mc_samples must be >= 1")
        if self.n_times < 2:
            problems.append("n_times must be >= 2")
        if self.t_max_ms is not None and not self.t_max_ms > 0:
            problems.append("t_max_ms must be positive")
        for m in self.fit_methods:
            if m not in METHODS:
                problems.append(f"unknown fit method {m!r}")
        if any(not 0 < x < 1 for x in self.l_f):
            problems.append("L_f values must lie in (0, 1)")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if problems:
            raise ValidationError("; ".join(problems))

    def cutoffs(self, ppm: float) -> tuple[float, float]:
        rd_auto, rb_auto = auto_cutoffs(ppm, self.order)
        rd = rd_auto if self.r_dipole == "auto" else float(self.r_dipole)
        rb = rb_auto if self.r_bath == "auto" else float(self.r_bath)
        return rd, rb

    def times(self, ppm: float) -> np.ndarray:
        if self.t_max_ms is not None:
            return np.linspace(0.0, self.t_max_ms, self.n_times)
        return default_time_grid(ppm, self.n_times, self.grid_span)

    def central(self) -> CentralSpin:
        return _central(self.zfs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown RunConfig fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as err:
            raise ValidationError(str(err)) from err

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ValidationError(f"{path}: line {err.lineno}: {err.msg}") from err
        return cls.from_dict(d)


@dataclass
class ConcentrationResult:
    ppm: float
    r_dipole: float
    r_bath: float
    members: list[CoherenceCurve]
    average: CoherenceCurve | None
    fits: dict[str, FitResult | str]
    failed: list[int]

    def fit(self, method: str = "exponential", l_f: float = 0.4) -> FitResult:
        r = self.fits[fit_key(method, l_f)]
        if isinstance(r, str):
            raise FitError(r)
        return r


def fit_key(method: str, l_f: float) -> str:
    return f"{method}@{l_f:g}"


def _task_params(cfg: RunConfig, ppm: float) -> dict:
    rd, rb = cfg.cutoffs(ppm)
    return {
        "ppm": ppm,
        "order": cfg.order,
        "r_dipole": rd,
        "r_bath": rb,
        "field_G": cfg.field_G,
        "n_mc_samples": cfg.n_mc_samples,
        "seed": cfg.seed,
        "times": cfg.times(ppm).tolist(),
        "zfs": cfg.zfs,
    }


def run_key(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def bath_for(params: dict, config_id: int) -> SpinBathConfiguration:
    return generate_configuration(
        params["ppm"], params["r_bath"], seed=derive_seed(params["seed"], BATH_STREAM, config_id), config_id=config_id
    )


def compute_configuration(params: dict, config_id: int) -> CoherenceCurve:
    """gCCE curve of one spatial configuration; seeds derived from the master seed."""
    bath = bath_for(params, config_id)
    central = _central(params.get("zfs"))
    clusters = build_cluster_set(bath.positions, params["r_dipole"], params["order"])
    curve = gcce_coherence(
        bath,
        clusters,
        central,
        ExternalField.along_z(params["field_G"]),
        np.asarray(params["times"]),
        params["n_mc_samples"],
        seed=derive_seed(params["seed"], MC_STREAM, config_id),
    )
    curve.metadata["run_key"] = run_key(params)
    return curve


def _central(zfs: float | None) -> CentralSpin:
    return CentralSpin() if zfs is None else CentralSpin(zfs=axial_zfs_tensor(zfs))


def _compute_with_retry(args):
    params, config_id = args
    last = None
    for attempt in range(2):
        try:
            return config_id, compute_configuration(params, config_id), None
        except Exception as err:  # noqa: BLE001 - recorded, policy applied by caller
            last = f"{type(err).__name__}: {err}"
            log.warning("config %d attempt %d failed: %s", config_id, attempt + 1, last)
    return config_id, None, last


def _ensemble_dir(outdir: Path, params: dict) -> Path:
    return outdir / f"ppm_{params['ppm']:g}" / f"order_{params['order']}" / f"B_{params['field_G']:g}"


def compute_ensemble(
    params: dict, n_configs: int, outdir: Path | None = None, workers: int = 1
) -> tuple[list[CoherenceCurve], list[int], dict[int, str]]:
    key = run_key(params)
    curves: dict[int, CoherenceCurve] = {}
    todo = []
    edir = _ensemble_dir(outdir, params) if outdir else None
    if edir:
        edir.mkdir(parents=True, exist_ok=True)
    for i in range(n_configs):
        if edir:
            path = edir / f"config_{i:04d}.csv"
            if path.exists() and path.with_suffix(".json").exists():
                try:
                    c = CoherenceCurve.from_csv(path)
                    if c.metadata.get("run_key") == key:
                        curves[i] = c
                        continue
                except ValueError:
                    pass
        todo.append(i)
    errors: dict[int, str] = {}

    def store(i, curve, err):
        if curve is None:
            errors[i] = err
            return
        curves[i] = curve
        if edir:
            curve.to_csv(edir / f"config_{i:04d}.csv")

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for i, curve, err in pool.map(_compute_with_retry, [(params, i) for i in todo]):
                store(i, curve, err)
    else:
        for i in todo:
            store(*_compute_with_retry((params, i)))
    ids = sorted(curves)
    return [curves[i] for i in ids], ids, errors


def _fit_all(avg: CoherenceCurve, methods, l_fs) -> dict[str, FitResult | str]:
    out = {}
    for m in methods:
        for lf in l_fs:
            try:
                out[fit_key(m, lf)] = fit_curve(avg, method=m, l_f=lf)
            except FitError as err:
                out[fit_key(m, lf)] = f"FitError: {err}"
    return out


def _fit_json(r):
    return r if isinstance(r, str) else r.to_dict()


def run_simulation(cfg: RunConfig, write_summary: bool = True) -> dict[float, ConcentrationResult]:
    """Ensemble gCCE runs for every concentration in ``cfg``, fitted and saved."""
    cfg.validate()
    outdir = Path(cfg.output_dir) if cfg.output_dir else None
    results: dict[float, ConcentrationResult] = {}
    summary = {"run_config": cfg.to_dict(), "code_version": code_version(), "concentrations": {}}
    for ppm in cfg.ppm:
        params = _task_params(cfg, ppm)
        members, ids, errors = compute_ensemble(params, cfg.n_configs, outdir, cfg.workers)
        if len(errors) > FAILURE_FRACTION * cfg.n_configs:
            raise ComputeFailure(
                f"{len(errors)} of {cfg.n_configs} configurations failed at {ppm} ppm: "
                + "; ".join(f"#{i}: {e}" for i, e in sorted(errors.items())[:5])
            )
        avg = ensemble_average(members) if members else None
        fits = _fit_all(avg, cfg.fit_methods, cfg.l_f) if avg is not None else {}
        if avg is not None:
            avg.metadata["run_config"] = cfg.to_dict()
            avg.metadata["code_version"] = code_version()
            if outdir:
                avg.to_csv(_ensemble_dir(outdir, params) / "average.csv")
        res = ConcentrationResult(ppm, params["r_dipole"], params["r_bath"], members, avg, fits, sorted(errors))
        results[ppm] = res
        summary["concentrations"][f"{ppm:g}"] = {
            "r_dipole": params["r_dipole"],
            "r_bath": params["r_bath"],
            "n_members": len(members),
            "failed_configs": {str(k): v for k, v in sorted(errors.items())},
            "mean_spin_count": float(np.mean([m.metadata["n_spins"] for m in members])) if members else None,
            "fits": {k: _fit_json(v) for k, v in fits.items()},
        }
    if outdir and write_summary:
        outdir.mkdir(parents=True, exist_ok=True)
        (outdir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return results


# --- derived studies -------------------------------------------------------


def loglog_slope(ppm, t2) -> float:
    ppm = np.asarray(ppm, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    if len(ppm) < 3:
        raise ValidationError("need at least three concentrations for a slope")
    if len(np.unique(ppm)) != len(ppm):
        raise ValidationError("concentrations must be distinct")
    if np.any(ppm <= 0) or np.any(t2 <= 0):
        raise ValidationError("concentrations and T2 must be positive")
    slope, _ = np.polyfit(np.log(ppm), np.log(t2), 1)
    return float(slope)


def sweep_concentration(cfg: RunConfig, results: dict[float, ConcentrationResult] | None = None) -> dict:
    """Slope of log T2 against log ppm for each fit method and L_f."""
    ppms = list(cfg.ppm)
    if len(ppms) < 3:
        raise ValidationError("need at least three concentrations for a slope")
    if len(set(ppms)) != len(ppms):
        raise ValidationError("concentrations must be distinct")
    results = results if results is not None else run_simulation(cfg)
    report = {"run_config": cfg.to_dict(), "code_version": code_version(), "slopes": {}, "T2": {}}
    for m in cfg.fit_methods:
        for lf in cfg.l_f:
            key = fit_key(m, lf)
            xs, ys = [], []
            for ppm in ppms:
                r = results[ppm].fits.get(key)
                if isinstance(r, FitResult) and r.converged:
                    xs.append(ppm)
                    ys.append(r.t2)
                else:
                    log.warning("%s at %g ppm unavailable; slope uses survivors", key, ppm)
            report["T2"][key] = dict(zip(map(str, xs), ys))
            report["slopes"][key] = loglog_slope(xs, ys) if len(xs) >= 3 else None
    if cfg.output_dir:
        Path(cfg.output_dir, "sweep.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def _paired_ratio_error(a: list[CoherenceCurve], b: list[CoherenceCurve], method, l_f, seed, repeats=200):
    """Bootstrap (configurations resampled with replacement, paired) std of T2_a / T2_b."""
    ya = np.array([c.values for c in a])
    yb = np.array([c.values for c in b])
    t = a[0].times
    ratios = []
    for r in range(repeats):
        pick = rng(seed, 3, r).integers(0, len(ya), len(ya))
        try:
            fa = fit_curve(t, ya[pick].mean(axis=0), method=method, l_f=l_f)
            fb = fit_curve(t, yb[pick].mean(axis=0), method=method, l_f=l_f)
        except FitError:
            continue
        ratios.append(fa.t2 / fb.t2)
    return float(np.std(ratios, ddof=1)) if len(ratios) > 1 else float("nan")


def compare_orders(
    cfg: RunConfig, orders=(2, 3), reference: int | None = None, order4_max_ppm: float = ORDER4_MAX_PPM
) -> dict:
    """T2(order) / T2(reference order) on shared bath configurations."""
    orders = list(orders)
    reference = max(orders) if reference is None else reference
    if reference not in orders:
        orders.append(reference)
    for o in orders:
        if o >= 4 and any(p > order4_max_ppm for p in cfg.ppm):
            raise ValidationError(
                f"order {o} refused above {order4_max_ppm} ppm (cost cap); lower the concentration or raise the cap"
            )
    method, lf = cfg.fit_methods[0], cfg.l_f[0]
    runs = {o: run_simulation(replace(cfg, order=o), write_summary=False) for o in orders}
    report = {"run_config": cfg.to_dict(), "code_version": code_version(), "reference_order": reference, "ratios": {}}
    for ppm in cfg.ppm:
        ref = runs[reference][ppm]
        rows = {}
        for o in orders:
            res = runs[o][ppm]
            try:
                ratio = res.fit(method, lf).t2 / ref.fit(method, lf).t2
            except FitError as err:
                rows[str(o)] = {"error": str(err)}
                continue
            if o == reference:
                err = 0.0
            else:
                err = _paired_ratio_error(res.members, ref.members, method, lf, cfg.seed)
            rows[str(o)] = {"T2_ratio": ratio, "bootstrap_std": err, "T2": res.fit(method, lf).t2}
        report["ratios"][f"{ppm:g}"] = rows
    if cfg.output_dir:
        Path(cfg.output_dir, "compare_orders.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def field_sensitivity(cfg: RunConfig, fields) -> dict:
    """T2 against field strength on the same bath configurations and bath-state samples."""
    fields = [float(b) for b in fields]
    if any(b < 0 for b in fields):
        raise ValidationError("field values must be non-negative")
    method, lf = cfg.fit_methods[0], cfg.l_f[0]
    table = {}
    for b in fields:
        res = run_simulation(replace(cfg, field_G=b), write_summary=False)
        for ppm, r in res.items():
            row = {"flag": "degenerate Zeeman (B = 0)"} if b == 0 else {}
            try:
                f = r.fit(method, lf)
                row.update({"T2": f.t2, "p": f.p})
            except FitError as err:
                row["error"] = str(err)
            table.setdefault(f"{ppm:g}", {})[f"{b:g}"] = row
    spread = {}
    for ppm, rows in table.items():
        t2 = [r["T2"] for r in rows.values() if "T2" in r and "flag" not in r]
        spread[ppm] = (max(t2) - min(t2)) / np.mean(t2) if len(t2) > 1 else None
    report = {"run_config": cfg.to_dict(), "code_version": code_version(), "table": table, "relative_spread": spread}
    if cfg.output_dir:
        Path(cfg.output_dir, "field_scan.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def _converged_index(values: list[tuple[float, float]], tol: float) -> int | None:
    """Smallest index after which every successive (T2, p) change is below ``tol``."""
    n = len(values)
    for i in range(n - 1):
        ok = True
        for j in range(i, n - 1):
            (t_a, p_a), (t_b, p_b) = values[j], values[j + 1]
            if not (abs(t_b - t_a) / abs(t_a) < tol and abs(p_b - p_a) / abs(p_a) < tol):
                ok = False
                break
        if ok:
            return i
    return None


def scan_convergence(
    cfg: RunConfig,
    r_dipole_grid,
    r_bath_grid,
    orders=None,
    tol: float = 0.05,
    l_f: float = 0.4,
    method: str = "exponential",
) -> dict:
    """Converged (r_dipole, r_bath) per concentration and order.

    Baths for every r_bath are cut from one bath generated at the largest
    radius, so successive grid points differ only by the added shell. r_dipole
    is scanned at the largest r_bath, then r_bath at the converged r_dipole
    (or the largest one when r_dipole did not converge).
    """
    rd_grid = sorted(float(x) for x in r_dipole_grid)
    rb_grid = sorted(float(x) for x in r_bath_grid)
    if len(rd_grid) < 2 or len(rb_grid) < 2:
        raise ValidationError("convergence grids need at least two values each")
    orders = [cfg.order] if orders is None else list(orders)
    cfg.validate()
    report = {"run_config": cfg.to_dict(), "code_version": code_version(), "tolerance": tol, "L_f": l_f, "table": {}}
    for order in orders:
        for ppm in cfg.ppm:
            base = _task_params(replace(cfg, order=order, r_bath=rb_grid[-1], r_dipole=rd_grid[-1]), ppm)

            def fit_at(rd, rb):
                curves = []
                for i in range(cfg.n_configs):
                    bath = bath_for(base, i)
                    inner = np.flatnonzero(np.linalg.norm(bath.positions, axis=1) <= rb)
                    sub = bath.subset(inner)
                    sub.r_bath = rb
                    cl = build_cluster_set(sub.positions, rd, order)
                    curves.append(
                        gcce_coherence(
                            sub,
                            cl,
                            cfg.central(),
                            ExternalField.along_z(cfg.field_G),
                            np.asarray(base["times"]),
                            cfg.n_mc_samples,
                            seed=derive_seed(cfg.seed, MC_STREAM, i),
                        )
                    )
                f = fit_curve(ensemble_average(curves), method=method, l_f=l_f)
                return f.t2, f.p

            rd_vals = [fit_at(rd, rb_grid[-1]) for rd in rd_grid]
            i_rd = _converged_index(rd_vals, tol)
            rd_conv = rd_grid[i_rd] if i_rd is not None else None
            rd_use = rd_conv if rd_conv is not None else rd_grid[-1]
            rb_vals = [fit_at(rd_use, rb) for rb in rb_grid]
            i_rb = _converged_index(rb_vals, tol)
            rb_conv = rb_grid[i_rb] if i_rb is not None else None
            report["table"].setdefault(str(order), {})[f"{ppm:g}"] = {
                "r_dipole_scan": {f"{r:g}": {"T2": v[0], "p": v[1]} for r, v in zip(rd_grid, rd_vals)},
                "r_bath_scan": {f"{r:g}": {"T2": v[0], "p": v[1]} for r, v in zip(rb_grid, rb_vals)},
                "r_dipole": rd_conv,
                "r_bath": rb_conv,
                "bracketed": rd_conv is not None and rb_conv is not None,
            }
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        Path(cfg.output_dir, "convergence.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def oracle_check(
    n_baths: int = 50,
    min_spins: int = 2,
    max_spins: int = 4,
    seed: int = 0,
    field_G: float = 100.0,
    radius: float = 40.0,
    times=None,
    n_mc_samples: int = 4,
) -> dict:
    """Compare gCCE at order = bath size against exact evolution on small random baths.

    Positions are continuous (off-lattice) inside a sphere of ``radius`` with
    a 2 A minimum separation; both paths see the same bath-state samples.
    """
    if not 1 <= min_spins <= max_spins <= 8:
        raise ValidationError("need 1 <= min_spins <= max_spins <= 8")
    from .engine import exact_coherence, sample_bath_states

    times = np.linspace(0.0, 0.02, 41) if times is None else np.asarray(times, dtype=float)
    central = CentralSpin()
    fld = ExternalField.along_z(field_G)
    errors = []
    for b in range(n_baths):
        gen = rng(seed, 4, b)
        n = int(gen.integers(min_spins, max_spins + 1))
        pos = np.zeros((0, 3))
        while len(pos) < n:
            p = gen.uniform(-radius, radius, 3)
            if 2.0 <= np.linalg.norm(p) <= radius and all(np.linalg.norm(pos - p, axis=1) >= 2.0):
                pos = np.vstack([pos, p])
        bath = SpinBathConfiguration(pos, 1.0, radius, config_id=b)
        states = sample_bath_states(n, n_mc_samples, derive_seed(seed, MC_STREAM, b))
        g = gcce_coherence(bath, build_cluster_set(pos, 2 * radius + 1, n), central, fld, times, bath_states=states)
        e = exact_coherence(bath, central, fld, times, bath_states=states)
        errors.append(float(np.abs(g.values - e.values).max()))
    return {"n_baths": n_baths, "max_error": max(errors), "errors": errors}
