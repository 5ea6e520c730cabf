"""Ensemble averages over bath configurations and finite-ensemble uncertainty."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import CoherenceCurve
from .fitting import FitError, fit_curve
from .seeds import BOOTSTRAP_STREAM, rng


def ensemble_average(curves: list[CoherenceCurve]) -> CoherenceCurve:
    if not curves:
        raise ValueError("no curves to average")
    t = curves[0].times
    for i, c in enumerate(curves[1:], 1):
        if c.times.shape != t.shape or not np.array_equal(c.times, t):
            raise ValueError(f"curve {i} is on a different time grid")
    values = np.mean([c.values for c in curves], axis=0)
    meta = {
        "method": "ensemble_average",
        "n_members": len(curves),
        "config_ids": [c.metadata.get("config_id") for c in curves],
        "config_seeds": [c.metadata.get("config_seed") for c in curves],
    }
    for key in ("order", "ppm", "r_bath", "r_dipole", "n_mc_samples", "field_G"):
        if key in curves[0].metadata:
            meta[key] = curves[0].metadata[key]
    return CoherenceCurve(t, values, meta)


def histogram_pdf(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Freedman-Diaconis histogram normalised as a PDF: (centers, density, edges)."""
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0:
        raise ValueError("empty sample")
    lo, hi = samples.min(), samples.max()
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        half = max(1e-9, 1e-9 * abs(lo))
        edges = np.array([lo - half, lo + half])
    else:
        edges = np.histogram_bin_edges(samples, bins="fd")
    density, edges = np.histogram(samples, bins=edges, density=True)
    return (edges[:-1] + edges[1:]) / 2, density, edges


def half_width(samples, coverage: float = 0.9) -> float:
    """Half the width of the central ``coverage`` interval of the samples."""
    q = np.quantile(np.asarray(samples, dtype=float), [(1 - coverage) / 2, (1 + coverage) / 2])
    return float(q[1] - q[0]) / 2


@dataclass
class SubsampleStats:
    size: int
    d_t2: np.ndarray
    d_p: np.ndarray
    failures: int

    def pdf(self, quantity: str = "T2"):
        return histogram_pdf(self.d_t2 if quantity == "T2" else self.d_p)


@dataclass
class EnsembleReport:
    members: list[CoherenceCurve]
    average: CoherenceCurve
    reference_t2: float
    reference_p: float
    method: str
    l_f: float
    subsamples: dict[int, SubsampleStats] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def summary(self) -> dict:
        rows = {}
        for n, s in sorted(self.subsamples.items()):
            rows[str(n)] = {
                "repeats_used": int(len(s.d_t2)),
                "fit_failures": s.failures,
                "half_width_T2": half_width(s.d_t2) if len(s.d_t2) else None,
                "half_width_p": half_width(s.d_p) if len(s.d_p) else None,
                "percentiles_T2": _percentiles(s.d_t2),
                "percentiles_p": _percentiles(s.d_p),
            }
        return {
            "n_members": len(self.members),
            "fit_method": self.method,
            "L_f": self.l_f,
            "T2_full": self.reference_t2,
            "p_full": self.reference_p,
            "subsamples": rows,
            **self.metadata,
        }

    def write(self, outdir) -> None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for n, s in self.subsamples.items():
            for q in ("T2", "p"):
                if (s.d_t2 if q == "T2" else s.d_p).size == 0:
                    continue
                centers, dens, _ = s.pdf(q)
                with (outdir / f"pdf_N{n}_{q}.csv").open("w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["bin_center", "density"])
                    w.writerows(zip(map(float, centers), map(float, dens)))
        (outdir / "bootstrap_summary.json").write_text(json.dumps(self.summary(), indent=1, sort_keys=True))


def _percentiles(x) -> dict:
    x = np.asarray(x)
    if x.size == 0:
        return {}
    qs = (2.5, 5, 25, 50, 75, 95, 97.5)
    return {str(q): float(v) for q, v in zip(qs, np.percentile(x, qs))}


def bootstrap_subsample(
    curves: list[CoherenceCurve],
    sizes,
    repeats: int = 200,
    method: str = "exponential",
    l_f: float = 0.4,
    seed: int = 0,
) -> EnsembleReport:
    """Relative deviations of (T2, p) for random sub-ensembles of each size.

    Each repeat draws ``N`` distinct members (without replacement), averages
    and fits them; deviations are relative to the fit of the full ensemble.
    Failed subsample fits are counted per size and left out of the PDFs.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    n_max = len(curves)
    full = ensemble_average(curves)
    ref = fit_curve(full, method=method, l_f=l_f)
    data = np.array([c.values for c in curves])
    report = EnsembleReport(list(curves), full, ref.t2, ref.p, method, l_f)
    for n in sizes:
        n = int(n)
        if not 1 <= n <= n_max:
            raise ValueError(f"subsample size {n} outside 1..{n_max}")
        d_t2, d_p, fails = [], [], 0
        for r in range(repeats):
            pick = rng(seed, BOOTSTRAP_STREAM, n, r).choice(n_max, size=n, replace=False)
            avg = data[np.sort(pick)].mean(axis=0)
            try:
                fr = fit_curve(full.times, avg, method=method, l_f=l_f)
            except FitError:
                fails += 1
                continue
            if not fr.converged:
                fails += 1
                continue
            d_t2.append((fr.t2 - ref.t2) / ref.t2)
            d_p.append((fr.p - ref.p) / ref.p)
        report.subsamples[n] = SubsampleStats(n, np.array(d_t2), np.array(d_p), fails)
    return report
