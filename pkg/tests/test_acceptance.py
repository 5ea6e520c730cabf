"""Acceptance criteria 1-9.

Each criterion is a function returning ``(passed, detail)``; the pytest
wrappers assert on it and a PASS/FAIL line per criterion is printed in the
terminal summary. Run directly with ``python3 tests/test_acceptance.py``.

Desk ensembles are checkpointed under ``$NVCCE_ACCEPTANCE_CACHE`` (default
``.acceptance_cache`` in the repository root). The first run computes them
(a few hours on one core); later runs reuse the per-configuration files.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from nvcce.bath import generate_configuration
from nvcce.clusters import build_cluster_set
from nvcce.engine import CoherenceCurve, default_time_grid, gcce_coherence
from nvcce.ensemble import bootstrap_subsample, half_width
from nvcce.fitting import METHODS, fit_curve
from nvcce.model import CentralSpin, ExternalField
from nvcce.seeds import BATH_STREAM, derive_seed, rng
from nvcce.workflows import RunConfig, loglog_slope, oracle_check, run_simulation

CACHE = Path(os.environ.get("NVCCE_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".acceptance_cache"))
RESULTS: dict[int, tuple[bool, str]] = {}

SWEEP_PPM = (10.0, 30.0, 100.0)
BOOTSTRAP_PPM = 10.0
BOOTSTRAP_CONFIGS = 300
FIELD_PPM = 5.0
FIELD_CONFIGS = 100
FIELD_SAMPLES = 32
FIELDS = (1.0, 10.0, 100.0, 500.0)


def record(n: int, ok: bool, detail: str) -> tuple[bool, str]:
    RESULTS[n] = (bool(ok), detail)
    return bool(ok), detail


def desk(ppm: float, n_configs: int = 100, n_mc: int = 64, field: float = 100.0):
    cfg = RunConfig(
        ppm=[ppm],
        order=2,
        scale="desk",
        n_configs=n_configs,
        n_mc_samples=n_mc,
        field_G=field,
        fit_methods=list(METHODS),
        l_f=[0.4],
        seed=2024,
        output_dir=str(CACHE / "desk"),
    )
    return run_simulation(cfg, write_summary=False)[ppm]


# --- criteria ---------------------------------------------------------------


def criterion_1():
    r = oracle_check(n_baths=50, min_spins=2, max_spins=4, seed=11)
    return record(1, r["max_error"] < 1e-8, f"max_t |dL| = {r['max_error']:.2e} over 50 baths (< 1e-8)")


def criterion_2():
    seeds = [derive_seed(5, BATH_STREAM, i) for i in range(500)]
    counts = np.array([len(generate_configuration(0.1, 1000.0, seed=s)) for s in seeds])
    m, s = counts.mean(), counts.std(ddof=1)
    return record(2, abs(m - 74) <= 3 and abs(s - 8) <= 2, f"mean {m:.2f} (74 +- 3), sigma {s:.2f} (8 +- 2)")


def criterion_3():
    from nvcce.bath import SpinBathConfiguration

    bath = SpinBathConfiguration(np.array([[12.0, -7.0, 25.0]]), 1.0, 100.0)
    t = default_time_grid(1.0)
    worst = 0.0
    for state in (0.5, -0.5):
        cl = build_cluster_set(bath.positions, 100.0, 1)
        c = gcce_coherence(bath, cl, CentralSpin(), ExternalField.along_z(100.0), t, bath_states=np.array([[state]]))
        worst = max(worst, float(np.abs(1 - c.values).max()))
    return record(3, worst < 1e-3, f"max |1 - L| = {worst:.2e} (< 1e-3)")


def criterion_4():
    t = np.logspace(-6, 2, 400)
    worst = 0.0
    for t2 in np.logspace(-4, 1, 10):
        for p in np.linspace(0.5, 3.0, 10):
            tt = t * t2
            y = np.exp(-((tt / t2) ** p))
            for m in METHODS:
                r = fit_curve(tt, y, method=m, l_f=0.4)
                worst = max(worst, abs(r.t2 / t2 - 1), abs(r.p / p - 1))
    return record(4, worst < 1e-6, f"worst relative error {worst:.2e} (< 1e-6) over 10x10 grid, 3 methods")


def criterion_5():
    f = desk(100.0).fit("exponential", 0.4)
    t2_us = f.t2 * 1e3
    ok = 0.4 <= t2_us <= 0.9 and 1.0 <= f.p <= 1.6
    return record(5, ok, f"100 ppm gCCE2: T2 = {t2_us:.3f} us in [0.4, 0.9], p = {f.p:.3f} in [1.0, 1.6]")


def criterion_6():
    t2 = [desk(p).fit("exponential", 0.4).t2 for p in SWEEP_PPM]
    slope = loglog_slope(SWEEP_PPM, t2)
    detail = f"slope {slope:.3f} (-1.0 +- 0.1); T2/us = " + ", ".join(f"{x * 1e3:.3f}" for x in t2)
    return record(6, abs(slope + 1) <= 0.1, detail)


def criterion_7():
    ok, parts = True, []
    for ppm in SWEEP_PPM:
        r = desk(ppm)
        e, pw, lin = (r.fit(m, 0.4) for m in ("exponential", "power", "linear"))
        ordered = lin.t2 < e.t2 and lin.p > e.p
        agree = abs(pw.t2 / e.t2 - 1) < 0.05 and abs(pw.p / e.p - 1) < 0.05
        ok &= ordered and agree
        parts.append(
            f"{ppm:g} ppm: lin/exp T2 {lin.t2 / e.t2:.3f} p {lin.p / e.p:.3f}; "
            f"pow/exp T2 {pw.t2 / e.t2:.3f} p {pw.p / e.p:.3f}"
        )
    return record(7, ok, "; ".join(parts))


def _synthetic_iid(n: int = 5000):
    t = np.linspace(0, 3.0, 101)
    gen = rng(77)
    t2 = np.exp(gen.normal(0.0, 0.3, n))
    return [CoherenceCurve(t, np.exp(-((t / x) ** 1.5))) for x in t2]


def criterion_8():
    members = desk(BOOTSTRAP_PPM, n_configs=BOOTSTRAP_CONFIGS).members
    rep = bootstrap_subsample(members, [50, 250], repeats=200, seed=3)
    w50, w250 = (half_width(rep.subsamples[n].d_t2) for n in (50, 250))
    narrows = w250 < w50
    syn = bootstrap_subsample(_synthetic_iid(), [50, 100, 250, 500], repeats=400, seed=4)
    w = {n: half_width(s.d_t2) for n, s in syn.subsamples.items()}
    dev = max(abs(w[n] / w[50] / np.sqrt(50 / n) - 1) for n in w)
    detail = (
        f"desk {BOOTSTRAP_PPM:g} ppm N=50 -> 250 half-width {w50:.4f} -> {w250:.4f}; "
        f"synthetic 1/sqrt(N) max deviation {dev:.1%} (< 20%)"
    )
    return record(8, narrows and dev < 0.2, detail)


def criterion_9():
    t2 = [desk(FIELD_PPM, FIELD_CONFIGS, FIELD_SAMPLES, field=b).fit("exponential", 0.4).t2 for b in FIELDS]
    spread = (max(t2) - min(t2)) / np.mean(t2)
    above = t2[1:]  # B >= 10 G, reported for context only
    spread_above = (max(above) - min(above)) / np.mean(above)
    detail = f"{FIELD_PPM:g} ppm, B = {FIELDS} G: T2/us = " + ", ".join(f"{x * 1e3:.3f}" for x in t2)
    detail += f"; spread {spread:.2%} (< 5%); spread over B >= 10 G {spread_above:.2%}"
    return record(9, spread < 0.05, detail)


CRITERIA = [
    criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
    criterion_6, criterion_7, criterion_8, criterion_9,
]


@pytest.mark.parametrize("n", range(1, 10))
def test_criterion(n):
    ok, detail = CRITERIA[n - 1]()
    assert ok, detail


if __name__ == "__main__":
    for n, fn in enumerate(CRITERIA, 1):
        ok, detail = fn()
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}", flush=True)
