import json

import numpy as np
import pytest

from nvcce.engine import CoherenceCurve
from nvcce.ensemble import bootstrap_subsample, ensemble_average, half_width, histogram_pdf

T = np.linspace(0, 3.0, 101)


def family(n, seed=0, sigma=0.3):
    t2 = np.exp(np.random.default_rng(seed).normal(0, sigma, n))
    return [CoherenceCurve(T, np.exp(-((T / x) ** 1.5)), {"config_id": i}) for i, x in enumerate(t2)]


def test_average_single_and_complement():
    c = family(1)[0]
    np.testing.assert_array_equal(ensemble_average([c]).values, c.values)
    d = CoherenceCurve(T, 2 - c.values)
    np.testing.assert_allclose(ensemble_average([c, d]).values, 1.0)


def test_average_bounds():
    cs = family(500)
    avg = ensemble_average(cs).values.real
    stack = np.array([c.values.real for c in cs])
    assert np.all(avg >= stack.min(0) - 1e-15) and np.all(avg <= stack.max(0) + 1e-15)


def test_average_grid_mismatch():
    with pytest.raises(ValueError, match="different time grid"):
        ensemble_average([family(1)[0], CoherenceCurve(T * 2, T)])


def test_full_subsample_has_no_spread():
    cs = family(40)
    rep = bootstrap_subsample(cs, [40], repeats=5)
    s = rep.subsamples[40]
    np.testing.assert_array_equal(s.d_t2, 0)
    np.testing.assert_array_equal(s.d_p, 0)


def test_bootstrap_determinism():
    cs = family(60)
    a = bootstrap_subsample(cs, [10], repeats=30, seed=8).subsamples[10]
    b = bootstrap_subsample(cs, [10], repeats=30, seed=8).subsamples[10]
    np.testing.assert_array_equal(a.d_t2, b.d_t2)
    np.testing.assert_array_equal(a.d_p, b.d_p)


def test_inverse_sqrt_narrowing():
    cs = family(4000, seed=2)
    rep = bootstrap_subsample(cs, [50, 200], repeats=300, seed=1)
    ratio = half_width(rep.subsamples[200].d_t2) / half_width(rep.subsamples[50].d_t2)
    assert ratio == pytest.approx(0.5, rel=0.2)


def test_failures_counted():
    good = family(10)
    flat = [CoherenceCurve(T, np.ones_like(T)) for _ in range(30)]
    rep = bootstrap_subsample(good + flat, [2], repeats=50, seed=0)
    s = rep.subsamples[2]
    assert s.failures > 0 and s.failures + len(s.d_t2) == 50


def test_pdf_normalised():
    x = np.random.default_rng(0).normal(size=2000)
    centers, dens, edges = histogram_pdf(x)
    assert np.sum(dens * np.diff(edges)) == pytest.approx(1.0)
    _, dens1, edges1 = histogram_pdf(np.zeros(5))
    assert np.sum(dens1 * np.diff(edges1)) == pytest.approx(1.0)


def test_report_files(tmp_path):
    rep = bootstrap_subsample(family(30), [5, 10], repeats=20)
    rep.write(tmp_path)
    summary = json.loads((tmp_path / "bootstrap_summary.json").read_text())
    assert set(summary["subsamples"]) == {"5", "10"}
    assert (tmp_path / "pdf_N5_T2.csv").exists() and (tmp_path / "pdf_N10_p.csv").exists()


def test_bad_sizes():
    with pytest.raises(ValueError):
        bootstrap_subsample(family(5), [6])
