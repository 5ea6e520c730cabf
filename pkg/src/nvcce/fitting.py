"""Stretched-exponential fits of coherence decays, L(t) = exp[-(t/T2)^p].

Three procedures are provided:

- ``exponential``: least squares of exp[-(t/T2)^p] against L(t)
- ``power``: least squares of (t/T2)^p against -ln L(t)
- ``linear``: ordinary least squares of ln(-ln L) against ln t

All of them work on the early part of the decay, 1 > L(t) > L_f.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

METHODS = ("exponential", "power", "linear")
MIN_POINTS = 5
LOG_FLOOR = 1e-3  # log-based fits skip points with -ln L below this
TOL = 1e-10
MAX_ITER = 200


class FitError(ValueError):
    pass


@dataclass
class FitResult:
    t2: float
    p: float
    cov: np.ndarray
    method: str
    l_f: float | None
    n_points: int
    residual_norm: float
    converged: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cov"] = np.asarray(self.cov).tolist()
        return d


def _as_arrays(curve_or_times, values=None, part: str = "real"):
    if values is None:
        t, y = curve_or_times.times, curve_or_times.values
    else:
        t, y = curve_or_times, values
    if part not in ("real", "abs"):
        raise ValueError(f"part must be 'real' or 'abs', got {part!r}")
    y = np.asarray(y)
    return np.asarray(t, dtype=float), (np.abs(y) if part == "abs" else np.real(y))


def truncate_curve(curve_or_times, values=None, l_f: float = 0.4, log_based: bool = False, part: str = "real"):
    """Points of the initial decay with 1 > L > l_f and t > 0.

    The data are cut at the first point (t > 0) where L drops to ``l_f`` or
    below; later recoveries above ``l_f`` are not used. ``part`` selects Re L
    (default) or |L| from complex data.
    """
    if not 0 < l_f < 1:
        raise ValueError(f"L_f must lie in (0, 1), got {l_f}")
    t, y = _as_arrays(curve_or_times, values, part)
    below = np.flatnonzero((t > 0) & ~(y > l_f))
    end = below[0] if below.size else len(t)
    keep = np.zeros(len(t), dtype=bool)
    keep[:end] = True
    keep &= (t > 0) & (y < 1) & (y > l_f)
    if log_based:
        with np.errstate(divide="ignore", invalid="ignore"):
            keep &= -np.log(np.where(keep, y, 0.5)) >= LOG_FLOOR
    if keep.sum() < MIN_POINTS:
        if np.all(y[t > 0] >= 1 - 1e-12):
            raise FitError("degenerate input: L(t) never drops below 1")
        raise FitError(f"only {int(keep.sum())} points with 1 > L > {l_f}; need {MIN_POINTS}")
    return t[keep], y[keep]


def _clean(t, y, log_based):
    t = np.asarray(t, dtype=float)
    y = np.real(np.asarray(y))
    ok = (t > 0) & (y > 0) & (y < 1)
    if log_based:
        with np.errstate(divide="ignore", invalid="ignore"):
            ok &= -np.log(np.where(ok, y, 0.5)) >= LOG_FLOOR
    if ok.sum() < MIN_POINTS:
        raise FitError(f"only {int(ok.sum())} usable points; need {MIN_POINTS}")
    return t[ok], y[ok]


def fit_linear_loglog(t, y, l_f: float | None = None) -> FitResult:
    """Closed-form fit of ln(-ln L) = p ln t - p ln T2."""
    t, y = _clean(t, y, log_based=True)
    x = np.log(t)
    z = np.log(-np.log(y))
    a = np.column_stack([x, np.ones_like(x)])
    (p, c), *_ = np.linalg.lstsq(a, z, rcond=None)
    r = z - a @ np.array([p, c])
    rss = float(r @ r)
    dof = max(len(z) - 2, 1)
    cov_pc = rss / dof * np.linalg.inv(a.T @ a)
    t2 = float(np.exp(-c / p))
    # d(T2, p) / d(p, c)
    jac = np.array([[t2 * c / p**2, -t2 / p], [1.0, 0.0]])
    cov = jac @ cov_pc @ jac.T
    return FitResult(t2, float(p), cov, "linear", l_f, len(t), float(np.sqrt(rss)), True)


def _levenberg_marquardt(fun, x0, weights=None):
    """Damped Gauss-Newton on a residual function returning (r, J).

    Damping follows the Marquardt schedule: lambda is divided by 10 after an
    accepted step and multiplied by 10 after a rejected one, scaled by the
    diagonal of J^T J. Stops when every component of the accepted step is
    below TOL relative to max(1, |x|).
    """
    x = np.asarray(x0, dtype=float)
    w = None if weights is None else np.sqrt(np.asarray(weights, dtype=float))
    lam = 1e-3

    def evaluate(x):
        r, j = fun(x)
        if w is not None:
            r, j = r * w, j * w[:, None]
        return r, j

    r, j = evaluate(x)
    cost = r @ r
    converged = False
    for _ in range(MAX_ITER):
        g = j.T @ r
        a = j.T @ j
        if not np.all(np.isfinite(a)):
            break
        accepted = False
        while lam < 1e16:
            m = a + lam * np.diag(np.maximum(np.diag(a), 1e-300))
            try:
                step = np.linalg.solve(m, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + step
            r_new, j_new = evaluate(x_new)
            cost_new = r_new @ r_new
            if np.isfinite(cost_new) and cost_new <= cost:
                accepted = True
                break
            lam *= 10
        if not accepted:
            converged = cost == 0 or np.linalg.norm(g) <= 1e-14 * max(1.0, cost)
            break
        small = np.all(np.abs(step) <= TOL * np.maximum(1.0, np.abs(x)))
        x, r, j, cost = x_new, r_new, j_new, cost_new
        lam = max(lam / 10, 1e-12)
        if small or cost == 0:
            converged = True
            break
    return x, r, j, converged


def _finish(x, r, j, converged, method, l_f, n, weights=None):
    u, p = x
    with np.errstate(over="ignore", invalid="ignore"):
        return _package(u, p, r, j, converged, method, l_f, n)


def _package(u, p, r, j, converged, method, l_f, n):
    t2 = float(np.exp(u))
    rss = float(r @ r)
    dof = max(n - 2, 1)
    try:
        cov_u = rss / dof * np.linalg.inv(j.T @ j)
    except np.linalg.LinAlgError:
        cov_u = np.full((2, 2), np.nan)
        converged = False
    jac = np.diag([t2, 1.0])
    cov = jac @ cov_u @ jac.T
    if not (np.isfinite(t2) and t2 > 0 and p > 0):
        converged = False
    return FitResult(t2, float(p), cov, method, l_f, n, float(np.sqrt(rss)), bool(converged))


def _initial_guess(t, y):
    try:
        lin = fit_linear_loglog(t, y)
        if np.isfinite(lin.t2) and lin.t2 > 0 and lin.p > 0:
            return np.array([np.log(lin.t2), lin.p])
    except FitError:
        pass
    # crude fallback: L = 1/e at T2, p = 1
    y_ok = np.clip(y, 1e-12, 1 - 1e-12)
    s = -np.log(y_ok)
    k = int(np.argmin(np.abs(s - 1)))
    return np.array([np.log(t[k] / s[k]), 1.0])


def fit_exponential(t, y, l_f: float | None = None, weights=None) -> FitResult:
    """Least squares of exp[-(t/T2)^p] against L(t); parameters (ln T2, p) internally."""
    t, y = _clean(t, y, log_based=False)
    lt = np.log(t)

    def fun(x):
        u, p = x
        s = np.exp(p * (lt - u))
        f = np.exp(-s)
        r = f - y
        j = np.column_stack([f * p * s, -f * s * (lt - u)])
        return r, j

    x, r, j, ok = _levenberg_marquardt(fun, _initial_guess(t, y), weights)
    if weights is not None:
        r, j = fun(x)
    return _finish(x, r, j, ok, "exponential", l_f, len(t))


def fit_power(t, y, l_f: float | None = None, weights=None) -> FitResult:
    """Least squares of (t/T2)^p against -ln L(t)."""
    t, y = _clean(t, y, log_based=True)
    lt = np.log(t)
    target = -np.log(y)

    def fun(x):
        u, p = x
        s = np.exp(p * (lt - u))
        return s - target, np.column_stack([-p * s, s * (lt - u)])

    x, r, j, ok = _levenberg_marquardt(fun, _initial_guess(t, y), weights)
    if weights is not None:
        r, j = fun(x)
    return _finish(x, r, j, ok, "power", l_f, len(t))


_FITTERS = {"exponential": fit_exponential, "power": fit_power, "linear": fit_linear_loglog}


def fit_curve(
    curve_or_times, values=None, method: str = "exponential", l_f: float = 0.4, part: str = "real"
) -> FitResult:
    """Truncate at ``l_f`` and fit with the named method."""
    if method not in _FITTERS:
        raise ValueError(f"unknown fit method {method!r}; choose from {METHODS}")
    t, y = truncate_curve(curve_or_times, values, l_f, log_based=method != "exponential", part=part)
    return _FITTERS[method](t, y, l_f=l_f)


def local_slope(curve_or_times, values=None) -> tuple[np.ndarray, np.ndarray]:
    """Local stretching exponent d ln(-ln L) / d ln t by centred differences.

    Returns (t, p_local); NaN where a point or one of its neighbours is
    outside 0 < L < 1, t > 0, and at both ends of the grid.
    """
    t, y = _as_arrays(curve_or_times, values)
    ok = (t > 0) & (y > 0) & (y < 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(ok, np.log(np.where(ok, t, 1.0)), np.nan)
        z = np.where(ok, np.log(-np.log(np.where(ok, y, 0.5))), np.nan)
    out = np.full(len(t), np.nan)
    if len(t) >= 3:
        out[1:-1] = (z[2:] - z[:-2]) / (x[2:] - x[:-2])
    return t, out


def earliest_point_sensitivity(
    curve_or_times, values=None, l_f: float = 0.4, method: str = "linear", drop: int = 3
) -> list[dict]:
    """Refit after removing the first 1..drop truncated points.

    Each entry reports the relative change of T2 and p against the fit that
    uses all points, exposing how strongly the shortest times steer a method.
    """
    t, y = truncate_curve(curve_or_times, values, l_f, log_based=method != "exponential")
    fitter = _FITTERS[method]
    base = fitter(t, y, l_f=l_f)
    rows = []
    for k in range(1, drop + 1):
        if len(t) - k < MIN_POINTS:
            break
        r = fitter(t[k:], y[k:], l_f=l_f)
        rows.append({"dropped": k, "dT2": r.t2 / base.t2 - 1, "dp": r.p / base.p - 1})
    return rows
