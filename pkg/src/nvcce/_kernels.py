"""Compiled inner loop of the echo computation."""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def echo_coherence(h, r_a, r_b, perm, taus, la, lb, uniform):  # pragma: no cover - compiled
    """Normalised Hahn-echo coherence for a batch of Hamiltonians.

    For entry ``b`` the initial state is (|r_a[b]> + |r_b[b]>)/sqrt(2); the
    pi pulse is the row permutation ``perm``; the result at total time
    2 tau is sum_k phi[lb, k] conj(phi[la, k]) normalised by its t = 0 value.
    Complex arithmetic is split into real arrays so the inner products vectorise.
    With ``uniform`` the phase factors are advanced by recurrence instead of
    evaluating sin/cos at every grid point.
    """
    n, d, _ = h.shape
    nt = len(taus)
    db = d // 3
    out = np.empty((n, nt), dtype=np.complex128)
    wr = np.empty((d, d))
    wi = np.empty((d, d))
    var = np.empty((db, d))
    vai = np.empty((db, d))
    vbr = np.empty((db, d))
    vbi = np.empty((db, d))
    ar = np.empty(d)
    ai = np.empty(d)
    xr = np.empty(d)
    xi = np.empty(d)
    zr = np.empty(d)
    zi = np.empty(d)
    pr = np.empty(d)
    pim = np.empty(d)
    qr = np.empty(d)
    qi = np.empty(d)
    s = np.sqrt(0.5)
    dt = taus[1] - taus[0] if nt > 1 else 0.0
    for b in range(n):
        e, v = np.linalg.eigh(h[b])
        for j in range(d):
            c = (np.conj(v[r_a[b], j]) + np.conj(v[r_b[b], j])) * s
            ar[j] = c.real
            ai[j] = c.imag
        # W = V^H Pi V
        for i in range(d):
            for j in range(d):
                acc = 0j
                for m in range(d):
                    acc += np.conj(v[m, i]) * v[perm[m], j]
                wr[i, j] = acc.real
                wi[i, j] = acc.imag
        for k in range(db):
            for j in range(d):
                ca = v[la * db + k, j]
                cb = v[lb * db + k, j]
                var[k, j] = ca.real
                vai[k, j] = ca.imag
                vbr[k, j] = cb.real
                vbi[k, j] = cb.imag
        if uniform:
            for j in range(d):
                pr[j] = np.cos(e[j] * taus[0])
                pim[j] = -np.sin(e[j] * taus[0])
                qr[j] = np.cos(e[j] * dt)
                qi[j] = -np.sin(e[j] * dt)
        for t in range(nt):
            if uniform:
                if t > 0:
                    for j in range(d):
                        tmp = pr[j] * qr[j] - pim[j] * qi[j]
                        pim[j] = pr[j] * qi[j] + pim[j] * qr[j]
                        pr[j] = tmp
            else:
                for j in range(d):
                    pr[j] = np.cos(e[j] * taus[t])
                    pim[j] = -np.sin(e[j] * taus[t])
            for j in range(d):
                xr[j] = pr[j] * ar[j] - pim[j] * ai[j]
                xi[j] = pr[j] * ai[j] + pim[j] * ar[j]
            for i in range(d):
                sr = 0.0
                si = 0.0
                for j in range(d):
                    sr += wr[i, j] * xr[j] - wi[i, j] * xi[j]
                    si += wr[i, j] * xi[j] + wi[i, j] * xr[j]
                zr[i] = pr[i] * sr - pim[i] * si
                zi[i] = pr[i] * si + pim[i] * sr
            tr = 0.0
            ti = 0.0
            for k in range(db):
                far = 0.0
                fai = 0.0
                fbr = 0.0
                fbi = 0.0
                for j in range(d):
                    far += var[k, j] * zr[j] - vai[k, j] * zi[j]
                    fai += var[k, j] * zi[j] + vai[k, j] * zr[j]
                    fbr += vbr[k, j] * zr[j] - vbi[k, j] * zi[j]
                    fbi += vbr[k, j] * zi[j] + vbi[k, j] * zr[j]
                tr += fbr * far + fbi * fai
                ti += fbi * far - fbr * fai
            out[b, t] = 2.0 * (tr + 1j * ti)
    return out
