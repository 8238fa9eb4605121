# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must agree with ``_pure`` to rounding."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, lgamma, exp, sqrt, fabs, floor, M_PI

cnp.import_array()


cdef double _digamma(double x) nogil:
    cdef double acc = 0.0
    cdef double inv, inv2
    while x < 10.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    return acc + log(x) - 0.5 * inv - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0
        - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))))


def nig_nll_grad(const double[::1] b, const double[::1] gamma, const double[::1] upsilon,
                 const double[::1] alpha, const double[::1] beta):
    cdef Py_ssize_t n = b.shape[0]
    out = np.empty(n)
    db = np.empty(n)
    dg = np.empty(n)
    du = np.empty(n)
    da = np.empty(n)
    dbeta = np.empty(n)
    cdef double[::1] o = out, gb = db, gg = dg, gu = du, ga = da, gbe = dbeta
    cdef Py_ssize_t i
    cdef double r, u, a, be, omega, s, half_log_pi = 0.5 * log(M_PI)
    with nogil:
        for i in range(n):
            r = b[i] - gamma[i]
            u = upsilon[i]
            a = alpha[i]
            be = beta[i]
            omega = 2.0 * be * (1.0 + u)
            s = r * r * u + omega
            o[i] = (half_log_pi - 0.5 * log(u) - a * log(omega)
                    + (a + 0.5) * log(s) + lgamma(a) - lgamma(a + 0.5))
            gb[i] = (a + 0.5) * 2.0 * r * u / s
            gg[i] = -gb[i]
            gu[i] = -0.5 / u - a * 2.0 * be / omega + (a + 0.5) * (r * r + 2.0 * be) / s
            ga[i] = log(s) - log(omega) + _digamma(a) - _digamma(a + 0.5)
            gbe[i] = -a / be + (a + 0.5) * 2.0 * (1.0 + u) / s
    return out, db, dg, du, da, dbeta


def nms_keep(const double[::1] starts, const double[::1] ends, const double[::1] scores, double threshold):
    cdef Py_ssize_t n = starts.shape[0]
    order = np.lexsort((np.arange(n), np.asarray(starts), -np.asarray(scores)))
    cdef long[::1] idx = order.astype(np.int64)
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    kept = []
    cdef Py_ssize_t a, c, i, j
    cdef double inter, union, iou
    for a in range(n):
        i = idx[a]
        if dead[i]:
            continue
        kept.append(i)
        for c in range(a + 1, n):
            j = idx[c]
            if dead[j]:
                continue
            inter = min(ends[i], ends[j]) - max(starts[i], starts[j])
            if inter < 0.0:
                inter = 0.0
            union = (ends[i] - starts[i]) + (ends[j] - starts[j]) - inter
            if union > 0.0:
                iou = inter / union
            else:
                iou = 1.0 if (starts[i] == starts[j] and ends[i] == ends[j]) else 0.0
            if iou > threshold:
                dead[j] = 1
    return np.asarray(kept, dtype=np.int64)


def gaussian_kde(const double[::1] values, const double[::1] points, double bandwidth):
    cdef Py_ssize_t n = values.shape[0], m = points.shape[0]
    out = np.empty(m)
    cdef double[::1] o = out
    cdef Py_ssize_t i, k
    cdef double acc, z, norm = 1.0 / (n * bandwidth * sqrt(2.0 * M_PI))
    with nogil:
        for k in range(m):
            acc = 0.0
            for i in range(n):
                z = (points[k] - values[i]) / bandwidth
                acc += exp(-0.5 * z * z)
            o[k] = acc * norm
    return out


def histogram_cdf_map(const double[::1] values, long bins):
    cdf = np.empty(bins)
    out = np.empty(values.shape[0])
    _histogram_cdf_map(values, bins, cdf, out)
    return out


cdef void _histogram_cdf_map(const double[::1] values, long bins, double[::1] cdf,
                             double[::1] out):
    cdef Py_ssize_t n = values.shape[0], i
    cdef double lo = values[0], hi = values[0], width
    cdef long k
    for i in range(n):
        if values[i] < lo:
            lo = values[i]
        if values[i] > hi:
            hi = values[i]
    if hi == lo:
        for i in range(n):
            out[i] = 1.0
        return
    width = (hi - lo) / bins
    for k in range(bins):
        cdf[k] = 0.0
    for i in range(n):
        k = <long>floor((values[i] - lo) / width)
        if k >= bins:
            k = bins - 1
        cdf[k] += 1.0
    for k in range(1, bins):
        cdf[k] += cdf[k - 1]
    for i in range(n):
        k = <long>floor((values[i] - lo) / width)
        if k >= bins:
            k = bins - 1
        out[i] = cdf[k] / n
