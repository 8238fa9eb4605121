"""NumPy implementations of the compiled kernels (same signatures)."""
import math

import numpy as np
from scipy.special import digamma, gammaln

HALF_LOG_PI = 0.5 * math.log(math.pi)


def nig_nll_grad(b, gamma, upsilon, alpha, beta):
    r = b - gamma
    omega = 2.0 * beta * (1.0 + upsilon)
    s = r * r * upsilon + omega
    value = (HALF_LOG_PI - 0.5 * np.log(upsilon) - alpha * np.log(omega)
             + (alpha + 0.5) * np.log(s) + gammaln(alpha) - gammaln(alpha + 0.5))
    db = (alpha + 0.5) * 2.0 * r * upsilon / s
    du = -0.5 / upsilon - alpha * 2.0 * beta / omega + (alpha + 0.5) * (r * r + 2.0 * beta) / s
    da = np.log(s) - np.log(omega) + digamma(alpha) - digamma(alpha + 0.5)
    dbeta = -alpha / beta + (alpha + 0.5) * 2.0 * (1.0 + upsilon) / s
    return value, db, -db, du, da, dbeta


def _iou(s1, e1, s2, e2):
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    if union > 0.0:
        return inter / union
    return 1.0 if (s1 == s2 and e1 == e2) else 0.0


def nms_keep(starts, ends, scores, threshold):
    n = len(starts)
    order = np.lexsort((np.arange(n), starts, -scores))
    dead = np.zeros(n, dtype=bool)
    kept = []
    for a, i in enumerate(order):
        if dead[i]:
            continue
        kept.append(i)
        for j in order[a + 1:]:
            if not dead[j] and _iou(starts[i], ends[i], starts[j], ends[j]) > threshold:
                dead[j] = True
    return np.asarray(kept, dtype=np.int64)


def gaussian_kde(values, points, bandwidth):
    z = (points[:, None] - values[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(values) * bandwidth * math.sqrt(2.0 * math.pi))


def histogram_cdf_map(values, bins):
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.ones_like(values)
    width = (hi - lo) / bins
    k = np.minimum(np.floor((values - lo) / width).astype(np.int64), bins - 1)
    cdf = np.cumsum(np.bincount(k, minlength=bins))
    return cdf[k] / len(values)
