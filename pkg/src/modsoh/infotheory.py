"""Nearest-neighbour estimates of mutual and conditional mutual information.

For each point the distance to its ``k``-th neighbour in the joint space
(max-norm) sets a window; counting points inside the same window in the
marginal subspaces gives

    xi_i = psi(k_i) - psi(n_FH,i) - psi(n_GH,i) + psi(n_H,i)

and the CMI estimate is ``max(mean(xi), 0)``.  Mutual information is the
CMI given an independent standard normal column, which keeps a single
estimator (and a single bias profile) behind every quantity.

Coordinates are standardized and then jittered by 1e-10 standard deviations
so that tied values (C-rate, repeated temperatures) do not collapse windows.
The jitter for a column is seeded from the column's own bytes, so swapping
``f`` and ``g`` gives the same estimate.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import NormalizationDegenerateError, ValidationError

EULER_GAMMA = 0.57721566490153286061
JITTER = 1e-10
DEGENERATE_SELF_INFO = 1e-6
_BLOCK = 256
# extra entropy word for the conditioning-noise stream; without it a caller
# who draws data from default_rng(seed) would get H identical to that data
_NOISE_STREAM = 0x6E6F697365

# Bernoulli-number coefficients B_2n / (2n) of the asymptotic series
_ASYMPTOTIC = (1.0 / 12, -1.0 / 120, 1.0 / 252, -1.0 / 240, 1.0 / 132,
               -691.0 / 32760, 1.0 / 12)


def digamma(x):
    """Digamma function for positive arguments.

    Arguments below 10 are shifted up with ``psi(x) = psi(x + 1) - 1/x``,
    then the asymptotic expansion is summed.  Accurate to about 1e-14.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValidationError("digamma is only defined here for x > 0")
    x = x.copy()
    acc = np.zeros_like(x)
    small = x < 10.0
    while np.any(small):
        acc[small] -= 1.0 / x[small]
        x[small] += 1.0
        small = x < 10.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    for c in reversed(_ASYMPTOTIC):
        series = (series + c) * inv2
    out = acc + np.log(x) - 0.5 / x - series
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class MiEstimate:
    """A mutual-information estimate in nats.

    ``normalized`` is NaN when no normalization was requested.  ``flagged``
    counts points whose window count was zero and was replaced by one.
    """

    raw: float
    normalized: float
    k: int
    n: int
    flagged: int = 0


def _as_2d(x, name):
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[1] < 1:
        raise ValidationError(f"{name} must be a vector or an (N, d) array")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} contains non-finite values")
    return a


def _jittered(a, seed, stream=0):
    """Standardize each column and add content-seeded uniform jitter."""
    out = np.empty_like(a)
    for j in range(a.shape[1]):
        col = a[:, j]
        sd = float(np.std(col, ddof=1)) if len(col) > 1 else 0.0
        z = (col - col.mean()) / sd if sd > 0 else col - col.mean()
        key = zlib.crc32(np.ascontiguousarray(col).tobytes())
        rng = np.random.default_rng([seed, stream, key])
        out[:, j] = z + JITTER * rng.uniform(-1.0, 1.0, size=len(col))
    return out


def _cheb(a, rows):
    """Max-norm distances from ``a[rows]`` to every point."""
    d = np.abs(a[rows, None, 0] - a[None, :, 0])
    for j in range(1, a.shape[1]):
        np.maximum(d, np.abs(a[rows, None, j] - a[None, :, j]), out=d)
    return d


def _cmi_core(f, g, h, k):
    n = len(f)
    counts = np.empty((n, 4))
    for start in range(0, n, _BLOCK):
        rows = np.arange(start, min(start + _BLOCK, n))
        d_f, d_g, d_h = _cheb(f, rows), _cheb(g, rows), _cheb(h, rows)
        d_fh = np.maximum(d_f, d_h)
        d_gh = np.maximum(d_g, d_h)
        d_joint = np.maximum(d_fh, d_g)
        d_joint[np.arange(len(rows)), rows] = np.inf
        eps = np.partition(d_joint, k - 1, axis=1)[:, k - 1][:, None]
        # self is excluded: its joint distance is inf, and the marginal
        # distances to itself are 0 so subtract one
        counts[rows, 0] = np.count_nonzero(d_joint <= eps, axis=1)
        counts[rows, 1] = np.count_nonzero(d_fh <= eps, axis=1) - 1
        counts[rows, 2] = np.count_nonzero(d_gh <= eps, axis=1) - 1
        counts[rows, 3] = np.count_nonzero(d_h <= eps, axis=1) - 1
    zero = counts < 1
    flagged = int(np.count_nonzero(zero.any(axis=1)))
    counts[zero] = 1.0
    psi = digamma(counts)
    xi = psi[:, 0] - psi[:, 1] - psi[:, 2] + psi[:, 3]
    return max(float(np.mean(xi)), 0.0), flagged


def _check(n, k):
    if k < 1:
        raise ValidationError("k must be at least 1")
    if n <= 2 * k:
        raise ValidationError(f"need more than 2k = {2 * k} samples, got {n}")


def knn_cmi(f, g, h, k: int = 5, seed: int = 0) -> MiEstimate:
    """Clamped kNN estimate of I(F; G | H) in nats.

    ``seed`` only affects the tie-breaking jitter.
    """
    f, g, h = _as_2d(f, "f"), _as_2d(g, "g"), _as_2d(h, "h")
    n = len(f)
    if len(g) != n or len(h) != n:
        raise ValidationError("f, g and h must have the same number of samples")
    _check(n, k)
    raw, flagged = _cmi_core(_jittered(f, seed), _jittered(g, seed), _jittered(h, seed), k)
    return MiEstimate(raw, float("nan"), k, n, flagged)


def noise_column(n: int, seed: int) -> np.ndarray:
    """Seeded unit white Gaussian noise used as the conditioning variable for MI."""
    return np.random.default_rng([seed, _NOISE_STREAM]).standard_normal((n, 1))


def knn_mi(f, g, k: int = 5, seed: int = 0) -> MiEstimate:
    """kNN estimate of I(F; G) as the CMI given independent Gaussian noise."""
    f = _as_2d(f, "f")
    return knn_cmi(f, g, noise_column(len(f), seed), k, seed)


def self_information(f, k: int = 5, seed: int = 0) -> float:
    """Finite proxy for I(F; F): the estimator applied to F and a jittered copy.

    The true value is infinite for a continuous variable; the estimate grows
    with N and serves only as a normalizer.
    """
    f = _as_2d(f, "f")
    n = len(f)
    _check(n, k)
    a = _jittered(f, seed, stream=0)
    b = _jittered(f, seed, stream=1)
    h = _jittered(noise_column(n, seed), seed)
    return _cmi_core(a, b, h, k)[0]


def _normalizer(f, g, k, seed, names, cache):
    vals = []
    for x, name in ((f, names[0]), (g, names[1])):
        key = None
        if cache is not None and name is not None:
            key = (name, k, seed)
            if key in cache:
                vals.append(cache[key])
                continue
        v = self_information(x, k, seed)
        if key is not None:
            cache[key] = v
        vals.append(v)
    lo = min(vals)
    if lo <= DEGENERATE_SELF_INFO:
        which = names[int(np.argmin(vals))] or ("f" if vals[0] <= vals[1] else "g")
        raise NormalizationDegenerateError(f"self-information of {which} is {lo:.3g}; "
                                           "cannot normalize")
    return lo


def normalized_mi(f, g, k: int = 5, seed: int = 0, *, names=(None, None), cache=None) -> MiEstimate:
    """MI divided by the smaller of the two self-informations.

    ``cache`` may be a dict shared across calls; self-informations are
    stored in it under ``(name, k, seed)`` when ``names`` are given.
    """
    est = knn_mi(f, g, k, seed)
    return MiEstimate(est.raw, est.raw / _normalizer(f, g, k, seed, names, cache), k, est.n, est.flagged)


def normalized_cmi(f, g, h, k: int = 5, seed: int = 0, *, names=(None, None), cache=None) -> MiEstimate:
    """CMI divided by the smaller unconditional self-information of F and G."""
    est = knn_cmi(f, g, h, k, seed)
    return MiEstimate(est.raw, est.raw / _normalizer(f, g, k, seed, names, cache), k, est.n, est.flagged)
