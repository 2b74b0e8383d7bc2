"""Smooth Q(V) fits with closed-form IC and DV curves.

A charged-capacity profile is regressed on voltage with Gaussian radial basis
functions plus an affine trend, ridge-penalizing only the basis weights.  The
trend lets straight segments (and exactly linear profiles) be represented
without bumps.  IC is the analytic derivative of the expansion; DV is its
reciprocal evaluated at the voltage where the fit reaches a given capacity.

Differentiation amplifies noise: 1 mV of voltage noise on a steep plateau
moves capacity by about as much as one sample step.  The default bandwidth is
therefore tied to the voltage window rather than to the sample spacing, and
the ridge is chosen by generalized cross-validation unless given.
"""
from __future__ import annotations

import warnings

import numpy as np

from .data_model import QVProfile
from .errors import DerivativeSingularityError, FitError, RangeError

MAX_CENTERS = 128
COND_LIMIT = 1e12
MONOTONE_GRID = 512
WINDOW_DIVISOR = 10
RIDGE_GRID = np.logspace(-10.0, 1.0, 45)


class MonotonicityWarning(UserWarning):
    pass


class IcDvCurve:
    """Fitted kernel expansion ``Q(V) = a + b*u + sum_j w_j exp(-(V-c_j)^2 / (2 h^2))``.

    ``u = (V - v_mid) / v_half`` keeps the trend columns O(1).  Instances
    are treated as immutable.
    """

    def __init__(self, basis_centers, basis_weights, trend, bandwidth, ridge, v_range,
                 residual_rms=0.0, noise_level=0.0, sample_voltages=None):
        self.basis_centers = np.asarray(basis_centers, dtype=float)
        self.basis_weights = np.asarray(basis_weights, dtype=float)
        self.trend = (float(trend[0]), float(trend[1]))
        self.bandwidth = float(bandwidth)
        self.ridge = float(ridge)
        self.v_range = (float(v_range[0]), float(v_range[1]))
        self._v_mid = 0.5 * (self.v_range[0] + self.v_range[1])
        self._v_half = 0.5 * (self.v_range[1] - self.v_range[0])
        self.residual_rms = float(residual_rms)
        self.noise_level = float(noise_level)
        if sample_voltages is None:
            sample_voltages = np.linspace(*self.v_range, MONOTONE_GRID)
        self.sample_voltages = np.sort(np.asarray(sample_voltages, dtype=float))
        grid = np.linspace(*self.v_range, MONOTONE_GRID)
        self._grid = grid
        self._grid_q = self.qc(grid)
        self.monotone = bool(np.all(np.diff(self._grid_q) >= 0))
        self.q_range = (float(self.qc(self.v_range[0])), float(self.qc(self.v_range[1])))

    def _gauss(self, v):
        d = v[..., None] - self.basis_centers
        return d, np.exp(-0.5 * (d / self.bandwidth) ** 2)

    def qc(self, v):
        v = np.asarray(v, dtype=float)
        _, g = self._gauss(v)
        u = (v - self._v_mid) / self._v_half
        return self.trend[0] + self.trend[1] * u + g @ self.basis_weights

    def ic(self, v):
        v = np.asarray(v, dtype=float)
        d, g = self._gauss(v)
        h2 = self.bandwidth ** 2
        return self.trend[1] / self._v_half + (-d / h2 * g) @ self.basis_weights

    def ic_slope(self, v):
        """Second derivative of the fitted capacity, d(IC)/dV."""
        v = np.asarray(v, dtype=float)
        d, g = self._gauss(v)
        h2 = self.bandwidth ** 2
        return ((d * d / h2 - 1.0) / h2 * g) @ self.basis_weights

    def voltage_at(self, q):
        """Voltage where the fitted capacity equals ``q`` (safeguarded Newton).

        Where a dip makes ``Qc`` take the value ``q`` more than once, the
        highest-voltage rising crossing is returned.
        """
        q = np.atleast_1d(np.asarray(q, dtype=float))
        gq = self._grid_q
        below = gq[None, :] <= q[:, None]
        rising = below[:, :-1] & ~below[:, 1:]
        last = len(self._grid) - 2 - np.argmax(rising[:, ::-1], axis=1)
        # no rising crossing only at the very top of the range
        idx = np.where(rising.any(axis=1), last, len(self._grid) - 2)
        a = self._grid[idx].copy()
        b = self._grid[idx + 1].copy()
        fa = gq[idx] - q
        fb = gq[idx + 1] - q
        denom = np.where(fb - fa != 0, fb - fa, 1.0)
        x = np.clip(a - fa * (b - a) / denom, a, b)
        for _ in range(60):
            f = self.qc(x) - q
            a = np.where(f < 0, x, a)
            b = np.where(f < 0, b, x)
            slope = self.ic(x)
            with np.errstate(divide="ignore", invalid="ignore"):
                xn = x - f / slope
            bad = ~np.isfinite(xn) | (xn < a) | (xn > b)
            xn = np.where(bad, 0.5 * (a + b), xn)
            xn = np.where(f == 0, x, xn)
            done = np.abs(xn - x) <= 4e-16 * np.abs(x)
            x = xn
            if np.all(done):
                break
        return x

    def supported(self, v, max_gap=None):
        """True where the bracketing samples are at most ``max_gap`` apart.

        Between widely spaced samples the basis weights are pinned only by
        the ridge, so curve shape there says nothing about the cell.  The
        default gap is one bandwidth.
        """
        gap = self.bandwidth if max_gap is None else float(max_gap)
        sv = self.sample_voltages
        v = np.asarray(v, dtype=float)
        j = np.clip(np.searchsorted(sv, v, side="right"), 1, len(sv) - 1)
        return (sv[j] - sv[j - 1]) <= gap

    def monotone_where_supported(self) -> bool:
        """Whether Q(V) is non-decreasing between adjacent supported grid points."""
        ok = self.supported(self._grid)
        both = ok[:-1] & ok[1:]
        return bool(np.all(np.diff(self._grid_q)[both] >= 0))

    def dv_at_voltage(self, v):
        ic = self.ic(v)
        if np.any(np.abs(ic) < 1e-9):
            raise DerivativeSingularityError("IC vanishes where DV was requested")
        return 1.0 / ic

    def __repr__(self):
        return (f"IcDvCurve(n_centers={len(self.basis_centers)}, bandwidth={self.bandwidth:.4g}, "
                f"v_range={self.v_range}, monotone={self.monotone})")


def _noise_level(v, q):
    """RMS noise estimate from residuals of local linear interpolation.

    Each interior sample is compared with the line through its neighbours;
    the residual is rescaled to unit variance under white noise.  The RMS
    (rather than a robust median) is used because voltage noise maps to
    capacity noise in proportion to IC, so it is concentrated on the peaks.
    Curvature inflates the estimate slightly on coarse grids.
    """
    if len(v) < 3:
        return 0.0
    h0 = v[1:-1] - v[:-2]
    h1 = v[2:] - v[1:-1]
    interp = (q[:-2] * h1 + q[2:] * h0) / (h0 + h1)
    r = q[1:-1] - interp
    a = h1 / (h0 + h1)
    scale = np.sqrt(1.0 + a ** 2 + (1.0 - a) ** 2)
    return float(np.sqrt(np.mean((r / scale) ** 2)))


def default_bandwidth(voltage) -> float:
    """Larger of 1/10 of the voltage window and twice the median center spacing."""
    v = np.asarray(voltage, dtype=float)
    centers = _subsample(v)
    return max(float(v[-1] - v[0]) / WINDOW_DIVISOR, 2.0 * float(np.median(np.diff(centers))))


def _subsample(v):
    if len(v) <= MAX_CENTERS:
        return v
    return v[np.unique(np.round(np.linspace(0, len(v) - 1, MAX_CENTERS)).astype(int))]


def _normal_condition(design, m, ridge):
    pen = np.zeros(design.shape[1])
    pen[:m] = ridge
    eig = np.linalg.eigvalsh(design.T @ design + np.diag(pen))
    return eig[-1] / eig[0] if eig[0] > 0 else np.inf


def gcv_ridge(gauss, trend, y, grid=RIDGE_GRID) -> float:
    """Ridge minimizing generalized cross-validation with the trend unpenalized."""
    n = len(y)
    qt, _ = np.linalg.qr(trend)
    gp = gauss - qt @ (qt.T @ gauss)
    yp = y - qt @ (qt.T @ y)
    u, s, _ = np.linalg.svd(gp, full_matrices=False)
    uy = u.T @ yp
    outside = max(float(yp @ yp - uy @ uy), 0.0)
    best, best_score = float(grid[0]), np.inf
    for lam in grid:
        shrink = s * s / (s * s + lam)
        rss = float(np.sum(((1.0 - shrink) * uy) ** 2)) + outside
        dof = trend.shape[1] + float(shrink.sum())
        if dof >= n:
            continue
        score = n * rss / (n - dof) ** 2
        if score < best_score:
            best, best_score = float(lam), score
    return best


def fit_qv(profile: QVProfile, bandwidth: float | None = None, ridge: float | None = None) -> IcDvCurve:
    """Ridge-regularized Gaussian-kernel fit of charged capacity on voltage.

    Parameters
    ----------
    profile : QVProfile
    bandwidth : float, optional
        Kernel width in volts; see :func:`default_bandwidth`.
    ridge : float, optional
        Penalty on the basis weights, in units where capacity spans [0, 1].
        When omitted it is chosen by generalized cross-validation and then
        raised, if needed, until the normal system is acceptably conditioned.

    Raises
    ------
    FitError
        An explicit ``ridge`` leaves the normal system with a condition
        estimate above 1e12.
    """
    v = np.asarray(profile.voltage_samples, dtype=float)
    q = np.asarray(profile.capacity_samples, dtype=float)
    n = len(v)
    if bandwidth is None:
        bandwidth = default_bandwidth(v)
    if not bandwidth > 0 or (ridge is not None and not ridge > 0):
        raise FitError("bandwidth and ridge must be positive")
    centers = _subsample(v)
    v_range = (float(v[0]), float(v[-1]))
    v_mid, v_half = 0.5 * (v_range[0] + v_range[1]), 0.5 * (v_range[1] - v_range[0])

    q_off = float(q[0])
    q_scale = float(q[-1] - q[0]) or 1.0
    y = (q - q_off) / q_scale

    gauss = np.exp(-0.5 * ((v[:, None] - centers[None, :]) / bandwidth) ** 2)
    trend = np.column_stack([np.ones(n), (v - v_mid) / v_half])
    design = np.hstack([gauss, trend])
    m = len(centers)
    if ridge is None:
        ridge = gcv_ridge(gauss, trend, y)
        while _normal_condition(design, m, ridge) > COND_LIMIT / 10:
            ridge *= 10.0
    else:
        cond = _normal_condition(design, m, ridge)
        if cond > COND_LIMIT:
            raise FitError(f"normal system condition {cond:.3g} exceeds {COND_LIMIT:g}; "
                           f"increase ridge (currently {ridge:g})")
    aug = np.vstack([design, np.hstack([np.sqrt(ridge) * np.eye(m), np.zeros((m, 2))])])
    coef, *_ = np.linalg.lstsq(aug, np.concatenate([y, np.zeros(m)]), rcond=None)

    weights = coef[:m] * q_scale
    t0 = coef[m] * q_scale + q_off
    t1 = coef[m + 1] * q_scale
    resid = (design @ coef - y) * q_scale
    curve = IcDvCurve(centers, weights, (t0, t1), bandwidth, ridge, v_range,
                      residual_rms=float(np.sqrt(np.mean(resid ** 2))),
                      noise_level=_noise_level(v, q), sample_voltages=v)
    if not curve.monotone_where_supported():
        warnings.warn(f"fitted Q(V) for {profile.source_id}/{profile.cycle} decreases "
                      "inside the sampled range",
                      MonotonicityWarning, stacklevel=2)
    return curve


def _check_range(x, lo, hi, what):
    x = np.asarray(x, dtype=float)
    tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise RangeError(f"{what} outside fitted range [{lo}, {hi}]")
    return np.clip(x, lo, hi)


def eval_ic(curve: IcDvCurve, v_grid) -> np.ndarray:
    """IC = dQc/dV in Ah/V at each voltage."""
    v = _check_range(v_grid, *curve.v_range, "voltage")
    return curve.ic(v)


def eval_dv(curve: IcDvCurve, q_grid) -> np.ndarray:
    """DV = dV/dQc in V/Ah at each (absolute, fitted) capacity."""
    q = _check_range(q_grid, *curve.q_range, "capacity")
    scalar = q.ndim == 0
    out = curve.dv_at_voltage(curve.voltage_at(q))
    return out[0] if scalar else out
