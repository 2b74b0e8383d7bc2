import warnings

import numpy as np
import pytest

from conftest import dense_argmax, voltage_sampled_profile
from modsoh.curvefit import (
    COND_LIMIT,
    MAX_CENTERS,
    MonotonicityWarning,
    default_bandwidth,
    eval_dv,
    eval_ic,
    fit_qv,
)
from modsoh.data_model import QVProfile
from modsoh.errors import DerivativeSingularityError, FitError, RangeError
from modsoh.synthgen import AgingSpec, CellCurve, CellSpec, synth_dataset

SINGLE = CellSpec(capacity=2.0, peak_centers=(3.7,), peak_widths=(0.04,), peak_weights=(1.0,))
TWO_PEAK = CellSpec()


def _fit(profile, **kw):
    # ringing in flat tails can trip the monotonicity warning; tests that
    # care about it check it explicitly
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MonotonicityWarning)
        return fit_qv(profile, **kw)


@pytest.fixture(scope="module")
def clean_single():
    return _fit(voltage_sampled_profile(SINGLE, 64))


@pytest.fixture(scope="module")
def clean_two_peak():
    return _fit(voltage_sampled_profile(TWO_PEAK, 64))


@pytest.fixture(scope="module")
def module_curve():
    profiles, _ = synth_dataset(AgingSpec(n_modules=1, n_checkpoints=2))
    return _fit(profiles[1])


class TestFit:
    @pytest.mark.parametrize("spec", [SINGLE, TWO_PEAK], ids=["single", "two_peak"])
    def test_noiseless_sigmoid_accuracy(self, spec):
        curve = _fit(voltage_sampled_profile(spec, 64))
        cell = CellCurve(spec)
        v = np.linspace(3.4, 4.1, 20001)
        err = np.max(np.abs(curve.qc(v) - (cell(v) - cell(3.4))))
        assert err <= 1e-3 * spec.capacity

    def test_linear_profile(self):
        v = np.linspace(3.5, 4.0, 30)
        curve = _fit(QVProfile(2.5 * (v - 3.5), v, 25.0, 0.5))
        np.testing.assert_allclose(curve.ic(np.linspace(3.5, 4.0, 200)), 2.5, rtol=1e-6)

    def test_noisy_peak_location(self, clean_single):
        ref = dense_argmax(clean_single.ic, 3.5, 3.9)
        assert len(ref) == 1
        for seed in range(10):
            noisy = _fit(voltage_sampled_profile(SINGLE, 64, noise=1e-3, seed=seed))
            found = dense_argmax(noisy.ic, 3.5, 3.9, 8001)
            assert np.min(np.abs(found - ref[0])) <= 5e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_within_noise(self, seed):
        curve = _fit(voltage_sampled_profile(TWO_PEAK, 64, noise=1e-3, seed=seed))
        assert curve.residual_rms <= 3.0 * curve.noise_level

    def test_residual_within_noise_module(self, module_curve):
        assert module_curve.residual_rms <= 3.0 * module_curve.noise_level

    def test_deterministic(self):
        p = voltage_sampled_profile(TWO_PEAK, 64, noise=1e-3, seed=3)
        a, b = _fit(p), _fit(p)
        np.testing.assert_array_equal(a.basis_weights, b.basis_weights)
        assert a.ridge == b.ridge

    def test_center_subsampling(self):
        p = voltage_sampled_profile(TWO_PEAK, 400)
        assert len(_fit(p).basis_centers) <= MAX_CENTERS

    def test_default_bandwidth_tracks_window(self):
        v = np.linspace(3.4, 4.1, 64)
        assert default_bandwidth(v) == pytest.approx(0.07)

    def test_explicit_ill_conditioned_ridge(self):
        with pytest.raises(FitError, match="ridge"):
            fit_qv(voltage_sampled_profile(TWO_PEAK, 64), ridge=1e-16)

    def test_selected_ridge_is_conditioned(self, clean_two_peak):
        assert clean_two_peak.ridge > 0
        assert COND_LIMIT == 1e12

    def test_bad_hyperparameters(self):
        with pytest.raises(FitError):
            fit_qv(voltage_sampled_profile(TWO_PEAK, 64), bandwidth=-1.0)

    def test_monotonicity_warning_carried(self):
        # a wide dip inside a densely sampled range cannot be smoothed away
        v = np.linspace(3.5, 4.0, 60)
        q = 10 * (v - 3.5) - 1.5 * np.exp(-0.5 * ((v - 3.75) / 0.03) ** 2)
        q = np.maximum.accumulate(q)
        q[30:36] = q[29]
        with pytest.warns(MonotonicityWarning):
            curve = fit_qv(QVProfile(q, v, 25.0, 0.5), bandwidth=0.01)
        assert not curve.monotone


class TestDerivatives:
    @pytest.mark.parametrize("which", ["clean_single", "clean_two_peak", "module_curve"])
    def test_finite_difference(self, which, request):
        curve = request.getfixturevalue(which)
        lo, hi = curve.v_range
        x = np.random.default_rng(0).uniform(lo + 1e-3, hi - 1e-3, 100)
        h = 1e-5
        fd = (curve.qc(x + h) - curve.qc(x - h)) / (2 * h)
        ic = curve.ic(x)
        np.testing.assert_allclose(ic, fd, rtol=1e-4)

    def test_slope_is_second_derivative(self, clean_two_peak):
        x = np.linspace(3.45, 4.05, 50)
        h = 1e-6
        fd = (clean_two_peak.ic(x + h) - clean_two_peak.ic(x - h)) / (2 * h)
        np.testing.assert_allclose(clean_two_peak.ic_slope(x), fd, rtol=1e-5, atol=1e-3)

    def test_reciprocal_identity(self, clean_two_peak):
        assert clean_two_peak.monotone
        v = np.linspace(*clean_two_peak.v_range, 300)
        ic = eval_ic(clean_two_peak, v)
        keep = np.abs(ic) > 1e-6
        dv = eval_dv(clean_two_peak, clean_two_peak.qc(v[keep]))
        np.testing.assert_allclose(ic[keep] * dv, 1.0, rtol=0, atol=1e-9)

    def test_reciprocal_identity_where_invertible(self, module_curve):
        # the sparsely sampled low edge dips, so only capacities reached at a
        # single voltage have a well-defined DV
        v = np.linspace(*module_curve.v_range, 2000)
        q = module_curve.qc(v)
        before = np.concatenate([[-np.inf], np.maximum.accumulate(q)[:-1]])
        after = np.concatenate([np.minimum.accumulate(q[::-1])[::-1][1:], [np.inf]])
        unique = (q > before) & (q < after)
        ic = eval_ic(module_curve, v)
        keep = unique & (np.abs(ic) > 1e-6)
        assert keep.mean() > 0.5  # about 3/4 of the window on this profile
        dv = eval_dv(module_curve, q[keep])
        np.testing.assert_allclose(ic[keep] * dv, 1.0, rtol=0, atol=1e-9)

    def test_voltage_inversion(self, clean_two_peak):
        v = np.linspace(3.45, 4.05, 40)
        np.testing.assert_allclose(clean_two_peak.voltage_at(clean_two_peak.qc(v)), v, atol=1e-12)

    def test_voltage_inversion_non_monotone(self, module_curve):
        assert not module_curve.monotone
        v = np.linspace(3.6, 4.0, 400)
        q = module_curve.qc(v)
        np.testing.assert_allclose(module_curve.qc(module_curve.voltage_at(q)), q, rtol=0, atol=1e-9)
        np.testing.assert_allclose(module_curve.voltage_at(q), v, atol=1e-12)

    def test_sigmoid_peak_at_center(self, clean_single):
        # oracle: a single logistic step has its IC maximum at the center
        (peak,) = dense_argmax(clean_single.ic, 3.5, 3.9)
        assert abs(peak - 3.7) <= 1e-3

    def test_out_of_range(self, clean_single):
        with pytest.raises(RangeError):
            eval_ic(clean_single, [3.3])
        with pytest.raises(RangeError):
            eval_dv(clean_single, [clean_single.q_range[1] + 1.0])

    def test_dv_singular(self):
        v = np.linspace(3.5, 4.0, 20)
        q = np.where(v < 3.75, 4 * (v - 3.5), 1.0)
        curve = _fit(QVProfile(q, v, 25.0, 0.5))
        with pytest.raises(DerivativeSingularityError):
            curve.dv_at_voltage(np.array([_root_of_ic(curve)]))


def _root_of_ic(curve):
    """A voltage where the fitted IC vanishes (bisection on the flat tail)."""
    from scipy.optimize import brentq

    grid = np.linspace(3.76, 4.0, 2000)
    ic = curve.ic(grid)
    i = np.flatnonzero(np.sign(ic[:-1]) != np.sign(ic[1:]))[0]
    return brentq(lambda t: float(curve.ic(t)), grid[i], grid[i + 1], xtol=1e-15)
