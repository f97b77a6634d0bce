import math

import numpy as np
import pytest

from ringsim.core.exceptions import FitError, ScenarioError, UndersampledError, ValidationError
from ringsim.models.results import Trace
from ringsim.models.schemas import CavityConfig
from ringsim.services.cavity import (
    derive_params,
    finesse_from_amplitude,
    finesse_scan,
    fit_ringdown,
    intracavity_buildup,
    reflection_coefficient,
    ringdown_trace,
    solve_roundtrip_amplitude,
)


@pytest.mark.unit
class TestDeriveParams:
    def test_spectral_constants_of_the_default_ring(self, cavity_params):
        assert cavity_params.perimeter_m == pytest.approx(1.6)
        assert cavity_params.fsr_hz == pytest.approx(187.37e6, rel=1e-3)
        assert cavity_params.fsr_hz == pytest.approx(cavity_params.quoted_fsr_hz, rel=0.01)
        assert cavity_params.photon_lifetime_s == pytest.approx(42e-6, rel=0.02)
        assert cavity_params.linewidth_hz == pytest.approx(cavity_params.fsr_hz / 50000.0)

    def test_lifetime_and_linewidth_are_reciprocal(self, cavity_params):
        product = 2.0 * math.pi * cavity_params.linewidth_hz * cavity_params.photon_lifetime_s
        assert product == pytest.approx(1.0, rel=1e-12)

    def test_degraded_finesse_scales_the_linewidth(self):
        params = derive_params(CavityConfig(finesse=15000.0))
        assert params.linewidth_hz == pytest.approx(params.fsr_hz / 15000.0)

    def test_roundtrip_amplitude_reproduces_finesse(self):
        for finesse in (2.0, 100.0, 15000.0, 50000.0, 1e6):
            rho = solve_roundtrip_amplitude(finesse)
            assert 0.0 < rho < 1.0
            assert finesse_from_amplitude(rho) == pytest.approx(finesse, rel=1e-9)

    def test_accepts_a_mapping(self):
        params = derive_params({"arm_length_m": 0.4, "mirror_count": 4, "finesse": 50000.0})
        assert params.fsr_hz == pytest.approx(187.37e6, rel=1e-3)

    def test_rejects_bad_geometry(self):
        with pytest.raises(ScenarioError, match="arm_length_m"):
            derive_params({"arm_length_m": 0.0})
        with pytest.raises(ScenarioError, match="finesse"):
            derive_params({"finesse": 0.5})

    def test_rejects_unknown_keys(self):
        with pytest.raises(ScenarioError, match="finese"):
            derive_params({"finese": 50000.0})


@pytest.mark.unit
class TestReflection:
    def test_matched_cavity_is_dark_on_resonance(self, cavity_params):
        assert abs(reflection_coefficient(cavity_params, 0.0)) < 1e-9

    def test_reflection_dip_has_the_linewidth_as_full_width(self, cavity_params):
        half_width = cavity_params.linewidth_hz / 2.0
        assert abs(reflection_coefficient(cavity_params, half_width)) ** 2 == pytest.approx(0.5, abs=1e-3)

    def test_far_from_resonance_everything_is_reflected(self, cavity_params):
        r = reflection_coefficient(cavity_params, cavity_params.fsr_hz / 2.0)
        assert abs(r) == pytest.approx(1.0, abs=1e-4)

    def test_vectorized_and_periodic(self, cavity_params):
        detunings = np.array([-3e3, 0.0, 1e3, 10e6])
        values = reflection_coefficient(cavity_params, detunings)
        shifted = reflection_coefficient(cavity_params, detunings + cavity_params.fsr_hz)
        assert values.shape == detunings.shape
        np.testing.assert_allclose(values, shifted, atol=1e-9)

    def test_rejects_non_finite_detuning(self, cavity_params):
        with pytest.raises(ValidationError):
            reflection_coefficient(cavity_params, [0.0, np.nan])

    def test_undercoupled_cavity_reflects_on_resonance(self):
        params = derive_params(CavityConfig(coupler_loss_fraction=0.3))
        assert abs(reflection_coefficient(params, 0.0)) > 0.1

    def test_buildup_on_resonance(self, cavity_params):
        assert intracavity_buildup(cavity_params, 0.0) == pytest.approx(50000.0 / math.pi, rel=1e-3)


@pytest.mark.unit
class TestRingdown:
    def test_noiseless_fit_recovers_finesse(self, cavity_params):
        trace = ringdown_trace(cavity_params)
        fit = fit_ringdown(trace, cavity_params.fsr_hz)
        assert fit.finesse_dimless == pytest.approx(50000.0, rel=1e-6)
        assert fit.loglinear_tau_s == pytest.approx(cavity_params.photon_lifetime_s, rel=1e-6)
        assert fit.residual_rms_w < 1e-12

    def test_default_trace_covers_six_lifetimes(self, cavity_params):
        trace = ringdown_trace(cavity_params)
        assert len(trace) == 6000
        assert trace.duration_s == pytest.approx(6.0 * cavity_params.photon_lifetime_s)
        assert trace.units["power"] == "w"

    @pytest.mark.parametrize("finesse", [15000.0, 50000.0])
    def test_noisy_fit_within_one_percent(self, finesse):
        params = derive_params(CavityConfig(finesse=finesse))
        for seed in range(20):
            trace = ringdown_trace(params, relative_noise=0.01, seed=seed)
            fit = fit_ringdown(trace, params.fsr_hz)
            assert fit.finesse_dimless == pytest.approx(finesse, rel=0.01)

    def test_same_seed_same_trace(self, cavity_params):
        first = ringdown_trace(cavity_params, relative_noise=0.01, seed=3)
        second = ringdown_trace(cavity_params, relative_noise=0.01, seed=3)
        other = ringdown_trace(cavity_params, relative_noise=0.01, seed=4)
        np.testing.assert_array_equal(first["power"], second["power"])
        assert not np.array_equal(first["power"], other["power"])

    def test_undersampled_ringdown_rejected(self, cavity_params):
        with pytest.raises(UndersampledError):
            ringdown_trace(cavity_params, sample_rate_hz=5.0 / cavity_params.photon_lifetime_s)

    def test_constant_trace_cannot_be_fitted(self, cavity_params):
        trace = Trace(sample_rate_hz=1e6, channels={"power": np.full(100, 1e-3)})
        with pytest.raises(FitError, match="constant"):
            fit_ringdown(trace, cavity_params.fsr_hz)

    def test_rising_trace_cannot_be_fitted(self, cavity_params):
        trace = Trace(sample_rate_hz=1e6, channels={"power": np.linspace(1e-3, 2e-3, 100)})
        with pytest.raises(FitError, match="not decaying"):
            fit_ringdown(trace, cavity_params.fsr_hz)

    def test_too_short_trace_cannot_be_fitted(self, cavity_params):
        trace = Trace(sample_rate_hz=1e6, channels={"power": np.array([1e-3, 5e-4])})
        with pytest.raises(FitError):
            fit_ringdown(trace, cavity_params.fsr_hz)

    def test_finesse_scan_reports_each_finesse(self):
        entries = finesse_scan(CavityConfig(), [15000.0, 50000.0], seeds=range(5), relative_noise=0.01)
        assert [entry.finesse_dimless for entry in entries] == [15000.0, 50000.0]
        assert all(entry.seed_count == 5 for entry in entries)
        assert all(entry.max_relative_error_dimless < 0.01 for entry in entries)

    @pytest.mark.slow
    def test_finesse_scan_over_a_hundred_seeds(self):
        entries = finesse_scan(CavityConfig(), [15000.0, 50000.0], seeds=range(100), relative_noise=0.01)
        assert all(entry.max_relative_error_dimless < 0.01 for entry in entries)
