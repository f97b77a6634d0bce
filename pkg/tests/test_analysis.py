import math
from types import SimpleNamespace

import numpy as np
import pytest

from ringsim.core.exceptions import FitError, LockLossError, ValidationError
from ringsim.models.results import Trace
from ringsim.models.schemas import InjectionConfig, LockInConfig, ModulationConfig, NoiseConfig, Scenario
from ringsim.services.analysis import (
    band_level,
    birefringence_from_frequency,
    enbw,
    gamma_from_psd,
    lock_in,
    noise_equivalent_birefringence,
    sensitivity_scan,
    welch_psd,
)
from ringsim.services.cavity import derive_params
from ringsim.services.noise import noise_budget
from ringsim.services.pdh import discriminator_slope, sideband_powers

FS = 1e4
LOCKIN = LockInConfig(reference_frequency_hz=100.0, time_constant_s=0.1, filter_order=2)


def _tone(amplitude, frequency_hz, phase_rad=0.0, count=12000, fs=FS):
    t = np.arange(count) / fs
    return amplitude * np.cos(2.0 * math.pi * frequency_hz * t + phase_rad)


@pytest.mark.unit
class TestLockIn:
    def test_recovers_amplitude_and_phase(self):
        reading = lock_in(_tone(0.3, 100.0, 0.7), FS, LOCKIN)
        assert reading.magnitude == pytest.approx(0.3, rel=1e-3)
        assert reading.phase_rad == pytest.approx(0.7, abs=1e-3)
        assert reading.in_phase == pytest.approx(0.15 * math.cos(0.7), rel=1e-2)

    def test_magnitude_does_not_depend_on_phase(self):
        readings = [lock_in(_tone(0.3, 100.0, phase), FS, LOCKIN).magnitude for phase in (0.0, 1.0, 2.5)]
        np.testing.assert_allclose(readings, readings[0], rtol=1e-3)

    def test_rejects_out_of_band_tone(self):
        reading = lock_in(_tone(0.3, 300.0), FS, LOCKIN)
        assert reading.magnitude < 1e-3 * 0.3

    def test_ignores_a_constant_offset(self):
        reading = lock_in(_tone(0.3, 100.0) + 0.1, FS, LOCKIN)
        assert reading.magnitude == pytest.approx(0.3, rel=1e-3)

    def test_enbw(self):
        assert enbw(LOCKIN) == pytest.approx(1.0 / (8.0 * 0.1))
        single = LOCKIN.model_copy(update={"filter_order": 1})
        assert enbw(single) == pytest.approx(1.0 / (4.0 * 0.1))
        assert lock_in(_tone(0.3, 100.0), FS, LOCKIN).enbw_hz == pytest.approx(1.25)

    def test_rejects_series_shorter_than_ten_time_constants(self):
        with pytest.raises(ValidationError, match="too short"):
            lock_in(_tone(0.3, 100.0, count=9999), FS, LOCKIN)

    def test_rejects_non_finite_samples(self):
        values = _tone(0.3, 100.0)
        values[10] = np.nan
        with pytest.raises(ValidationError):
            lock_in(values, FS, LOCKIN)

    def test_rejects_reference_above_nyquist(self):
        config = LockInConfig(reference_frequency_hz=6e3, time_constant_s=0.1)
        with pytest.raises(ValidationError):
            lock_in(_tone(0.3, 100.0), FS, config)

    def test_default_time_constant_spans_a_hundred_periods(self):
        config = LockInConfig.for_reference(217.0)
        assert config.time_constant_s == pytest.approx(100.0 / 217.0)
        assert config.filter_order == 2

    def test_time_constant_must_exceed_a_period(self):
        with pytest.raises(ValueError):
            LockInConfig(reference_frequency_hz=100.0, time_constant_s=0.005)


@pytest.mark.unit
class TestWelch:
    def test_white_noise_level_and_parseval(self, rng):
        values = rng.normal(0.0, 1.0, 2 ** 18)
        frequencies, psd = welch_psd(values, 1e3, segment_length=1024)
        assert np.mean(psd[1:-1]) == pytest.approx(2.0 / 1e3, rel=0.05)
        df = frequencies[1] - frequencies[0]
        assert np.sum(psd) * df == pytest.approx(np.var(values), rel=0.01)

    def test_tone_power(self):
        values = _tone(2.0, 125.0, count=2 ** 16, fs=1e3)
        frequencies, psd = welch_psd(values, 1e3, segment_length=1024)
        df = frequencies[1] - frequencies[0]
        assert np.sum(psd) * df == pytest.approx(2.0, rel=0.02)
        assert frequencies[np.argmax(psd)] == pytest.approx(125.0)

    def test_default_segment_length(self, rng):
        frequencies, _ = welch_psd(rng.normal(size=4096), 1e3)
        assert frequencies.size == 64 // 2 + 1

    @pytest.mark.parametrize("window", ["hamming", "blackman", "boxcar"])
    def test_other_windows_keep_the_white_level(self, rng, window):
        values = rng.normal(0.0, 1.0, 2 ** 16)
        _, psd = welch_psd(values, 1e3, segment_length=512, window=window)
        assert np.mean(psd[1:-1]) == pytest.approx(2.0 / 1e3, rel=0.05)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"series": [1.0]},
            {"series": np.ones(100), "segment_length": 1},
            {"series": np.ones(100), "segment_length": 101},
            {"series": np.ones(100), "overlap_fraction": 1.0},
            {"series": np.ones(100), "window": "kaiser"},
            {"series": np.ones(100), "sample_rate_hz": 0.0},
        ],
    )
    def test_rejects_degenerate_arguments(self, kwargs):
        arguments = {"sample_rate_hz": 1e3, **kwargs}
        with pytest.raises(ValidationError):
            welch_psd(**arguments)


@pytest.mark.unit
class TestConversions:
    def test_frequency_to_birefringence(self):
        assert birefringence_from_frequency(500e-6, 2.817598e14) == pytest.approx(1.77456e-18, rel=1e-5)

    def test_noise_equivalent_birefringence(self):
        assert noise_equivalent_birefringence(1.77456e-18, 1000.0) == pytest.approx(1.12234e-16, rel=1e-4)

    def test_gamma_from_psd(self):
        assert gamma_from_psd(1e-10, 2.817598e14) == pytest.approx(1e-5 / 2.817598e14)

    def test_rejects_unphysical_inputs(self):
        with pytest.raises(ValidationError):
            birefringence_from_frequency(1.0, 0.0)
        with pytest.raises(ValidationError):
            noise_equivalent_birefringence(1e-18, 0.0)
        with pytest.raises(ValidationError):
            gamma_from_psd(-1.0, 2.817598e14)

    def test_band_level(self):
        frequencies = np.arange(0.0, 100.0, 1.0)
        psd = np.where(np.abs(frequencies - 50.0) <= 5.0, 2.0, 1.0)
        assert band_level(frequencies, psd, 50.0, 5.0) == 2.0
        assert band_level(frequencies, psd, 20.5, 0.1) == 1.0


def _fake_simulate(noise_psd=0.0, lose_lock_above_v=math.inf, count=12000):
    """Stand-in for the loop: ccw_error carries D times the injected excursion."""
    def fake(scenario):
        drive = scenario.injection
        if drive.drive_amplitude_v > lose_lock_above_v:
            raise LockLossError("lock lost", time_of_failure=1e-3)
        params = derive_params(scenario.cavity)
        d = discriminator_slope(sideband_powers(scenario.modulation), params.linewidth_hz)
        detuning = _tone(drive.fm_amplitude_hz, drive.drive_frequency_hz, count=count)
        if noise_psd:
            generator = np.random.default_rng(int(drive.drive_amplitude_v * 1000))
            detuning = detuning + generator.normal(0.0, math.sqrt(noise_psd * FS / 2.0), count)
        trace = Trace(sample_rate_hz=FS, channels={"ccw_error": d * detuning})
        return SimpleNamespace(trace=trace)
    return fake


@pytest.fixture
def scan_template():
    return Scenario(duration_s=1.2, injection=InjectionConfig(drive_frequency_hz=217.0))


@pytest.fixture
def scan_lockin():
    return LockInConfig(reference_frequency_hz=217.0, time_constant_s=0.1, filter_order=2)


@pytest.mark.unit
class TestSensitivityScan:
    def test_linear_response_has_unit_slope(self, mocker, scan_template, scan_lockin):
        mocker.patch("ringsim.services.analysis.simulate", side_effect=_fake_simulate())
        scan = sensitivity_scan(scan_template, [1.0, 10.0, 100.0], lockin=scan_lockin)
        assert [p.drive_amplitude_v for p in scan.points] == [0.0, 1.0, 10.0, 100.0]
        assert scan.fitted_point_count == 3
        assert scan.slope_dimless == pytest.approx(1.0, abs=1e-3)
        assert scan.intercept_dimless == pytest.approx(0.0, abs=1e-3)
        assert scan.floor_reading_hz == 0.0
        assert scan.smallest_resolved_hz == pytest.approx(0.85e-3 * 217.0)
        assert scan.lockin_enbw_hz == pytest.approx(1.25)
        assert scan.measurement_time_s == 1.2

    def test_readings_do_not_depend_on_the_discriminator(self, mocker, scan_template, scan_lockin):
        mocker.patch("ringsim.services.analysis.simulate", side_effect=_fake_simulate())
        bright = scan_template.model_copy(update={"modulation": ModulationConfig(input_power_w=0.05)})
        first = sensitivity_scan(scan_template, [1.0, 10.0, 100.0], lockin=scan_lockin)
        second = sensitivity_scan(bright, [1.0, 10.0, 100.0], lockin=scan_lockin)
        assert second.discriminator_w_per_hz > first.discriminator_w_per_hz
        for a, b in zip(first.points, second.points):
            assert b.equivalent_frequency_hz == pytest.approx(a.equivalent_frequency_hz, rel=1e-9)

    def test_lock_lost_points_are_flagged_and_skipped(self, mocker, scan_template, scan_lockin):
        mocker.patch(
            "ringsim.services.analysis.simulate",
            side_effect=_fake_simulate(lose_lock_above_v=500.0),
        )
        scan = sensitivity_scan(scan_template, [0.0, 1.0, 10.0, 100.0, 1000.0], lockin=scan_lockin)
        lost = [p for p in scan.points if not p.locked]
        assert [p.drive_amplitude_v for p in lost] == [1000.0]
        assert lost[0].time_of_failure_s == 1e-3
        assert lost[0].lockin_reading_w == 0.0
        assert scan.fitted_point_count == 3

    def test_noise_floor_from_the_zero_amplitude_run(self, mocker, scan_template, scan_lockin):
        noise_psd = 1e-6
        mocker.patch(
            "ringsim.services.analysis.simulate",
            side_effect=_fake_simulate(noise_psd=noise_psd, count=2 ** 17),
        )
        scan = sensitivity_scan(scan_template, [1.0, 10.0, 100.0], lockin=scan_lockin, extrapolation_time_s=1000.0)
        assert scan.floor_reading_hz > 0
        assert scan.floor_equivalent_hz == pytest.approx(math.sqrt(noise_psd / (4.0 * 1.2)), rel=0.1)
        assert scan.floor_extrapolated_hz == pytest.approx(math.sqrt(noise_psd / 4000.0), rel=0.1)
        assert scan.slope_dimless == pytest.approx(1.0, abs=0.01)

    def test_parallel_workers_keep_the_order(self, mocker, scan_template, scan_lockin):
        mocker.patch("ringsim.services.analysis.simulate", side_effect=_fake_simulate())
        serial = sensitivity_scan(scan_template, [1.0, 10.0, 100.0], lockin=scan_lockin)
        parallel = sensitivity_scan(scan_template, [1.0, 10.0, 100.0], workers=3, lockin=scan_lockin)
        assert parallel.points == serial.points

    def test_needs_three_amplitudes(self, scan_template):
        with pytest.raises(ValidationError):
            sensitivity_scan(scan_template, [1.0, 10.0])

    def test_rejects_negative_amplitudes(self, scan_template):
        with pytest.raises(ValidationError):
            sensitivity_scan(scan_template, [-1.0, 1.0, 10.0])

    @pytest.mark.integration
    def test_every_point_losing_lock_is_a_fit_error(self):
        template = Scenario(duration_s=0.05, decimation=10, initial_detuning_hz=20e6)
        with pytest.raises(FitError):
            sensitivity_scan(template, [0.0, 1.0, 10.0])


@pytest.mark.integration
@pytest.mark.slow
class TestSensitivityScanEndToEnd:
    def test_noiseless_scan_is_linear_over_six_decades(self):
        template = Scenario(
            duration_s=0.3,
            decimation=10,
            injection=InjectionConfig(drive_frequency_hz=217.0),
        )
        lockin = LockInConfig(reference_frequency_hz=217.0, time_constant_s=0.02)
        amplitudes = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0]
        scan = sensitivity_scan(template, amplitudes, workers=2, lockin=lockin)
        assert scan.fitted_point_count == 7
        assert scan.slope_dimless == pytest.approx(1.0, abs=0.01)

    def test_shot_limited_floor_at_ten_seconds(self, cavity_params):
        template = Scenario(
            duration_s=10.0,
            decimation=100,
            noise=NoiseConfig(shot_noise_enabled=True, rng_seed=1),
            injection=InjectionConfig(drive_frequency_hz=217.0),
        )
        scan = sensitivity_scan(template, [0.0, 0.1, 1.0, 10.0])
        powers = sideband_powers(template.modulation)
        budget = noise_budget(powers, cavity_params.linewidth_hz, cavity_params.optical_frequency_hz)
        expected = budget.shot_freq_psd_hz_per_rthz / math.sqrt(4.0 * 10.0)
        assert 0.5 < scan.floor_equivalent_hz / expected < 2.0
        assert scan.floor_extrapolated_hz == pytest.approx(scan.floor_equivalent_hz * math.sqrt(10.0 / 1000.0))
