import json

import pytest

from ringsim.main import main
from ringsim.models.results import GoldenCheck


def _error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


def _scenario(tmp_path, text, name="scenario.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def _read_json(path):
    return json.loads(path.read_text())


@pytest.mark.unit
class TestBudgetAndGolden:
    def test_budget_from_the_budget_section(self, tmp_path):
        scenario = _scenario(tmp_path, "[budget]\ncarrier_power_w = 10e-3\nsideband_power_w = 3e-3\nlinewidth_hz = 4e3\n")
        out = tmp_path / "out"
        assert main(["budget", "--scenario", scenario, "--out", str(out)]) == 0
        budget = _read_json(out / "budget.json")
        assert budget["shot_freq_psd_hz_per_rthz"] == pytest.approx(1.02857e-5, rel=1e-4)
        assert budget["closed_form_shot_freq_psd_hz_per_rthz"] == pytest.approx(
            budget["shot_freq_psd_hz_per_rthz"], rel=1e-10
        )
        assert 0.8 < budget["optimal_mod_depth_rad"] < 0.95
        manifest = _read_json(out / "manifest.json")
        assert manifest["files"] == ["budget.json"]
        assert manifest["subcommand"] == "budget"
        assert manifest["scenario_path"] == scenario

    def test_budget_is_byte_identical_across_runs(self, tmp_path):
        assert main(["budget", "--out", str(tmp_path / "a")]) == 0
        assert main(["budget", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "budget.json").read_bytes() == (tmp_path / "b" / "budget.json").read_bytes()

    def test_golden_passes(self, tmp_path):
        out = tmp_path / "golden"
        assert main(["golden", "--out", str(out)]) == 0
        report = _read_json(out / "golden.json")
        assert report["passed"]
        assert {check["name"] for check in report["checks"]} >= {"fsr", "discriminator", "gamma_n"}
        units = {"hz", "s", "w", "w_per_hz", "w_per_rthz", "hz_per_rthz", "dimless", "per_rthz"}
        assert {check["unit"] for check in report["checks"]} <= units

    def test_golden_regression_exits_nonzero(self, tmp_path, capsys, mocker):
        broken = GoldenCheck(
            name="fsr",
            unit="hz",
            expected_si=188e6,
            actual_si=200e6,
            relative_error_dimless=0.064,
            relative_tolerance_dimless=0.01,
            passed=False,
        )
        mocker.patch("ringsim.commands.golden.golden_checks", return_value=[broken])
        assert main(["golden", "--out", str(tmp_path / "golden")]) == 1
        error = _error(capsys)
        assert error["error"] == "golden_regression"
        assert error["details"]["failed"] == ["fsr"]
        assert not (tmp_path / "golden" / "manifest.json").exists()


@pytest.mark.unit
class TestScenarioErrors:
    def test_lock_without_servo_section(self, tmp_path, capsys):
        scenario = _scenario(tmp_path, "[run]\nduration_s = 0.05\n")
        assert main(["lock", "--scenario", scenario, "--out", str(tmp_path / "out")]) == 2
        error = _error(capsys)
        assert error["error"] == "invalid_scenario"
        assert error["details"]["section"] == "servo"

    def test_unknown_key(self, tmp_path, capsys):
        scenario = _scenario(tmp_path, "[cavity]\nfinese = 50000.0\n")
        assert main(["ringdown", "--scenario", scenario, "--out", str(tmp_path / "out")]) == 2
        error = _error(capsys)
        assert error["error"] == "invalid_scenario"
        assert "finese" in error["message"]

    def test_missing_scenario_file(self, tmp_path, capsys):
        assert main(["sweep", "--scenario", str(tmp_path / "absent.toml"), "--out", str(tmp_path / "out")]) == 2
        assert _error(capsys)["error"] == "invalid_scenario"

    def test_unexpected_failures_are_reported(self, tmp_path, capsys, mocker):
        mocker.patch("ringsim.commands.optics.fit_ringdown", side_effect=RuntimeError("boom"))
        assert main(["ringdown", "--out", str(tmp_path / "out")]) == 1
        error = _error(capsys)
        assert error["error"] == "internal_error"
        assert error["message"] == "boom"

    def test_rejects_zero_workers(self):
        with pytest.raises(SystemExit):
            main(["sense", "--workers", "0"])

    def test_rejects_negative_seed(self):
        with pytest.raises(SystemExit):
            main(["ringdown", "--seed", "-1"])


@pytest.mark.unit
class TestOpticsCommands:
    def test_ringdown_defaults(self, tmp_path):
        out = tmp_path / "ringdown"
        assert main(["ringdown", "--out", str(out)]) == 0
        fit = _read_json(out / "ringdown_fit.json")
        assert fit["finesse_dimless"] == pytest.approx(50000.0, rel=0.01)
        assert fit["configured_finesse_dimless"] == 50000.0
        manifest = _read_json(out / "manifest.json")
        assert manifest["files"] == ["ringdown.csv", "ringdown_fit.json"]
        assert manifest["scenario_path"] is None
        assert manifest["rng_seed_u64"] == 0
        header = (out / "ringdown.csv").read_text().splitlines()[0]
        assert header == "time_s,power_w"

    def test_seed_flag_changes_a_noisy_ringdown(self, tmp_path):
        scenario = _scenario(tmp_path, "[cavity]\n[ringdown]\nrelative_noise = 0.01\n")
        for seed in ("1", "2"):
            assert main(["ringdown", "--scenario", scenario, "--seed", seed, "--out", str(tmp_path / seed)]) == 0
        assert _read_json(tmp_path / "2" / "manifest.json")["rng_seed_u64"] == 2
        first = (tmp_path / "1" / "ringdown.csv").read_bytes()
        second = (tmp_path / "2" / "ringdown.csv").read_bytes()
        assert first != second

    def test_finesse_scan_section(self, tmp_path):
        scenario = _scenario(tmp_path, "[cavity]\n[ringdown]\nscan_finesse = [15000.0]\nscan_seed_count = 3\n")
        out = tmp_path / "out"
        assert main(["ringdown", "--scenario", scenario, "--out", str(out)]) == 0
        scan = _read_json(out / "finesse_scan.json")
        assert scan["entries"][0]["seed_count"] == 3

    def test_sweep_is_byte_identical_across_runs(self, tmp_path):
        for name in ("a", "b"):
            assert main(["sweep", "--out", str(tmp_path / name)]) == 0
        first = (tmp_path / "a" / "sweep.csv").read_bytes()
        assert first == (tmp_path / "b" / "sweep.csv").read_bytes()
        lines = first.decode().splitlines()
        assert lines[0] == "detuning_hz,error_w,reflected_fraction_dimless,buildup_dimless"
        assert len(lines) == 2002

    def test_sweep_requires_modulation(self, tmp_path, capsys):
        scenario = _scenario(tmp_path, "[cavity]\n")
        assert main(["sweep", "--scenario", scenario, "--out", str(tmp_path / "out")]) == 2
        assert _error(capsys)["details"]["section"] == "modulation"


@pytest.mark.unit
class TestLoopCommands:
    def test_print_defaults(self, tmp_path, capsys):
        out = tmp_path / "never"
        assert main(["bode", "--print-defaults", "--out", str(out)]) == 0
        resolved = json.loads(capsys.readouterr().out)
        assert resolved["servo"]["overall_gain"] > 0
        assert resolved["derived"]["linewidth_hz"] == pytest.approx(3747.4, rel=1e-3)
        assert not out.exists()

    def test_bode(self, tmp_path):
        out = tmp_path / "bode"
        assert main(["bode", "--out", str(out)]) == 0
        lines = (out / "bode.csv").read_text().splitlines()
        assert lines[0] == "frequency_hz,open_loop_magnitude_db,open_loop_phase_deg,suppression_db"
        assert len(lines) == 1402
        report = _read_json(out / "loop_report.json")
        assert report["stable"]
        assert report["resonance_peak_db"] == pytest.approx(10.0, abs=0.05)


@pytest.mark.integration
class TestTimeDomainCommands:
    def test_short_lock(self, tmp_path):
        scenario = _scenario(
            tmp_path,
            "[servo]\n[injection]\ndrive_frequency_hz = 217.0\n[run]\nduration_s = 0.05\ndecimation = 10\n",
        )
        out = tmp_path / "lock"
        assert main(["lock", "--scenario", scenario, "--out", str(out)]) == 0
        manifest = _read_json(out / "manifest.json")
        assert manifest["files"] == ["trace.csv", "run_report.json", "psd.csv"]
        report = _read_json(out / "run_report.json")
        assert report["locked"]
        assert report["delay_samples_count"] == 2
        trace_lines = (out / "trace.csv").read_text().splitlines()
        assert trace_lines[0].startswith("time_s,cw_error_w,ccw_error_w,aom_cmd_hz")
        assert len(trace_lines) == 10001

    def test_lock_loss_keeps_the_partial_trace(self, tmp_path, capsys):
        scenario = _scenario(
            tmp_path,
            "[servo]\n[run]\nduration_s = 0.05\ndecimation = 10\ninitial_detuning_hz = 5e3\n"
            "aom_range_hz = 1.0\npzt_range_hz = 1.0\ntec_range_hz = 1.0\n",
        )
        out = tmp_path / "lock"
        assert main(["lock", "--scenario", scenario, "--out", str(out)]) == 1
        error = _error(capsys)
        assert error["error"] == "lock_lost"
        assert error["details"]["time_of_failure_s"] == pytest.approx(1e-3)
        assert len((out / "trace.csv").read_text().splitlines()) == 201
        assert not (out / "manifest.json").exists()

    def test_sense(self, tmp_path):
        scenario = _scenario(
            tmp_path,
            "[servo]\n[injection]\ndrive_frequency_hz = 217.0\n[run]\nduration_s = 0.3\ndecimation = 10\n"
            "[scan]\ndrive_amplitudes_v = [0.0, 10.0, 100.0, 1000.0]\nlockin_time_constant_s = 0.02\n",
        )
        out = tmp_path / "sense"
        assert main(["sense", "--scenario", scenario, "--workers", "2", "--out", str(out)]) == 0
        summary = _read_json(out / "fit_summary.json")
        assert summary["point_count"] == 4
        assert summary["lock_lost_count"] == 0
        assert summary["slope_dimless"] == pytest.approx(1.0, abs=0.01)
        lines = (out / "scan.csv").read_text().splitlines()
        assert lines[0] == "drive_amplitude_v,fm_amplitude_hz,lockin_w,equivalent_hz,lockin_phase_rad,locked"
        assert len(lines) == 5
