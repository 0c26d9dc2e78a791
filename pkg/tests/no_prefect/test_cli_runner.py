import os
import sys
import json

import pandas as pd

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "src"))

import pytest

from tests.utils import write_config
from mc_kinetic_lab.config import DATABASE_URL_ENV, OUTPUT_ROOT_ENV
from mc_kinetic_lab.cli_runner import (
    EXIT_OK,
    EXIT_INVALID_CONFIG,
    EXIT_RESOURCE_BUDGET,
    main,
    series_file_name,
)


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "output"))
    monkeypatch.setenv(DATABASE_URL_ENV, f"sqlite:///{tmp_path / 'catalogue.sqlite'}")


class TestRun:
    """The run command and its record directory."""

    def test_run_writes_a_record(self, tmp_path):
        """Test that a run writes its series and a manifest."""
        config = write_config(tmp_path)
        output = tmp_path / "run"
        assert main(["run", "--config", str(config), "--output", str(output), "--no-catalogue"]) == EXIT_OK
        manifest = json.loads((output / "manifest.json").read_text())
        assert manifest["status"] == "completed"
        assert len(manifest["series"]) >= 4
        series = pd.read_csv(output / manifest["series"]["sup_rho"])
        assert series["time"].tolist() == [0.0, 0.5, 1.0]
        for name, digest in manifest["files"].items():
            assert (output / name).is_file()
            assert len(digest) == 64

    def test_rerun_reproduces_the_manifest(self, tmp_path, capsys):
        """Test that two runs of one config give the same manifest hash."""
        config = write_config(tmp_path)
        hashes = []
        for name in ("first", "second"):
            assert main(["run", "--config", str(config), "--output", str(tmp_path / name), "--no-catalogue"]) == EXIT_OK
            hashes.append(json.loads(capsys.readouterr().out)["manifest_hash"])
        assert hashes[0] == hashes[1]

    def test_run_is_catalogued(self, tmp_path):
        """Test that a run without --no-catalogue creates the catalogue."""
        config = write_config(tmp_path)
        assert main(["run", "--config", str(config), "--output", str(tmp_path / "run")]) == EXIT_OK
        assert (tmp_path / "catalogue.sqlite").is_file()

    def test_default_output_directory(self, tmp_path):
        """Test that runs default to a directory named after the config hash."""
        config = write_config(tmp_path)
        assert main(["run", "--config", str(config), "--no-catalogue"]) == EXIT_OK
        runs = list((tmp_path / "output").iterdir())
        assert len(runs) == 1
        assert len(runs[0].name) == 12

    def test_poisson_in_two_dimensions_is_a_config_error(self, tmp_path):
        """Test that the Vlasov-Poisson system is refused for n = 2."""
        config = write_config(tmp_path, system="vp")
        assert main(["run", "--config", str(config), "--no-catalogue"]) == EXIT_INVALID_CONFIG

    def test_missing_config(self, tmp_path):
        """Test that a missing config file is a config error."""
        assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == EXIT_INVALID_CONFIG

    def test_memory_budget(self, tmp_path, monkeypatch):
        """Test that an oversized grid exits before allocating."""
        monkeypatch.setenv("KINETIC_LAB_MEMORY_BUDGET_MB", "0.01")
        config = write_config(tmp_path)
        assert main(["run", "--config", str(config), "--no-catalogue"]) == EXIT_RESOURCE_BUDGET


class TestOtherCommands:
    """Lemma suites, fits, sweeps and tables."""

    def test_usage_errors_exit_with_three(self):
        """Test that argparse errors map to the config exit code."""
        assert main([]) == EXIT_INVALID_CONFIG
        assert main(["run"]) == EXIT_INVALID_CONFIG

    def test_unknown_suite(self, tmp_path):
        """Test that an unknown lemma suite is a usage error."""
        assert main(["verify-lemmas", "--suite", "lemmas", "--no-catalogue"]) == EXIT_INVALID_CONFIG

    def test_verify_lemmas(self, tmp_path):
        """Test that the Bessel suite passes and writes its report."""
        output = tmp_path / "lemmas"
        assert main(["verify-lemmas", "--suite", "bessel", "--output", str(output), "--no-catalogue"]) == EXIT_OK
        report = json.loads((output / "report.json").read_text())
        assert report["passed"]
        assert report["checks"]

    def test_single_eps_sweep_is_a_config_error(self, tmp_path):
        """Test that a sweep over one amplitude is refused."""
        config = write_config(tmp_path)
        assert main(["decay-sweep", "--config", str(config), "--eps", "1e-3", "--no-catalogue"]) == EXIT_INVALID_CONFIG

    def test_bessel_table(self, tmp_path):
        """Test that the Bessel table has one row per order and radius."""
        output = tmp_path / "bessel.csv"
        assert main(["bessel-table", "--orders", "0.5,1", "--count", "5", "--output", str(output)]) == EXIT_OK
        table = pd.read_csv(output)
        assert len(table) == 10
        assert "ratio" in table.columns

    def test_fit_decay(self, tmp_path):
        """Test that a recorded series can be fitted afterwards."""
        config = write_config(tmp_path, t_end=2, observers__cadence=0.25)
        record = tmp_path / "run"
        assert main(["run", "--config", str(config), "--output", str(record), "--no-catalogue"]) == EXIT_OK
        arguments = ["fit-decay", "--record", str(record), "--observable", "sup_rho", "--window", "0.25:2"]
        assert main(arguments + ["--no-catalogue"]) == EXIT_OK
        fit = json.loads((record / "fits" / f"{series_file_name('sup_rho')[:-4]}.json").read_text())
        assert fit["point_count"] == 8
        assert fit["exponent"] < 0

    def test_fit_decay_needs_a_record(self, tmp_path):
        """Test that a directory without a manifest is a usage error."""
        arguments = ["fit-decay", "--record", str(tmp_path), "--observable", "sup_rho", "--no-catalogue"]
        assert main(arguments) == EXIT_INVALID_CONFIG

    def test_series_file_names(self):
        """Test that observable names become safe file names."""
        assert series_file_name("commutator_budget[scaling]") == "commutator_budget_scaling.csv"
        assert series_file_name("sup_rho") == "sup_rho.csv"
