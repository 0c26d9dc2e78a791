import os
import sys
import json
import math

import pandas as pd

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "src"))
sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir))

import pytest

from tests.utils import config_text
from mc_kinetic_lab.config import DATABASE_URL_ENV, parse_config
from mc_kinetic_lab.operations import get_series
from mc_kinetic_lab.prefect.flows import summarize_sweep, decay_sweep_flow
from mc_kinetic_lab.prefect.tasks import get_engine, run_experiment
from mc_kinetic_lab.testing.utilities import clear_database


def sweep_template():
    return parse_config(config_text(t_end=2, observers__cadence=0.25, observers__budget="5"))


def test_sweep_from_record_files(tmp_path):
    summary = decay_sweep_flow(sweep_template(), [1e-3, 2e-3], str(tmp_path), workers=2, window=(0.25, 2.0))

    assert summary.all_completed
    assert summary.table["eps"].tolist() == [1e-3, 2e-3]
    assert summary.table["exponent"].notna().all()
    # Linear-in-eps data decays at an eps-independent rate.
    assert summary.exponent_spread < 1e-2
    assert summary.scalings["commutator_budget[scaling]"] == pytest.approx(2.0, abs=0.05)
    for eps in (1e-3, 2e-3):
        assert (tmp_path / f"eps_{eps:.6g}" / "manifest.json").is_file()


def test_sweep_through_the_catalogue(tmp_path):
    engine = get_engine()
    clear_database(engine)
    database_url = os.environ[DATABASE_URL_ENV]

    summary = decay_sweep_flow(
        sweep_template(), [1e-3, 4e-3], str(tmp_path), window=(0.25, 2.0), database_url=database_url
    )

    assert summary.all_completed
    for config_hash in summary.table["config_hash"]:
        assert len(get_series(engine, config_hash, "sup_rho")) == 9
    payload = summary.to_dict()
    assert len(payload["runs"]) == 2
    assert payload["observable"] == "sup_rho"


def test_sweep_needs_two_amplitudes(tmp_path):
    with pytest.raises(ValueError):
        decay_sweep_flow(sweep_template(), [1e-3], str(tmp_path))


def test_failed_runs_are_reported(tmp_path):
    outcome = run_experiment("system = vm\n", str(tmp_path / "bad"))
    assert outcome["status"] == "failed"
    assert outcome["error"]

    summary = summarize_sweep([1e-3, 2e-3], [outcome, outcome], "sup_rho")
    assert not summary.all_completed
    assert math.isnan(summary.exponent_spread)
    assert summary.scalings == {}


def completed_outcome(directory, budget: bool) -> dict:
    """A completed run on disk; the budget series is listed in the manifest but only written when asked."""
    directory.mkdir(parents=True)
    times = [0.25 * k for k in range(9)]
    pd.DataFrame({"time": times, "value": [(1.0 + t) ** -2 for t in times]}).to_csv(directory / "sup_rho.csv", index=False)
    if budget:
        pd.DataFrame({"time": times, "value": [1e-6] * 9}).to_csv(directory / "budget.csv", index=False)
    series = {"sup_rho": "sup_rho.csv", "commutator_budget[scaling]": "budget.csv"}
    (directory / "manifest.json").write_text(json.dumps({"series": series}))
    return {"config_hash": directory.name * 8, "status": "completed", "output_dir": str(directory), "error": None}


def test_missing_budget_series_is_reported(tmp_path):
    outcomes = [completed_outcome(tmp_path / "a", budget=True), completed_outcome(tmp_path / "b", budget=False)]

    summary = summarize_sweep([1e-3, 2e-3], outcomes, "sup_rho", window=(0.25, 2.0))

    assert summary.all_completed
    assert summary.table["exponent"].tolist() == pytest.approx([-2.0, -2.0], abs=1e-6)
    assert summary.table["commutator_budget[scaling]"].iloc[0] == pytest.approx(1e-6)
    assert math.isnan(summary.table["commutator_budget[scaling]"].iloc[1])
    assert summary.scalings == {}
