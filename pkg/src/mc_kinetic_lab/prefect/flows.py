import json
import math
from pathlib import Path
from dataclasses import field, dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from prefect import flow, get_run_logger
from sqlalchemy import create_engine
from prefect.task_runners import ThreadPoolTaskRunner

from mc_kinetic_lab.config import ExperimentConfig, parse_config, serialize_config
from mc_kinetic_lab.operations import get_series, store_decay_fit
from mc_kinetic_lab.diagnostics import decay_fit, epsilon_scaling
from mc_kinetic_lab.prefect.tasks import run_experiment

BUDGET_PREFIX = "commutator_budget["


@dataclass
class SweepSummary:
    """
    One row per eps with the run status, the fitted decay exponent of the swept
    observable and the window mean of every recorded commutator budget; plus the
    eps-scaling slope of each budget.
    """

    observable: str
    table: pd.DataFrame
    scalings: dict[str, float] = field(default_factory=dict)

    @property
    def all_completed(self) -> bool:
        return bool((self.table["status"] == "completed").all())

    @property
    def exponent_spread(self) -> float:
        exponents = self.table["exponent"].dropna()
        if len(exponents) < 2:
            return math.nan
        return float(exponents.max() - exponents.min())

    def to_dict(self) -> dict:
        return {
            "observable": self.observable,
            "all_completed": self.all_completed,
            "exponent_spread": self.exponent_spread,
            "budget_scaling": self.scalings,
            "runs": self.table.replace({np.nan: None}).to_dict(orient="records"),
        }


def _run_series(outcome: dict, observable: str, database_url: Optional[str]) -> pd.Series:
    if database_url is not None:
        return get_series(create_engine(database_url), outcome["config_hash"], observable)
    # Deferred so the CLI can import this module lazily without a cycle.
    from mc_kinetic_lab.cli_runner import read_record_series

    return read_record_series(Path(outcome["output_dir"]), observable)[1]


def _budget_observables(output_dir: str) -> list[str]:
    manifest = Path(output_dir) / "manifest.json"
    if not manifest.is_file():
        return []
    return sorted(name for name in json.loads(manifest.read_text())["series"] if name.startswith(BUDGET_PREFIX))


def summarize_sweep(
    eps_values: Sequence[float],
    outcomes: Sequence[dict],
    observable: str,
    window: Optional[tuple[float, float]] = None,
    database_url: Optional[str] = None,
    logging_method=print,
) -> SweepSummary:
    rows = []
    budgets: dict[str, list[float]] = {}
    for eps, outcome in zip(eps_values, outcomes):
        row = {"eps": eps, **{key: outcome[key] for key in ("config_hash", "status", "output_dir", "error")}}
        row.update({"exponent": math.nan, "exponent_stderr": math.nan})
        if outcome["status"] == "completed":
            try:
                fit = decay_fit(_run_series(outcome, observable, database_url), window)
                row.update({"exponent": fit.exponent, "exponent_stderr": fit.stderr})
                if database_url is not None:
                    store_decay_fit(create_engine(database_url), outcome["config_hash"], observable, fit)
            except (KeyError, ValueError, OSError) as error:
                logging_method(f"No decay fit for eps={eps}: {error}")
            for name in _budget_observables(outcome["output_dir"]):
                try:
                    series = _run_series(outcome, name, database_url)
                except (KeyError, ValueError, OSError) as error:
                    logging_method(f"No {name} series for eps={eps}: {error}")
                    row[name] = math.nan
                    budgets.setdefault(name, []).append(math.nan)
                    continue
                times = series.index.to_numpy(dtype=float)
                low, high = window or (times.max() / 10.0, times.max())
                selected = series[(times >= low - 1e-12) & (times <= high + 1e-12)]
                row[name] = float(selected.mean()) if len(selected) else math.nan
                budgets.setdefault(name, []).append(row[name])
        rows.append(row)
    table = pd.DataFrame(rows)
    scalings = {}
    for name, values in budgets.items():
        if len(values) == len(eps_values) and all(np.isfinite(values)):
            try:
                scalings[name] = epsilon_scaling(eps_values, values)
            except ValueError as error:
                logging_method(f"No eps scaling for {name}: {error}")
    return SweepSummary(observable, table, scalings)


@flow(name="decay-sweep")
def decay_sweep(
    template_text: str,
    eps_values: list[float],
    output_root: str,
    observable: str = "sup_rho",
    window: Optional[tuple[float, float]] = None,
    database_url: Optional[str] = None,
) -> SweepSummary:
    """
    Run the template config once per eps concurrently, then fit every run's
    observable and compare the commutator budgets across eps.
    """
    logger = get_run_logger()
    template = parse_config(template_text)
    futures = []
    for eps in eps_values:
        output_dir = str(Path(output_root) / f"eps_{eps:.6g}")
        config_text = serialize_config(template.with_eps(eps, output_dir))
        futures.append(run_experiment.submit(config_text, output_dir, database_url))
    outcomes = [future.result() for future in futures]
    failed = [outcome for outcome in outcomes if outcome["status"] != "completed"]
    if failed:
        logger.warning(f"{len(failed)} of {len(outcomes)} sweep runs did not complete")
    return summarize_sweep(eps_values, outcomes, observable, window, database_url, logger.info)


def decay_sweep_flow(
    template: ExperimentConfig,
    eps_values: Sequence[float],
    output_root: str,
    workers: int = 1,
    observable: str = "sup_rho",
    window: Optional[tuple[float, float]] = None,
    database_url: Optional[str] = None,
) -> SweepSummary:
    if len(eps_values) < 2:
        raise ValueError(f"A sweep needs at least two eps values, got {len(eps_values)}")
    runner = ThreadPoolTaskRunner(max_workers=max(1, workers))
    return decay_sweep.with_options(task_runner=runner)(
        serialize_config(template), list(eps_values), output_root, observable, window, database_url
    )
