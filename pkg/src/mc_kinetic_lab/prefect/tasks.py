from typing import Literal, Optional

import pandas as pd
from prefect import task, get_run_logger
from sqlalchemy import Engine, create_engine
from prefect.blocks.system import Secret

from mc_kinetic_lab.config import DATABASE_SECRET_NAME, load_settings, parse_config
from mc_kinetic_lab.operations import __set_data, decay_fit_frame
from mc_kinetic_lab.diagnostics import DecayFit


@task()
def get_engine() -> Engine:
    """
    Get the catalogue engine from the connection string secret.
    """
    database_url = Secret.load(DATABASE_SECRET_NAME).get()  # type: ignore
    return create_engine(database_url)


@task()
def set_data(
    table_name: str,
    data: pd.DataFrame,
    operation_type: Literal["append", "upsert"] = "upsert",
):
    """
    Set the data in the run catalogue.
    """
    logger = get_run_logger()
    engine = get_engine()
    __set_data(engine, table_name, data, operation_type, logging_method=logger.info)


@task()
def store_decay_fit(config_hash: str, observable: str, fit: DecayFit):
    set_data("decay_fit", decay_fit_frame(config_hash, observable, fit))


@task()
def run_experiment(config_text: str, output_dir: str, database_url: Optional[str] = None) -> dict:
    """
    Run one experiment and return its summary. Failures are reported in the summary
    with status "failed" so a sweep keeps its other runs.
    """
    # Deferred so the CLI can import this module lazily without a cycle.
    from mc_kinetic_lab.cli_runner import execute_experiment

    logger = get_run_logger()
    try:
        config = parse_config(config_text)
        engine = None
        if database_url is not None:
            engine = create_engine(database_url)
        outcome = execute_experiment(config, output_dir, load_settings(), engine)
    except Exception as error:
        logger.error(f"Experiment in {output_dir} failed: {error}")
        return {"config_hash": None, "status": "failed", "output_dir": output_dir, "manifest_hash": None, "error": str(error)}
    logger.info(f"Experiment {outcome.config_hash[:12]} {outcome.status}")
    return outcome.to_dict()
