from typing import Literal

import pandas as pd
from prefect import task, get_run_logger
from sqlalchemy import Engine, create_engine
from prefect.blocks.system import Secret

from mc_kinetic_lab.config import DATABASE_SECRET_NAME
from mc_kinetic_lab.operations import __set_data, decay_fit_frame
from mc_kinetic_lab.diagnostics import DecayFit


@task()
async def get_engine() -> Engine:
    """
    Get the catalogue engine from the connection string secret.
    """
    database_url = (await Secret.load(DATABASE_SECRET_NAME)).get()  # type: ignore
    return create_engine(database_url)


@task()
async def set_data(
    table_name: str,
    data: pd.DataFrame,
    operation_type: Literal["append", "upsert"] = "upsert",
):
    """
    Set the data in the run catalogue.
    """
    logger = get_run_logger()
    engine = await get_engine()
    __set_data(engine, table_name, data, operation_type, logging_method=logger.info)


@task()
async def store_decay_fit(config_hash: str, observable: str, fit: DecayFit):
    await set_data("decay_fit", decay_fit_frame(config_hash, observable, fit))
