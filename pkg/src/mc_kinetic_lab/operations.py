from typing import Literal, Callable, Optional

import pandas as pd
from sqlalchemy import Engine, Connection, select
from sqlalchemy.orm import Session
from sqlalchemy.dialects import sqlite, postgresql

from mc_kinetic_lab.models import Base, ObservablePoint
from mc_kinetic_lab.diagnostics import DecayFit, LemmaCheckReport
from mc_kinetic_lab.transport import RunRecord

UPSERT_CHUNK_ROWS = 500


def __upsert(table: pd.DataFrame, conn: Connection, keys, data_iter):
    """
    Upsert the rows with an ON CONFLICT clause; used as the pd.to_sql method.
    PostgreSQL targets the <table>_pkey constraint, SQLite the model's primary-key
    columns; the table pandas builds from the frame carries no keys.
    """
    data = [dict(zip(keys, row)) for row in data_iter]
    if conn.dialect.name == "postgresql":
        insert_statement = postgresql.insert(table.table).values(data)
        upsert_statement = insert_statement.on_conflict_do_update(
            constraint=f"{table.table.name}_pkey",
            set_={c.key: c for c in insert_statement.excluded},
        )
    elif conn.dialect.name == "sqlite":
        insert_statement = sqlite.insert(table.table).values(data)
        upsert_statement = insert_statement.on_conflict_do_update(
            index_elements=[c.name for c in Base.metadata.tables[table.table.name].primary_key.columns],
            set_={c.key: c for c in insert_statement.excluded},
        )
    else:
        raise ValueError(f"Upserts are not supported on {conn.dialect.name}")
    result = conn.execute(upsert_statement)
    return result


def __set_data(
    engine: Engine,
    table_name: str,
    data: pd.DataFrame,
    operation_type: Literal["append", "upsert"] = "upsert",
    logging_method: Callable[[str], None] = print,
):
    """
    Write catalogue rows. Shared by the plain functions and the Prefect tasks, which
    differ only in how they log.
    """
    # Check if the operation type is valid
    if operation_type not in ["append", "upsert"]:
        raise ValueError(f"Invalid operation type: {operation_type}")

    # Check if the table is one of the catalogue models
    if table_name not in [table.__tablename__ for table in Base.__subclasses__()]:
        raise ValueError(f"Table {table_name} is not part of the run catalogue")

    # Check if the data is a pandas DataFrame
    if not isinstance(data, pd.DataFrame):
        raise ValueError(f"Data is not a pandas DataFrame: {type(data)}")

    # Check if the data is empty
    if data.empty:
        logging_method(f"Data is empty, skipping {table_name}")
        return

    if operation_type == "append":
        logging_method(f"Appending {len(data)} row(s) to {table_name}")
        data.to_sql(table_name, engine, if_exists="append", index=False)
    elif operation_type == "upsert":
        logging_method(f"Upserting {len(data)} row(s) to {table_name}")
        data.to_sql(
            table_name,
            engine,
            if_exists="append",
            index=False,
            method=__upsert,
            # SQLite caps the bound parameters of one statement
            chunksize=UPSERT_CHUNK_ROWS,
        )


def set_data(
    engine: Engine,
    table_name: str,
    data: pd.DataFrame,
    operation_type: Literal["append", "upsert"] = "upsert",
):
    """
    Write catalogue rows, logging the operation to the console.
    """
    __set_data(engine, table_name, data, operation_type, logging_method=print)


def experiment_frame(
    record: RunRecord,
    system: str,
    dimension: int,
    mu: int,
    eps: float,
    t_end: float,
    method: str,
    output_dir: Optional[str] = None,
    manifest_hash: Optional[str] = None,
) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "config_hash": record.config_hash,
                "system": system,
                "dimension": dimension,
                "mu": mu,
                "eps": eps,
                "t_end": t_end,
                "method": method,
                "output_dir": output_dir,
                "manifest_hash": manifest_hash,
                "status": "aborted" if record.aborted else "completed",
            }
        ]
    )


def observable_frame(record: RunRecord) -> pd.DataFrame:
    """
    The record's series in long form: one row per (observable, time).
    """
    series = record.series()
    if series.empty:
        return pd.DataFrame(columns=["config_hash", "observable", "time", "value"])
    long = series.melt(id_vars="time", var_name="observable", value_name="value").dropna()
    long.insert(0, "config_hash", record.config_hash)
    return long[["config_hash", "observable", "time", "value"]].astype({"value": float})


def __store_run_record(
    engine: Engine,
    experiment: pd.DataFrame,
    record: RunRecord,
    snapshots: Optional[pd.DataFrame] = None,
    logging_method: Callable[[str], None] = print,
):
    __set_data(engine, "experiment", experiment, "upsert", logging_method)
    __set_data(engine, "observable_point", observable_frame(record), "upsert", logging_method)
    if snapshots is not None:
        __set_data(engine, "snapshot_file", snapshots, "upsert", logging_method)


def store_run_record(
    engine: Engine,
    experiment: pd.DataFrame,
    record: RunRecord,
    snapshots: Optional[pd.DataFrame] = None,
):
    __store_run_record(engine, experiment, record, snapshots, logging_method=print)


def decay_fit_frame(config_hash: str, observable: str, fit: DecayFit) -> pd.DataFrame:
    row = {"config_hash": config_hash, "observable": observable}
    row.update(fit.to_dict())
    return pd.DataFrame([row])


def store_decay_fit(engine: Engine, config_hash: str, observable: str, fit: DecayFit):
    __set_data(engine, "decay_fit", decay_fit_frame(config_hash, observable, fit), "upsert", print)


def lemma_frame(reports: list[LemmaCheckReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "suite": report.suite,
                "lemma": report.lemma,
                "worst_ratio": report.worst_ratio,
                "threshold": report.threshold,
                "passed": report.passed,
            }
            for report in reports
        ]
    )


def store_lemma_report(engine: Engine, reports: list[LemmaCheckReport]):
    __set_data(engine, "lemma_check", lemma_frame(reports), "upsert", print)


def get_series(engine: Engine, config_hash: str, observable: str) -> pd.Series:
    """
    One observable of one experiment as a time-indexed series.
    """
    with Session(engine) as session:
        statement = (
            select(ObservablePoint.time, ObservablePoint.value)
            .where(ObservablePoint.config_hash == config_hash)
            .where(ObservablePoint.observable == observable)
            .order_by(ObservablePoint.time)
        )
        rows = session.execute(statement).all()
    if not rows:
        raise ValueError(f"No {observable} series for experiment {config_hash[:12]}")
    times, values = zip(*rows)
    return pd.Series(values, index=pd.Index(times, name="time"), name=observable, dtype=float)
