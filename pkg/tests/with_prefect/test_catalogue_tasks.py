import os
import sys

import pandas as pd

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, "src"))
sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, os.pardir))

import pytest
from sqlalchemy import Engine, select
from sqlalchemy.orm import Session

from mc_kinetic_lab.models import Base, LemmaCheck, DecayFitRow
from mc_kinetic_lab.config import DATABASE_URL_ENV
from mc_kinetic_lab.operations import lemma_frame, store_run_record, experiment_frame
from mc_kinetic_lab.transport import RunRecord
from mc_kinetic_lab.diagnostics import DecayFit, LemmaCheckReport
from mc_kinetic_lab.prefect.tasks import set_data, get_engine, store_decay_fit
from mc_kinetic_lab.testing.utilities import TEST_DB_PREFIX, clear_database
from mc_kinetic_lab.prefect.asyncio.tasks import set_data as set_data_async
from mc_kinetic_lab.prefect.asyncio.tasks import get_engine as get_engine_async


def lemma_report(lemma: str, ratio: float) -> LemmaCheckReport:
    table = pd.DataFrame({"measured": [ratio], "bound": [1.0], "ratio": [ratio]})
    return LemmaCheckReport("commutators", lemma, table)


def test_engine_is_the_test_catalogue():
    engine = get_engine()
    assert isinstance(engine, Engine)
    assert engine.url.drivername == "sqlite"
    assert os.path.basename(engine.url.database).startswith(TEST_DB_PREFIX)
    assert str(engine.url) == os.environ[DATABASE_URL_ENV]


@pytest.mark.asyncio
async def test_engine_is_the_test_catalogue_async():
    engine = await get_engine_async()
    assert isinstance(engine, Engine)
    assert engine.url.drivername == "sqlite"
    assert os.path.basename(engine.url.database).startswith(TEST_DB_PREFIX)


def test_primary_key_constraint_names():
    for table in Base.metadata.tables.values():
        assert table.primary_key.name == f"{table.name}_pkey"


def test_all_models_are_created():
    # Get the engine.
    engine = get_engine()

    # Check that the models are created.
    for _, table in Base.metadata.tables.items():
        df = pd.read_sql(select(table), engine)
        assert sorted(df.columns.tolist()) == sorted([col.name for col in table.columns])


def test_set_data_upsert_replaces_lemma_outcomes():
    # Get the engine.
    engine = get_engine()
    clear_database(engine)

    # Record a passing check, then overwrite it with a failing one.
    set_data(LemmaCheck.__tablename__, lemma_frame([lemma_report("scaling", 0.25)]))
    set_data(LemmaCheck.__tablename__, lemma_frame([lemma_report("scaling", 3.0)]), operation_type="upsert")

    # Check there is a single row holding the latest outcome.
    with Session(engine) as session:
        row = session.execute(select(LemmaCheck)).scalar_one()
        assert row.suite == "commutators"
        assert row.worst_ratio == 3.0
        assert row.passed is False


def test_set_data_append_adds_new_rows():
    # Get the engine.
    engine = get_engine()
    clear_database(engine)

    # Append two different checks.
    set_data(LemmaCheck.__tablename__, lemma_frame([lemma_report("boost", 0.5)]), operation_type="append")
    set_data(LemmaCheck.__tablename__, lemma_frame([lemma_report("rotation", 0.5)]), operation_type="append")

    with Session(engine) as session:
        lemmas = sorted(row.lemma for row in session.execute(select(LemmaCheck)).scalars())
        assert lemmas == ["boost", "rotation"]


def test_set_data_rejects_unknown_tables():
    with pytest.raises(ValueError):
        set_data("field_solution", pd.DataFrame({"phi": [1.0]}))


@pytest.mark.asyncio
async def test_set_data_async_upsert():
    # Get the engine.
    engine = await get_engine_async()
    clear_database(engine)

    await set_data_async(LemmaCheck.__tablename__, lemma_frame([lemma_report("translation", 0.5)]))
    await set_data_async(LemmaCheck.__tablename__, lemma_frame([lemma_report("translation", 0.75)]))

    with Session(engine) as session:
        row = session.execute(select(LemmaCheck)).scalar_one()
        assert row.worst_ratio == 0.75
        assert row.passed is True


def test_store_decay_fit_task():
    # Get the engine.
    engine = get_engine()
    clear_database(engine)

    # Catalogue an experiment to attach the fit to.
    record = RunRecord("d" * 64)
    record.append({"time": 0.0, "sup_rho": 1.0})
    store_run_record(engine, experiment_frame(record, "vy", 2, -1, 1e-3, 1.0, "grid"), record)

    # Store the same fit twice; the key is (experiment, observable, window).
    fit = DecayFit(-1.9, 0.2, 5.0, 20.0, 1e-2, 16, 0.05)
    store_decay_fit(record.config_hash, "sup_rho", fit)
    store_decay_fit(record.config_hash, "sup_rho", fit)

    with Session(engine) as session:
        row = session.execute(select(DecayFitRow)).scalar_one()
        assert row.exponent == -1.9
        assert row.t_start == 5.0
        assert row.t_end == 20.0
        assert row.stderr == 0.05
