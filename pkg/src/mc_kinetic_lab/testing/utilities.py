import os
import uuid
import logging
import tempfile
from pathlib import Path
from contextlib import contextmanager
from urllib.parse import urlparse

from sqlalchemy import Engine, create_engine

import mc_kinetic_lab.models as models
from mc_kinetic_lab.config import DATABASE_URL_ENV, DATABASE_SECRET_NAME

LOGGER = logging.getLogger(__name__)

TEST_DB_PREFIX = "kinetic-lab-test-"
TEST_DB_SIZE_THRESHOLD_MB = 100


def _validate_test_database_connection(engine: Engine):
    """
    Validate that the catalogue is a throw-away SQLite file under the temp directory.
    Raises ValueError otherwise.
    """
    url = engine.url

    # Check driver
    if url.drivername != "sqlite":
        raise ValueError(f"Unsupported database driver: {url.drivername}. Only SQLite is used for tests.")

    # Check the file lives in the temp directory
    if not url.database:
        raise ValueError("In-memory databases are not shared between connections; use a file.")
    path = Path(url.database).resolve()
    if path.parent != Path(tempfile.gettempdir()).resolve() or not path.name.startswith(TEST_DB_PREFIX):
        raise ValueError(f"Database file '{path}' is not a test catalogue. This may be a real catalogue!")

    # Additional check: a test catalogue never grows large
    if path.exists():
        size_mb = path.stat().st_size / (1024 * 1024)
        if size_mb > TEST_DB_SIZE_THRESHOLD_MB:
            raise ValueError(
                f"Database size ({size_mb:.1f}MB) is suspiciously large for a test catalogue. "
                "This may be a real catalogue!"
            )


def clear_database(engine: Engine):
    """
    Clear the catalogue of all data.
    Performs safety checks to ensure we're not clearing a real catalogue.
    """

    # Validate that this is a safe test database connection
    _validate_test_database_connection(engine)

    # Drop all tables in the database.
    models.Base.metadata.drop_all(engine)

    # Create all tables in the database.
    models.Base.metadata.create_all(engine)


@contextmanager
def catalogue_test_harness(prefect_server_startup_timeout: int = 30, use_prefect: bool = True):
    """
    A test harness for the run catalogue on a temporary SQLite file.

    Args:
        prefect_server_startup_timeout: Timeout in seconds for Prefect server startup.
            Only used when use_prefect=True.
        use_prefect: If True, initializes Prefect test harness and sets up secrets.
            If False, skips Prefect setup and yields the SQLAlchemy engine instead.

    Yields:
        If use_prefect=True: None (Prefect is initialized and the database URL is set as a secret)
        If use_prefect=False: Engine (SQLAlchemy engine connected to the test catalogue)

    Example without Prefect:
        ```python
        with catalogue_test_harness(use_prefect=False) as engine:
            set_data(engine, "lemma_check", frame)
        ```
    """
    path = Path(tempfile.gettempdir()) / f"{TEST_DB_PREFIX}{uuid.uuid4().hex[:8]}.sqlite"
    database_url = f"sqlite:///{path}"
    LOGGER.info(f"Using test catalogue {path}")
    previous_url = os.environ.get(DATABASE_URL_ENV)
    os.environ[DATABASE_URL_ENV] = database_url

    engine = None
    try:
        engine = create_engine(database_url)

        # Validate that this is a safe test database
        _validate_test_database_connection(engine)

        # Create all models in the database
        LOGGER.info("Creating all tables in the test catalogue...")
        models.Base.metadata.create_all(engine)

        if use_prefect:
            # Lazy import Prefect only when needed
            from prefect.settings import PREFECT_API_URL
            from prefect.blocks.system import Secret
            from prefect.testing.utilities import prefect_test_harness

            # Initialize the Prefect test harness
            with prefect_test_harness(server_startup_timeout=prefect_server_startup_timeout):
                # Check the Prefect API is local
                prefect_api_url = urlparse(PREFECT_API_URL.value())
                if prefect_api_url.hostname not in ["localhost", "127.0.0.1"]:
                    raise ValueError(
                        "The PREFECT_API_URL environment variable has its hostname set to something other than localhost"
                    )

                # Point the catalogue secret at the test database
                Secret(value=database_url).save(DATABASE_SECRET_NAME, overwrite=True)  # type: ignore

                # Check the secret round-trips
                secret_value = Secret.load(DATABASE_SECRET_NAME).get()
                if secret_value != database_url:
                    raise ValueError(f"The {DATABASE_SECRET_NAME} secret is not the test database URL.")

                yield
        else:
            yield engine

    finally:
        if engine:
            try:
                LOGGER.info("Dropping all tables...")
                models.Base.metadata.drop_all(engine)
                engine.dispose()
            except Exception as e:
                LOGGER.warning(f"Error dropping tables: {e}")
        if previous_url is None:
            os.environ.pop(DATABASE_URL_ENV, None)
        else:
            os.environ[DATABASE_URL_ENV] = previous_url
        path.unlink(missing_ok=True)
