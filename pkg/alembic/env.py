import os
import sys

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from logging.config import fileConfig

from sqlalchemy import pool, engine_from_config

from alembic import context
from mc_kinetic_lab.config import load_settings
from mc_kinetic_lab.models import Base

config = context.config

if config.config_file_name is not None:
    fileConfig(config.config_file_name)

target_metadata = Base.metadata

# KINETIC_LAB_DATABASE_URL (or .env) wins; otherwise the SQLite catalogue under the output root.
settings = load_settings()
config.set_main_option("sqlalchemy.url", settings.database_url)

# SQLite cannot ALTER constraints in place.
render_as_batch = settings.database_url.startswith("sqlite")


def run_migrations_offline() -> None:
    """
    Emit the migration SQL for the configured URL without connecting.
    """
    context.configure(
        url=config.get_main_option("sqlalchemy.url"),
        target_metadata=target_metadata,
        literal_binds=True,
        dialect_opts={"paramstyle": "named"},
        render_as_batch=render_as_batch,
    )

    with context.begin_transaction():
        context.run_migrations()


def run_migrations_online() -> None:
    connectable = engine_from_config(
        config.get_section(config.config_ini_section, {}),
        prefix="sqlalchemy.",
        poolclass=pool.NullPool,
    )

    with connectable.connect() as connection:
        context.configure(
            connection=connection,
            target_metadata=target_metadata,
            render_as_batch=render_as_batch,
        )

        with context.begin_transaction():
            context.run_migrations()


if context.is_offline_mode():
    run_migrations_offline()
else:
    run_migrations_online()
