"""Creating run catalogue tables.

Revision ID: 3f1c9a7d2b40
Revises:
Create Date: 2026-10-18 10:12:40.114512

"""

from typing import Union, Sequence

import sqlalchemy as sa

from alembic import op

# revision identifiers, used by Alembic.
revision: str = "3f1c9a7d2b40"
down_revision: Union[str, Sequence[str], None] = None
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    """Upgrade schema."""
    op.create_table(
        "experiment",
        sa.Column("config_hash", sa.String(length=64), nullable=False, comment="The SHA-256 of the serialized configuration"),
        sa.Column("system", sa.String(length=8), nullable=False, comment="The coupled system, vp or vy"),
        sa.Column("dimension", sa.Integer(), nullable=False, comment="The spatial dimension n"),
        sa.Column("mu", sa.Integer(), nullable=False, comment="The force sign, +1 or -1"),
        sa.Column("eps", sa.Float(), nullable=False, comment="The amplitude of the initial data"),
        sa.Column("t_end", sa.Float(), nullable=False, comment="The final time of the run"),
        sa.Column("method", sa.String(length=16), nullable=False, comment="The solver, grid or particles"),
        sa.Column("output_dir", sa.String(length=1000), nullable=True, comment="The directory holding the run outputs"),
        sa.Column("manifest_hash", sa.String(length=64), nullable=True, comment="The SHA-256 of the written manifest"),
        sa.Column("status", sa.String(length=16), nullable=False, comment="completed, aborted or failed"),
        sa.Column(
            "created_at",
            sa.DateTime(),
            server_default=sa.text("(CURRENT_TIMESTAMP)"),
            nullable=False,
            comment="The timestamp of the creation of the experiment",
        ),
        sa.Column(
            "updated_at",
            sa.DateTime(),
            server_default=sa.text("(CURRENT_TIMESTAMP)"),
            nullable=False,
            comment="The timestamp of the last update of the experiment",
        ),
        sa.PrimaryKeyConstraint("config_hash", name=op.f("experiment_pkey")),
        comment="One configured run, identified by the hash of its canonical config",
    )
    op.create_table(
        "lemma_check",
        sa.Column("suite", sa.String(length=32), nullable=False, comment="The suite name"),
        sa.Column("lemma", sa.String(length=100), nullable=False, comment="The check name"),
        sa.Column("worst_ratio", sa.Float(), nullable=False, comment="The worst measured / allowed ratio"),
        sa.Column("threshold", sa.Float(), nullable=False, comment="The pass threshold of the ratio"),
        sa.Column("passed", sa.Boolean(), nullable=False, comment="Whether the check passed"),
        sa.Column(
            "created_at",
            sa.DateTime(),
            server_default=sa.text("(CURRENT_TIMESTAMP)"),
            nullable=False,
            comment="The timestamp of the first recorded outcome",
        ),
        sa.Column(
            "updated_at",
            sa.DateTime(),
            server_default=sa.text("(CURRENT_TIMESTAMP)"),
            nullable=False,
            comment="The timestamp of the last recorded outcome",
        ),
        sa.PrimaryKeyConstraint("suite", "lemma", name=op.f("lemma_check_pkey")),
        comment="The latest outcome of one lemma check",
    )
    op.create_table(
        "observable_point",
        sa.Column("config_hash", sa.String(length=64), nullable=False, comment="The experiment the sample belongs to"),
        sa.Column("observable", sa.String(length=100), nullable=False, comment="The name of the observable"),
        sa.Column("time", sa.Float(), nullable=False, comment="The simulation time"),
        sa.Column("value", sa.Float(), nullable=False, comment="The observed value"),
        sa.ForeignKeyConstraint(["config_hash"], ["experiment.config_hash"]),
        sa.PrimaryKeyConstraint("config_hash", "observable", "time", name=op.f("observable_point_pkey")),
        comment="One sample of an observable time series",
    )
    op.create_table(
        "snapshot_file",
        sa.Column("config_hash", sa.String(length=64), nullable=False, comment="The experiment the snapshot belongs to"),
        sa.Column("kind", sa.String(length=32), nullable=False, comment="density, field, particles or coefficients"),
        sa.Column("time", sa.Float(), nullable=False, comment="The simulation time"),
        sa.Column("path", sa.String(length=1000), nullable=False, comment="The path relative to the run directory"),
        sa.Column("sha256", sa.String(length=64), nullable=False, comment="The SHA-256 of the file"),
        sa.ForeignKeyConstraint(["config_hash"], ["experiment.config_hash"]),
        sa.PrimaryKeyConstraint("config_hash", "kind", "time", name=op.f("snapshot_file_pkey")),
        comment="A binary snapshot written by a run",
    )
    op.create_table(
        "decay_fit",
        sa.Column("config_hash", sa.String(length=64), nullable=False, comment="The experiment the fit was taken from"),
        sa.Column("observable", sa.String(length=100), nullable=False, comment="The fitted observable"),
        sa.Column("t_start", sa.Float(), nullable=False, comment="The start of the fit window"),
        sa.Column("t_end", sa.Float(), nullable=False, comment="The end of the fit window"),
        sa.Column("exponent", sa.Float(), nullable=False, comment="The fitted exponent"),
        sa.Column("intercept", sa.Float(), nullable=False, comment="The fitted log intercept"),
        sa.Column("residual_rms", sa.Float(), nullable=False, comment="The RMS residual in log-log"),
        sa.Column("point_count", sa.Integer(), nullable=False, comment="The number of samples in the window"),
        sa.Column("stderr", sa.Float(), nullable=True, comment="The standard error of the exponent"),
        sa.ForeignKeyConstraint(["config_hash"], ["experiment.config_hash"]),
        sa.PrimaryKeyConstraint("config_hash", "observable", "t_start", "t_end", name=op.f("decay_fit_pkey")),
        comment="A power-law fit of an observable against 1 + t",
    )


def downgrade() -> None:
    """Downgrade schema."""
    op.drop_table("decay_fit")
    op.drop_table("snapshot_file")
    op.drop_table("observable_point")
    op.drop_table("lemma_check")
    op.drop_table("experiment")
