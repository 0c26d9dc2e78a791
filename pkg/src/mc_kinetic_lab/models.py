import datetime
from typing import Optional

from sqlalchemy import String, MetaData, ForeignKey, func
from sqlalchemy.orm import Mapped, DeclarativeBase, relationship, mapped_column


class Base(DeclarativeBase):
    """
    Base class for the run catalogue models.
    """

    # Primary key constraints are named <table>_pkey; the upsert relies on it.
    metadata = MetaData(
        naming_convention={
            "pk": "%(table_name)s_pkey",
        }
    )


class Experiment(Base):
    __tablename__ = "experiment"
    __table_args__ = {"comment": "One configured run, identified by the hash of its canonical config"}

    config_hash: Mapped[str] = mapped_column(
        String(64), primary_key=True, comment="The SHA-256 of the serialized configuration"
    )
    system: Mapped[str] = mapped_column(
        String(8), nullable=False, comment="The coupled system, vp or vy"
    )
    dimension: Mapped[int] = mapped_column(nullable=False, comment="The spatial dimension n")
    mu: Mapped[int] = mapped_column(nullable=False, comment="The force sign, +1 or -1")
    eps: Mapped[float] = mapped_column(nullable=False, comment="The amplitude of the initial data")
    t_end: Mapped[float] = mapped_column(nullable=False, comment="The final time of the run")
    method: Mapped[str] = mapped_column(
        String(16), nullable=False, comment="The solver, grid or particles"
    )
    output_dir: Mapped[Optional[str]] = mapped_column(
        String(1000), nullable=True, comment="The directory holding the run outputs"
    )
    manifest_hash: Mapped[Optional[str]] = mapped_column(
        String(64), nullable=True, comment="The SHA-256 of the written manifest"
    )
    status: Mapped[str] = mapped_column(
        String(16), nullable=False, default="completed", comment="completed, aborted or failed"
    )
    created_at: Mapped[datetime.datetime] = mapped_column(
        nullable=False,
        server_default=func.now(),
        comment="The timestamp of the creation of the experiment",
    )
    updated_at: Mapped[Optional[datetime.datetime]] = mapped_column(
        nullable=False,
        server_onupdate=func.now(),
        server_default=func.now(),
        comment="The timestamp of the last update of the experiment",
    )

    def __repr__(self):
        return f"{Experiment.__name__}({self.config_hash[:12]}, {self.system}, n={self.dimension}, eps={self.eps})"


class ObservablePoint(Base):
    __tablename__ = "observable_point"
    __table_args__ = {"comment": "One sample of an observable time series"}

    config_hash: Mapped[str] = mapped_column(
        ForeignKey("experiment.config_hash"),
        primary_key=True,
        comment="The experiment the sample belongs to",
    )
    experiment: Mapped["Experiment"] = relationship("Experiment")
    observable: Mapped[str] = mapped_column(
        String(100), primary_key=True, comment="The name of the observable"
    )
    time: Mapped[float] = mapped_column(primary_key=True, comment="The simulation time")
    value: Mapped[float] = mapped_column(nullable=False, comment="The observed value")

    def __repr__(self):
        return f"{ObservablePoint.__name__}({self.observable}, t={self.time}, {self.value})"


class SnapshotFile(Base):
    __tablename__ = "snapshot_file"
    __table_args__ = {"comment": "A binary snapshot written by a run"}

    config_hash: Mapped[str] = mapped_column(
        ForeignKey("experiment.config_hash"),
        primary_key=True,
        comment="The experiment the snapshot belongs to",
    )
    kind: Mapped[str] = mapped_column(
        String(32), primary_key=True, comment="density, field, particles or coefficients"
    )
    time: Mapped[float] = mapped_column(primary_key=True, comment="The simulation time")
    path: Mapped[str] = mapped_column(
        String(1000), nullable=False, comment="The path relative to the run directory"
    )
    sha256: Mapped[str] = mapped_column(String(64), nullable=False, comment="The SHA-256 of the file")

    def __repr__(self):
        return f"{SnapshotFile.__name__}({self.kind}, t={self.time}, {self.path})"


class DecayFitRow(Base):
    __tablename__ = "decay_fit"
    __table_args__ = {"comment": "A power-law fit of an observable against 1 + t"}

    config_hash: Mapped[str] = mapped_column(
        ForeignKey("experiment.config_hash"),
        primary_key=True,
        comment="The experiment the fit was taken from",
    )
    observable: Mapped[str] = mapped_column(
        String(100), primary_key=True, comment="The fitted observable"
    )
    t_start: Mapped[float] = mapped_column(primary_key=True, comment="The start of the fit window")
    t_end: Mapped[float] = mapped_column(primary_key=True, comment="The end of the fit window")
    exponent: Mapped[float] = mapped_column(nullable=False, comment="The fitted exponent")
    intercept: Mapped[float] = mapped_column(nullable=False, comment="The fitted log intercept")
    residual_rms: Mapped[float] = mapped_column(nullable=False, comment="The RMS residual in log-log")
    point_count: Mapped[int] = mapped_column(nullable=False, comment="The number of samples in the window")
    stderr: Mapped[Optional[float]] = mapped_column(nullable=True, comment="The standard error of the exponent")

    def __repr__(self):
        return f"{DecayFitRow.__name__}({self.observable}, [{self.t_start}, {self.t_end}], p={self.exponent})"


class LemmaCheck(Base):
    __tablename__ = "lemma_check"
    __table_args__ = {"comment": "The latest outcome of one lemma check"}

    suite: Mapped[str] = mapped_column(String(32), primary_key=True, comment="The suite name")
    lemma: Mapped[str] = mapped_column(String(100), primary_key=True, comment="The check name")
    worst_ratio: Mapped[float] = mapped_column(nullable=False, comment="The worst measured / allowed ratio")
    threshold: Mapped[float] = mapped_column(nullable=False, comment="The pass threshold of the ratio")
    passed: Mapped[bool] = mapped_column(nullable=False, comment="Whether the check passed")
    created_at: Mapped[datetime.datetime] = mapped_column(
        nullable=False,
        server_default=func.now(),
        comment="The timestamp of the first recorded outcome",
    )
    updated_at: Mapped[Optional[datetime.datetime]] = mapped_column(
        nullable=False,
        server_onupdate=func.now(),
        server_default=func.now(),
        comment="The timestamp of the last recorded outcome",
    )

    def __repr__(self):
        return f"{LemmaCheck.__name__}({self.suite}, {self.lemma}, passed={self.passed})"
