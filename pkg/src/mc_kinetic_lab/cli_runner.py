import re
import sys
import json
import hashlib
import logging
import argparse
from pathlib import Path
from dataclasses import dataclass
from typing import Union, Optional, Sequence
from importlib.metadata import PackageNotFoundError, version

import numpy as np
import pandas as pd
from sqlalchemy import Engine, create_engine

import mc_kinetic_lab
from mc_kinetic_lab.models import Base
from mc_kinetic_lab.transport import RunRecord, RunAbortedError, run
from mc_kinetic_lab.greens_fields import bessel_table
from mc_kinetic_lab.vfield_algebra import MultiIndex
from mc_kinetic_lab.modified_fields import CoefficientTracker, bootstrap_check, modified_energy
from mc_kinetic_lab.config import (
    Settings,
    ConfigError,
    ExperimentConfig,
    load_config,
    load_settings,
    serialize_config,
)
from mc_kinetic_lab.phase_grid import (
    ResourceBudgetError,
    PhaseDensity,
    bump_profile,
    field_slice,
    density_slice,
    write_slice_csv,
    write_snapshot,
    sample_function,
    gaussian_profile,
    sample_particles,
)
from mc_kinetic_lab.diagnostics import (
    SUITES,
    LemmaCheckReport,
    run_suite,
    decay_fit,
    ks_observer,
    energy_observer,
    commuted_field_observer,
    commutator_budget_observer,
    derivative_density_observer,
)
from mc_kinetic_lab.operations import (
    lemma_frame,
    store_decay_fit,
    store_run_record,
    experiment_frame,
    store_lemma_report,
)

LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)8s] %(message)s (%(filename)s:%(lineno)s)"

EXIT_OK = 0
EXIT_CHECK_FAILED = 2
EXIT_INVALID_CONFIG = 3
EXIT_RESOURCE_BUDGET = 4


class UsageError(ValueError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """
    argparse exits with status 2 on usage errors; usage errors map to 3 here.
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _package_version(name: str) -> str:
    try:
        return version(name)
    except PackageNotFoundError:
        return "unknown"


def series_file_name(observable: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", observable).strip("_") + ".csv"


def get_engine(settings: Settings) -> Engine:
    """
    Engine on the configured catalogue; tables are created when missing.
    """
    if settings.database_url.startswith("sqlite:///"):
        Path(settings.database_url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(settings.database_url)
    Base.metadata.create_all(engine)
    return engine


@dataclass(frozen=True)
class ExperimentOutcome:
    config_hash: str
    status: str
    output_dir: str
    manifest_hash: Optional[str] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "status": self.status,
            "output_dir": self.output_dir,
            "manifest_hash": self.manifest_hash,
            "error": self.error,
        }


def build_initial(config: ExperimentConfig, memory_budget_mb: float):
    """
    The sampled initial data; resource budgets are checked before allocation.
    """
    center = list(config.profile_center) or None
    if config.method == "grid":
        spec = config.grid_spec(memory_budget_mb)
        if config.profile_kind == "gaussian":
            profile = gaussian_profile(config.eps, config.profile_width, center, list(config.profile_velocity_center) or None)
        else:
            profile = bump_profile(config.eps, 2.0 * config.profile_width, center)
        return sample_function(spec, profile)
    if config.profile_kind != "gaussian":
        raise ConfigError("Particle runs sample Gaussian data only")
    storage_mb = config.particle_count * (2 * config.n + 1) * 8 / 2**20
    if storage_mb > memory_budget_mb:
        raise ResourceBudgetError(f"{config.particle_count} particles need {storage_mb:.1f} MB, budget is {memory_budget_mb:.1f} MB")
    return sample_particles(config.particle_count, config.eps, config.seed, config.n, config.profile_width, center)


def build_observers(config: ExperimentConfig) -> tuple[list, list, Optional[CoefficientTracker]]:
    observers, companions, tracker = [], [], None
    kernel = config.kernel
    if config.observe_energy:
        observers.append(energy_observer(config.observe_energy))
    if config.observe_ks:
        observers.append(ks_observer())
    if config.observe_derivative:
        observers.append(derivative_density_observer())
    if config.observe_commuted:
        alphas = [MultiIndex(config.n, alpha) for alpha in config.observe_commuted]
        observers.append(commuted_field_observer(alphas, kernel, config.workers))
    for alpha in config.observe_budget:
        observers.append(commutator_budget_observer(MultiIndex(config.n, alpha), kernel, config.workers))
    if config.observe_modified:
        tracker = CoefficientTracker(config.eps, config.modified_energy_order, workers=config.workers)
        companions.append(tracker)
        observers.append(tracker.observables)
    return observers, companions, tracker


def write_record(
    record: RunRecord,
    config: ExperimentConfig,
    output_dir: Path,
    tracker: Optional[CoefficientTracker] = None,
) -> tuple[str, pd.DataFrame]:
    """
    series/*.csv, snapshots/*.bin, reports/*.csv and manifest.json; returns the
    manifest hash and the snapshot catalogue rows.
    """
    series_dir = output_dir / "series"
    snapshot_dir = output_dir / "snapshots"
    series_dir.mkdir(parents=True, exist_ok=True)
    snapshot_dir.mkdir(parents=True, exist_ok=True)
    frame = record.series()
    files: dict[str, str] = {}
    series_names: dict[str, str] = {}
    for column in frame.columns:
        if column == "time":
            continue
        path = series_dir / series_file_name(column)
        frame[["time", column]].rename(columns={column: "value"}).dropna().to_csv(path, index=False, float_format="%.17g")
        series_names[column] = str(path.relative_to(output_dir))

    snapshot_rows = []
    x_extent = config.particle_x_extent if config.method == "particles" else 0.0
    for snapshot in record.state_snapshots:
        kind = "density" if isinstance(snapshot.state, PhaseDensity) else "particles"
        for label, item in ((kind, snapshot.state), ("field", snapshot.field.phi)):
            path = write_snapshot(snapshot_dir / f"{label}_t{snapshot.time:.6g}.bin", item, x_extent)
            snapshot_rows.append({"kind": label, "time": snapshot.time, "path": str(path.relative_to(output_dir))})
        if isinstance(snapshot.state, PhaseDensity):
            slice_dir = output_dir / "slices"
            slice_dir.mkdir(exist_ok=True)
            write_slice_csv(density_slice(snapshot.state), slice_dir / f"density_x1_v1_t{snapshot.time:.6g}.csv")
            write_slice_csv(field_slice(snapshot.field.phi), slice_dir / f"phi_x1_x2_t{snapshot.time:.6g}.csv")
    if tracker is not None:
        for coefficients in tracker.snapshots:
            for (i, k), values in coefficients.values.items():
                item = PhaseDensity(coefficients.spec, values, coefficients.time_tag)
                path = write_snapshot(snapshot_dir / f"coefficients_{i}_{k}_t{coefficients.time_tag:.6g}.bin", item)
                snapshot_rows.append({"kind": f"coefficients_{i}_{k}", "time": coefficients.time_tag, "path": str(path.relative_to(output_dir))})
        if len(record.rows) > 1:
            reports_dir = output_dir / "reports"
            reports_dir.mkdir(exist_ok=True)
            fields = [MultiIndex(config.n, alpha) for alpha in config.observe_commuted]
            report = bootstrap_check(record, config.eps, fields=fields)
            report.ratios.to_csv(reports_dir / "bootstrap.csv", index=False, float_format="%.17g")
            modified_energy(record, tracker, tracker.energy_order).to_csv(
                reports_dir / "modified_energy.csv", index=False, float_format="%.17g"
            )

    for path in sorted(output_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[str(path.relative_to(output_dir))] = file_sha256(path)
    manifest = {
        "config": serialize_config(config),
        "config_hash": record.config_hash,
        "status": "aborted" if record.aborted else "completed",
        "error": record.error,
        "versions": {
            "mc-kinetic-lab": mc_kinetic_lab.__version__,
            "numpy": np.__version__,
            "scipy": _package_version("scipy"),
            "sympy": _package_version("sympy"),
        },
        "series": series_names,
        "files": files,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (output_dir / "manifest.json").write_text(text)
    snapshots = pd.DataFrame(snapshot_rows, columns=["kind", "time", "path"])
    if not snapshots.empty:
        snapshots.insert(0, "config_hash", record.config_hash)
        snapshots["sha256"] = [files[p] for p in snapshots["path"]]
    return hashlib.sha256(text.encode()).hexdigest(), snapshots


def execute_experiment(
    config: ExperimentConfig,
    output_dir: Union[str, Path],
    settings: Settings,
    engine: Optional[Engine] = None,
) -> ExperimentOutcome:
    """
    Run one configured experiment into output_dir. Aborted runs still write their
    partial record and return status "aborted".
    """
    output_dir = Path(output_dir)
    config_hash = config.digest()
    initial = build_initial(config, settings.memory_budget_mb)
    observers, companions, tracker = build_observers(config)
    grid = config.particle_grid() if config.method == "particles" else None
    try:
        record = run(config.solver_config(), initial, observers, companions, grid=grid, config_hash=config_hash)
    except RunAbortedError as error:
        record = error.record
    output_dir.mkdir(parents=True, exist_ok=True)
    manifest_hash, snapshots = write_record(record, config, output_dir, tracker)
    status = "aborted" if record.aborted else "completed"
    if engine is not None:
        experiment = experiment_frame(
            record, config.system, config.n, config.mu, config.eps, config.t_end,
            config.method, str(output_dir), manifest_hash,
        )
        store_run_record(engine, experiment, record, snapshots if not snapshots.empty else None)
    LOGGER.info(f"Experiment {config_hash[:12]} {status}; outputs in {output_dir}")
    return ExperimentOutcome(config_hash, status, str(output_dir), manifest_hash, record.error)


def cmd_run(args, settings: Settings) -> int:
    config = load_config(args.config)
    output_dir = Path(args.output or config.output or settings.output_root / config.digest()[:12])
    engine = None if args.no_catalogue else get_engine(settings)
    outcome = execute_experiment(config, output_dir, settings, engine)
    print(json.dumps(outcome.to_dict(), indent=2))
    return EXIT_OK if outcome.status == "completed" else EXIT_CHECK_FAILED


def write_lemma_reports(reports: list[LemmaCheckReport], output_dir: Path) -> dict:
    output_dir.mkdir(parents=True, exist_ok=True)
    for report in reports:
        report.table.to_csv(output_dir / f"{report.suite}_{report.lemma}.csv", index=False)
    summary = {
        "passed": all(report.passed for report in reports),
        "checks": [report.to_dict() for report in reports],
    }
    (output_dir / "report.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_verify_lemmas(args, settings: Settings) -> int:
    if args.suite not in list(SUITES) + ["all"]:
        raise UsageError(f"unknown suite {args.suite}; choose from {', '.join(list(SUITES) + ['all'])}")
    reports = run_suite(args.suite)
    output_dir = Path(args.output or settings.output_root / "lemmas" / args.suite)
    summary = write_lemma_reports(reports, output_dir)
    if not args.no_catalogue:
        store_lemma_report(get_engine(settings), reports)
    print(json.dumps(summary, indent=2))
    for _, row in lemma_frame(reports).iterrows():
        LOGGER.info(f"{row['suite']}/{row['lemma']}: worst ratio {row['worst_ratio']:.4g} ({'pass' if row['passed'] else 'FAIL'})")
    return EXIT_OK if summary["passed"] else EXIT_CHECK_FAILED


def parse_window(text: Optional[str]) -> Optional[tuple[float, float]]:
    if not text:
        return None
    try:
        start, end = (float(part) for part in text.split(":"))
    except ValueError:
        raise UsageError(f"window must look like t0:t1, got {text}")
    return start, end


def read_record_series(record_dir: Path, observable: str) -> tuple[dict, pd.Series]:
    manifest_path = record_dir / "manifest.json"
    if not manifest_path.is_file():
        raise UsageError(f"{record_dir} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if observable not in manifest["series"]:
        raise UsageError(f"observable {observable} not in record; available: {', '.join(sorted(manifest['series']))}")
    frame = pd.read_csv(record_dir / manifest["series"][observable])
    return manifest, pd.Series(frame["value"].to_numpy(), index=pd.Index(frame["time"].to_numpy(), name="time"))


def cmd_fit_decay(args, settings: Settings) -> int:
    record_dir = Path(args.record)
    manifest, series = read_record_series(record_dir, args.observable)
    try:
        fit = decay_fit(series, parse_window(args.window))
    except ValueError as error:
        LOGGER.error(f"Decay fit failed: {error}")
        return EXIT_CHECK_FAILED
    payload = {"observable": args.observable, "config_hash": manifest["config_hash"], **fit.to_dict()}
    (record_dir / "fits").mkdir(exist_ok=True)
    (record_dir / "fits" / f"{series_file_name(args.observable)[:-4]}.json").write_text(json.dumps(payload, indent=2))
    if not args.no_catalogue:
        store_decay_fit(get_engine(settings), manifest["config_hash"], args.observable, fit)
    print(json.dumps(payload, indent=2))
    return EXIT_OK


def parse_floats(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text}")


def cmd_decay_sweep(args, settings: Settings) -> int:
    eps_values = parse_floats(args.eps)
    if len(eps_values) < 2:
        raise ConfigError(f"A sweep needs at least two eps values, got {len(eps_values)}")
    template = load_config(args.config)
    output_root = Path(args.output or settings.output_root / "sweeps" / template.digest()[:12])
    workers = args.workers or settings.workers
    from mc_kinetic_lab.prefect.flows import decay_sweep_flow

    summary = decay_sweep_flow(
        template, eps_values, str(output_root), workers,
        observable=args.observable, window=parse_window(args.window),
        database_url=None if args.no_catalogue else settings.database_url,
    )
    output_root.mkdir(parents=True, exist_ok=True)
    summary.table.to_csv(output_root / "summary.csv", index=False, float_format="%.17g")
    (output_root / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2))
    print(json.dumps(summary.to_dict(), indent=2))
    return EXIT_OK if summary.all_completed else EXIT_CHECK_FAILED


def cmd_bessel_table(args, settings: Settings) -> int:
    orders = parse_floats(args.orders)
    radii = np.logspace(np.log10(args.r_min), np.log10(args.r_max), args.count)
    table = bessel_table(orders, radii)
    output = Path(args.output or settings.output_root / "bessel_table.csv")
    output.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(output, index=False, float_format="%.17g")
    LOGGER.info(f"Wrote {len(table)} rows to {output}")
    return EXIT_OK


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="kinetic-lab", description="Vlasov-Poisson / Vlasov-Yukawa laboratory")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    run_parser = commands.add_parser("run", help="run one configured experiment")
    run_parser.add_argument("--config", required=True)
    run_parser.add_argument("--output")
    run_parser.add_argument("--no-catalogue", action="store_true")
    run_parser.set_defaults(handler=cmd_run)

    lemma_parser = commands.add_parser("verify-lemmas", help="run a lemma check suite")
    lemma_parser.add_argument("--suite", required=True, help=f"one of {', '.join(list(SUITES) + ['all'])}")
    lemma_parser.add_argument("--output")
    lemma_parser.add_argument("--no-catalogue", action="store_true")
    lemma_parser.set_defaults(handler=cmd_verify_lemmas)

    fit_parser = commands.add_parser("fit-decay", help="fit a power law to a recorded series")
    fit_parser.add_argument("--record", required=True)
    fit_parser.add_argument("--observable", required=True)
    fit_parser.add_argument("--window")
    fit_parser.add_argument("--no-catalogue", action="store_true")
    fit_parser.set_defaults(handler=cmd_fit_decay)

    sweep_parser = commands.add_parser("decay-sweep", help="repeat a config over several eps values")
    sweep_parser.add_argument("--config", required=True)
    sweep_parser.add_argument("--eps", required=True, help="comma-separated eps values")
    sweep_parser.add_argument("--observable", default="sup_rho")
    sweep_parser.add_argument("--window")
    sweep_parser.add_argument("--workers", type=int)
    sweep_parser.add_argument("--output")
    sweep_parser.add_argument("--no-catalogue", action="store_true")
    sweep_parser.set_defaults(handler=cmd_decay_sweep)

    bessel_parser = commands.add_parser("bessel-table", help="tabulate K_nu and its envelope")
    bessel_parser.add_argument("--orders", default="0.5,1,1.5,2")
    bessel_parser.add_argument("--r-min", type=float, default=1e-3)
    bessel_parser.add_argument("--r-max", type=float, default=100.0)
    bessel_parser.add_argument("--count", type=int, default=51)
    bessel_parser.add_argument("--output")
    bessel_parser.set_defaults(handler=cmd_bessel_table)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as error:
        print(f"kinetic-lab: {error}", file=sys.stderr)
        return EXIT_INVALID_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        settings = load_settings()
        return args.handler(args, settings)
    except (ConfigError, UsageError) as error:
        LOGGER.error(f"Invalid configuration: {error}")
        return EXIT_INVALID_CONFIG
    except ResourceBudgetError as error:
        LOGGER.error(f"Resource budget exceeded: {error}")
        return EXIT_RESOURCE_BUDGET
    except RunAbortedError as error:
        LOGGER.error(f"Run aborted: {error}")
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
