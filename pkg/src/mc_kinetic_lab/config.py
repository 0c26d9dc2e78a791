import os
import math
import hashlib
import logging
from pathlib import Path
from dataclasses import MISSING, field, fields, replace, dataclass
from typing import Union, Literal, Optional

from dotenv import load_dotenv

from mc_kinetic_lab.transport import SolverConfig
from mc_kinetic_lab.greens_fields import KernelSpec, field_spec_for
from mc_kinetic_lab.phase_grid import DEFAULT_MEMORY_BUDGET_MB, GridSpec, SpatialGrid
from mc_kinetic_lab.vfield_algebra import MultiIndex

LOGGER = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "KINETIC_LAB_OUTPUT_ROOT"
WORKERS_ENV = "KINETIC_LAB_WORKERS"
DATABASE_URL_ENV = "KINETIC_LAB_DATABASE_URL"
MEMORY_BUDGET_ENV = "KINETIC_LAB_MEMORY_BUDGET_MB"
DATABASE_SECRET_NAME = "kinetic-lab-database-url"


class ConfigError(ValueError):
    """
    Invalid experiment configuration; `line_number` is set for parse errors.
    """

    def __init__(self, message: str, line_number: Optional[int] = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{prefix}{message}")
        self.line_number = line_number


@dataclass(frozen=True)
class Settings:
    output_root: Path
    workers: int
    database_url: str
    memory_budget_mb: float


def load_settings() -> Settings:
    """
    Environment settings, after loading a .env file if one is present.
    """
    load_dotenv()
    output_root = Path(os.environ.get(OUTPUT_ROOT_ENV, "kinetic-lab-output"))
    try:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
        memory = float(os.environ.get(MEMORY_BUDGET_ENV, str(DEFAULT_MEMORY_BUDGET_MB)))
    except ValueError as error:
        raise ConfigError(f"Invalid environment setting: {error}")
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1, got {workers}")
    database_url = os.environ.get(DATABASE_URL_ENV) or f"sqlite:///{(output_root / 'catalogue.sqlite').resolve()}"
    return Settings(output_root, workers, database_url, memory)


def _key(name: str):
    return field(metadata={"key": name})


def _keyed(name: str, default):
    return field(default=default, metadata={"key": name})


@dataclass(frozen=True)
class ExperimentConfig:
    """
    One experiment, read from a flat `key = value` file with dotted keys.
    """

    system: Literal["vp", "vy"] = _key("system")
    n: int = _key("n")
    eps: float = _key("eps")
    t_end: float = _key("t_end")
    mu: int = _keyed("mu", 1)
    method: str = _keyed("method", "")
    seed: int = _keyed("seed", 0)
    profile_kind: str = _keyed("profile.kind", "gaussian")
    profile_width: float = _keyed("profile.width", 1.0)
    profile_center: tuple[float, ...] = _keyed("profile.center", ())
    profile_velocity_center: tuple[float, ...] = _keyed("profile.velocity_center", ())
    grid_nx: int = _keyed("grid.nx", 64)
    grid_nv: int = _keyed("grid.nv", 64)
    grid_x_extent: float = _keyed("grid.x_extent", 12.0)
    grid_v_extent: float = _keyed("grid.v_extent", 6.0)
    particle_count: int = _keyed("particles.count", 100000)
    particle_nx: int = _keyed("particles.nx", 64)
    particle_x_extent: float = _keyed("particles.x_extent", 40.0)
    dt_safety: float = _keyed("dt.safety", 0.5)
    dt_fixed: Optional[float] = _keyed("dt.fixed", None)
    force_enabled: bool = _keyed("force.enabled", True)
    observer_cadence: float = _keyed("observers.cadence", 1.0)
    observe_energy: int = _keyed("observers.energy", 0)
    observe_ks: bool = _keyed("observers.ks", False)
    observe_derivative: bool = _keyed("observers.derivative", False)
    observe_commuted: tuple[tuple[int, ...], ...] = _keyed("observers.commuted_fields", ())
    observe_budget: tuple[tuple[int, ...], ...] = _keyed("observers.budget", ())
    observe_modified: bool = _keyed("observers.modified", False)
    modified_energy_order: int = _keyed("observers.modified_energy", 1)
    snapshot_times: tuple[float, ...] = _keyed("snapshots.times", ())
    output: str = _keyed("output", "")
    workers: int = _keyed("workers", 1)

    def __post_init__(self):
        if self.system not in ("vp", "vy"):
            raise ConfigError(f"system must be vp or vy, got {self.system}")
        if self.system == "vp" and self.n < 3:
            raise ConfigError(f"The Poisson system needs n >= 3, got n={self.n}")
        if self.system == "vy" and self.n not in (2, 3):
            raise ConfigError(f"The Yukawa system runs in n = 2 or 3, got n={self.n}")
        if self.n not in (2, 3):
            raise ConfigError(f"Simulations run in n = 2 or 3, got n={self.n}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.mu not in (1, -1):
            raise ConfigError(f"mu must be +1 or -1, got {self.mu}")
        method = self.method or ("grid" if self.n == 2 else "particles")
        object.__setattr__(self, "method", method)
        if method == "grid" and self.n != 2:
            raise ConfigError(f"The grid solver runs in n = 2, got n={self.n}")
        if method == "particles" and self.n != 3:
            raise ConfigError(f"The particle solver runs in n = 3, got n={self.n}")
        if method not in ("grid", "particles"):
            raise ConfigError(f"method must be grid or particles, got {method}")
        if self.profile_kind not in ("gaussian", "bump"):
            raise ConfigError(f"profile.kind must be gaussian or bump, got {self.profile_kind}")
        for name in ("profile_center", "profile_velocity_center"):
            value = getattr(self, name)
            if value and len(value) != self.n:
                raise ConfigError(f"{name.replace('_', '.', 1)} needs {self.n} components, got {len(value)}")
        if self.t_end < 0:
            raise ConfigError(f"t_end must be non-negative, got {self.t_end}")
        if not 0 < self.dt_safety <= 0.9:
            raise ConfigError(f"dt.safety must lie in (0, 0.9], got {self.dt_safety}")
        if self.observe_energy < 0 or self.observe_energy > 2:
            raise ConfigError(f"observers.energy must be 0, 1 or 2, got {self.observe_energy}")
        if self.modified_energy_order < 0 or self.modified_energy_order > 2:
            raise ConfigError(f"observers.modified_energy must be 0, 1 or 2, got {self.modified_energy_order}")
        grid_only = self.observe_energy or self.observe_ks or self.observe_derivative or self.observe_modified
        if method == "particles" and (grid_only or self.observe_commuted or self.observe_budget):
            raise ConfigError("Energy, K-S, derivative, commuted-field and modified observers need the grid solver")
        try:
            for alpha in self.observe_commuted + self.observe_budget:
                MultiIndex(self.n, alpha)
        except ValueError as error:
            raise ConfigError(str(error))
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")

    @property
    def kernel(self) -> KernelSpec:
        return field_spec_for(self.system, self.n)

    def grid_spec(self, memory_budget_mb: float = DEFAULT_MEMORY_BUDGET_MB) -> GridSpec:
        return GridSpec(self.n, self.grid_x_extent, self.grid_v_extent, self.grid_nx, self.grid_nv, memory_budget_mb)

    def particle_grid(self) -> SpatialGrid:
        return SpatialGrid(self.n, self.particle_x_extent, self.particle_nx)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            mu=self.mu,
            kernel=self.kernel,
            t_end=self.t_end,
            cfl_safety=self.dt_safety,
            observer_cadence=self.observer_cadence,
            force_enabled=self.force_enabled,
            dt=self.dt_fixed,
            snapshot_times=self.snapshot_times,
            workers=self.workers,
        )

    def digest(self) -> str:
        # Output location and worker count do not change results.
        canonical = serialize_config(replace(self, output="", workers=1))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_eps(self, eps: float, output: str = "") -> "ExperimentConfig":
        return replace(self, eps=eps, output=output or self.output)


def _keys() -> dict[str, str]:
    return {f.metadata["key"]: f.name for f in fields(ExperimentConfig)}


def _required() -> set[str]:
    return {f.metadata["key"] for f in fields(ExperimentConfig) if f.default is MISSING}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(",") if part.strip())


def _parse_indices(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(
        tuple(int(entry) for entry in part.strip().split("."))
        for part in text.split(",")
        if part.strip()
    )


def _parse_int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"not an integer: {text}")
    return int(value)


PARSERS = {
    "system": str,
    "method": str,
    "profile_kind": str,
    "output": str,
    "n": _parse_int,
    "mu": _parse_int,
    "seed": _parse_int,
    "grid_nx": _parse_int,
    "grid_nv": _parse_int,
    "particle_count": _parse_int,
    "particle_nx": _parse_int,
    "observe_energy": _parse_int,
    "modified_energy_order": _parse_int,
    "workers": _parse_int,
    "force_enabled": _parse_bool,
    "observe_ks": _parse_bool,
    "observe_derivative": _parse_bool,
    "observe_modified": _parse_bool,
    "profile_center": _parse_floats,
    "profile_velocity_center": _parse_floats,
    "snapshot_times": _parse_floats,
    "observe_commuted": _parse_indices,
    "observe_budget": _parse_indices,
}


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse `key = value` lines; `#` starts a comment. Unknown or repeated keys and
    unparseable values are reported with their line number.
    """
    names = _keys()
    values = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{line}'", line_number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"unknown key '{key}'", line_number)
        name = names[key]
        if name in values:
            raise ConfigError(f"key '{key}' given twice", line_number)
        parser = PARSERS.get(name, float)
        try:
            parsed = parser(value)
        except ValueError as error:
            raise ConfigError(f"invalid value for '{key}': {error}", line_number)
        if isinstance(parsed, float) and not math.isfinite(parsed):
            raise ConfigError(f"'{key}' must be finite", line_number)
        values[name] = parsed
    missing = sorted(key for key in _required() if names[key] not in values)
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    return ExperimentConfig(**values)


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    LOGGER.info(f"Reading experiment config {path}")
    return parse_config(path.read_text())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(".".join(str(e) for e in alpha) for alpha in value)
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def serialize_config(config: ExperimentConfig) -> str:
    """
    Canonical text form: every key in declaration order, unset optionals omitted.
    """
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(config, f.name)
        if value is None or value == ():
            continue
        lines.append(f"{f.metadata['key']} = {_format(value)}")
    return "\n".join(lines) + "\n"
