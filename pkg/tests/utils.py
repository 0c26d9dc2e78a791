import os
import sys
from pathlib import Path

sys.path.append(os.path.join(os.path.dirname(__file__), os.pardir, "src"))

from mc_kinetic_lab.phase_grid import GridSpec, PhaseDensity, sample_function, gaussian_profile

# Gaussian data fits these grids with its mass far from the faces for |alpha| <= 2.
SMALL_GRID = dict(n=2, x_extent=8.0, v_extent=8.0, nx=32, nv=32)
TINY_GRID = dict(n=2, x_extent=8.0, v_extent=8.0, nx=16, nv=16)


def small_grid(**overrides) -> GridSpec:
    return GridSpec(**{**SMALL_GRID, **overrides})


def gaussian_density(spec: GridSpec, eps: float = 1e-3, width: float = 1.0, center=None) -> PhaseDensity:
    return sample_function(spec, gaussian_profile(eps, width, center))


def config_text(**overrides) -> str:
    """
    A small Vlasov-Yukawa n = 2 grid config; keys use their dotted names with
    dots written as double underscores, e.g. grid__nx=16.
    """
    values = {
        "system": "vy",
        "n": "2",
        "eps": "0.001",
        "t_end": "1",
        "grid.nx": "16",
        "grid.nv": "16",
        "grid.x_extent": "10",
        "grid.v_extent": "8",
        "observers.cadence": "0.5",
    }
    for key, value in overrides.items():
        key = key.replace("__", ".")
        if value is None:
            values.pop(key, None)
        else:
            values[key] = str(value)
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def write_config(directory: Path, name: str = "experiment.cfg", **overrides) -> Path:
    path = Path(directory) / name
    path.write_text(config_text(**overrides))
    return path
