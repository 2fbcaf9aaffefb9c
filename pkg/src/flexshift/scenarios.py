"""Named test scenarios: a random-field solver benchmark and a Franke-field inversion.

Every scenario is described by a plain dictionary so that it round-trips
through JSON configuration files.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError
from .oht_model import AquiferModel, Grid, KernelSpec, franke_field, synth_gaussian_field

__all__ = [
    "TABLE1_DEFAULTS",
    "FRANKE_DEFAULTS",
    "frequency_grid",
    "sensor_box",
    "build_model",
    "table1_scenario",
    "franke_scenario",
    "inversion_frequencies",
]

TABLE1_DEFAULTS = dict(
    name="table1",
    n=101,
    L=500.0,
    log_storage=-11.52,
    mean_log_conductivity=-11.02,
    kernel=dict(variance=4.0, decay=2.0, length=500.0),
    seed=0,
    omega_min=2 * np.pi / 600,
    omega_max=2 * np.pi / 3,
    n_frequencies=200,
    source=[250.0, 250.0],
    source_amplitude=1.0,
    sensors=[[200.0, 250.0]],
    dirichlet_sides=["left", "right", "bottom", "top"],
)

FRANKE_DEFAULTS = dict(
    name="franke",
    n=101,
    L=500.0,
    log_storage=-11.52,
    log_conductivity_range=[-8.0, -5.0],
    omega_min=2 * np.pi / 150,
    omega_max=2 * np.pi / 30,
    n_frequencies=20,
    source=[250.0, 250.0],
    source_amplitude=5e-5,
    sensors=[[x, y] for y in (175.0, 250.0, 325.0) for x in (175.0, 250.0, 325.0)
             if (x, y) != (250.0, 250.0)],
    dirichlet_sides=["left", "right", "bottom", "top"],
    prior_kernel=dict(variance=1.0, decay=4.0, length=500.0),
    eta=1e-6,
)


def frequency_grid(omega_min: float, omega_max: float, n: int) -> np.ndarray:
    """``n`` evenly spaced frequencies; a single frequency is ``omega_min``."""
    if n < 1:
        raise ConfigError("need at least one frequency")
    if n == 1:
        return np.array([float(omega_min)])
    return np.linspace(omega_min, omega_max, n)


def inversion_frequencies(cfg: dict, n_f: int | None = None) -> np.ndarray:
    return frequency_grid(cfg["omega_min"], cfg["omega_max"], n_f or cfg["n_frequencies"])


def sensor_box(cfg: dict) -> tuple[float, float, float, float]:
    pts = np.asarray(cfg["sensors"], dtype=float)
    return float(pts[:, 0].min()), float(pts[:, 0].max()), float(pts[:, 1].min()), float(pts[:, 1].max())


def _merge(defaults: dict, overrides: dict | None) -> dict:
    cfg = dict(defaults)
    for k, v in (overrides or {}).items():
        if k not in defaults:
            raise ConfigError(f"unknown scenario key {k!r}")
        cfg[k] = v
    return cfg


def build_model(cfg: dict, log_conductivity: np.ndarray) -> AquiferModel:
    grid = Grid.square(int(cfg["n"]), float(cfg["L"]))
    src = grid.nearest_node(*cfg["source"])
    sensors = [grid.nearest_node(*p) for p in cfg["sensors"]]
    return AquiferModel(grid, log_conductivity, cfg["log_storage"],
                        [(src, cfg["source_amplitude"])], sensors, tuple(cfg["dirichlet_sides"]))


def table1_scenario(overrides: dict | None = None) -> tuple[AquiferModel, np.ndarray, dict]:
    """Random exponential-kernel field with the benchmark's physical parameters.

    Returns ``(model, frequencies, config)``.
    """
    cfg = _merge(TABLE1_DEFAULTS, overrides)
    grid = Grid.square(int(cfg["n"]), float(cfg["L"]))
    s = synth_gaussian_field(grid, KernelSpec(**cfg["kernel"]), int(cfg["seed"]),
                             cfg["mean_log_conductivity"])
    freqs = frequency_grid(cfg["omega_min"], cfg["omega_max"], int(cfg["n_frequencies"]))
    return build_model(cfg, s), freqs, cfg


def franke_scenario(overrides: dict | None = None) -> tuple[AquiferModel, np.ndarray, dict]:
    """Scaled Franke log-conductivity with a central source and a ring of 8 sensors.

    Returns ``(true_model, frequencies, config)``.
    """
    cfg = _merge(FRANKE_DEFAULTS, overrides)
    grid = Grid.square(int(cfg["n"]), float(cfg["L"]))
    lo, hi = cfg["log_conductivity_range"]
    s = franke_field(grid, lo, hi)
    return build_model(cfg, s), inversion_frequencies(cfg), cfg
