"""Configuration files, rock-field ingestion, simulation outputs, and the CLI.

Config files are INI key-value text (see configs/ for shipped examples). Rock
fields are plain-text grids in md and fraction units; the unit constant that
turns md * psi / (cp * ft) into ft/day lives in the discretization. Outputs:
production.csv, legacy-ASCII VTK meshes in (x, y, t * t_scale) coordinates,
report.json, and optional indicator CDF tables.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .adapt import (
    ANALYSIS_RANGE,
    RunResult,
    RunSetup,
    SolveAbort,
    run_uniform,
    sequential_solve,
)
from .discretization import Well
from .mesh import SpaceTimeBox
from .petrophysics import (
    CapPressureParams,
    FluidPhaseParams,
    FluidRockModel,
    RelPermParams,
    RockField,
)
from .solver import NewtonConfig


class ConfigError(ValueError):
    """Bad configuration file: the message names the offending key."""


class FieldFileError(ValueError):
    """Bad rock-field file: the message names the offending cell or line."""


@dataclass
class SimulationConfig:
    # domain
    dimension: int = 2
    x_extent: float = 0.0
    y_extent: float = 1.0
    thickness: float = 1.0
    t_end: float = 0.0
    # mesh
    nx: int = 1
    ny: int = 1
    nt: int = 1
    ratios: tuple[int, ...] = ()
    slab_days: float | None = None
    # fluids
    oil_density: float = 53.0
    water_density: float = 64.0
    oil_compressibility: float = 1.0e-4
    water_compressibility: float = 3.0e-6
    oil_viscosity: float = 3.0
    water_viscosity: float = 0.3
    reference_pressure: float = 1000.0
    # relperm / capillary
    s_wirr: float = 0.2
    s_or: float = 0.2
    krw0: float = 1.0
    kro0: float = 1.0
    n_w: float = 2.0
    n_o: float = 2.0
    entry_pressure: float = 10.0
    cap_exponent: float = 0.2
    cap_delta_reg: float = 1.0e-6
    # gravity
    gx: float = 0.0
    gy: float = 0.0
    # initial state
    initial_pressure: float = 1000.0
    initial_saturation: float = 0.2
    # newton
    tol_rel: float = 1.0e-6
    tol_abs: float | None = None
    max_iter: int = 20
    max_sat_step: float = 0.2
    # adapt
    marking: str = "union"
    emit_cdf: bool = False
    # rock
    field_file: str | None = None
    permeability: float = 100.0
    porosity: float = 0.2
    # output
    output_dir: str = "out"
    t_scale: float | None = None
    # wells
    wells: tuple[Well, ...] = field(default_factory=tuple)

    @property
    def max_level(self) -> int:
        return len(self.ratios)

    def fine_dims(self) -> tuple[int, int]:
        factor = 1
        for r in self.ratios:
            factor *= r
        nxf = self.nx * factor
        nyf = self.ny * factor if self.dimension == 2 else self.ny
        return nxf, nyf

    def resolved_t_scale(self) -> float:
        if self.t_scale is not None:
            return self.t_scale
        return max(self.x_extent, self.y_extent) / self.t_end


_SCHEMA: dict[str, dict[str, str]] = {
    "domain": {
        "dimension": "dimension",
        "x_extent": "x_extent",
        "y_extent": "y_extent",
        "thickness": "thickness",
        "t_end": "t_end",
    },
    "mesh": {"nx": "nx", "ny": "ny", "nt": "nt", "ratios": "ratios", "slab_days": "slab_days"},
    "fluids": {
        "oil_density": "oil_density",
        "water_density": "water_density",
        "oil_compressibility": "oil_compressibility",
        "water_compressibility": "water_compressibility",
        "oil_viscosity": "oil_viscosity",
        "water_viscosity": "water_viscosity",
        "reference_pressure": "reference_pressure",
    },
    "relperm": {
        "s_wirr": "s_wirr",
        "s_or": "s_or",
        "krw0": "krw0",
        "kro0": "kro0",
        "n_w": "n_w",
        "n_o": "n_o",
    },
    "capillary": {
        "entry_pressure": "entry_pressure",
        "exponent": "cap_exponent",
        "delta_reg": "cap_delta_reg",
    },
    "gravity": {"gx": "gx", "gy": "gy"},
    "initial": {"pressure": "initial_pressure", "water_saturation": "initial_saturation"},
    "newton": {
        "tol_rel": "tol_rel",
        "tol_abs": "tol_abs",
        "max_iter": "max_iter",
        "max_sat_step": "max_sat_step",
    },
    "adapt": {"marking": "marking", "emit_cdf": "emit_cdf"},
    "rock": {"field_file": "field_file", "permeability": "permeability", "porosity": "porosity"},
    "output": {"directory": "output_dir", "t_scale": "t_scale"},
}

_INT_KEYS = {"dimension", "nx", "ny", "nt", "max_iter"}
_STR_KEYS = {"marking", "field_file", "output_dir"}
_BOOL_KEYS = {"emit_cdf"}
_OPTIONAL_FLOATS = {"slab_days", "tol_abs", "t_scale"}
_REQUIRED = [("domain", "x_extent"), ("domain", "t_end"), ("mesh", "nx"), ("mesh", "nt")]


def _parse_value(section: str, key: str, raw: str, attr: str):
    raw = raw.strip()
    where = f"{section}.{key}"
    if attr == "ratios":
        if not raw:
            return ()
        try:
            ratios = tuple(int(tok) for tok in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"{where}: expected integers, got {raw!r}") from None
        if any(r < 2 for r in ratios):
            raise ConfigError(f"{where}: refinement ratios must be >= 2, got {ratios}")
        return ratios
    if attr in _BOOL_KEYS:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if attr in _STR_KEYS:
        return raw or None if attr == "field_file" else raw
    if attr in _OPTIONAL_FLOATS:
        if not raw:
            return None
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    if attr in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {raw!r}") from None


def _parse_well(section: str, parser: configparser.ConfigParser) -> Well:
    name = section.split(":", 1)[1].strip() or section
    items = dict(parser.items(section))

    def need(key: str) -> str:
        if key not in items or not items[key].strip():
            raise ConfigError(f"missing key {section}.{key}")
        return items[key].strip()

    def fnum(key: str, default: float | None = None) -> float:
        raw = items.get(key, "").strip()
        if not raw:
            if default is None:
                raise ConfigError(f"missing key {section}.{key}")
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected a number, got {raw!r}") from None

    kind = need("kind")
    if kind not in ("rate_injector", "bhp_producer"):
        raise ConfigError(f"{section}.kind: unknown well kind {kind!r}")
    control_key = "rate" if kind == "rate_injector" else "bhp"
    return Well(
        name=name,
        kind=kind,
        x=fnum("x"),
        y=fnum("y"),
        control=fnum(control_key),
        radius=fnum("radius", 0.25),
        skin=fnum("skin", 0.0),
    )


def load_config(path: str) -> SimulationConfig:
    """Parse and fully validate a configuration file; defaults are applied here."""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    cfg = SimulationConfig()
    for section, keys in _SCHEMA.items():
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(cfg, keys[key], _parse_value(section, key, raw, keys[key]))
    for section, key in _REQUIRED:
        if not parser.has_section(section) or not parser.has_option(section, key):
            raise ConfigError(f"missing key {section}.{key}")

    wells = []
    for section in parser.sections():
        if section.startswith("well:"):
            wells.append(_parse_well(section, parser))
    cfg.wells = tuple(wells)

    _validate(cfg, os.path.dirname(os.path.abspath(path)))
    return cfg


def _validate(cfg: SimulationConfig, base_dir: str) -> None:
    if cfg.dimension not in (1, 2):
        raise ConfigError("domain.dimension: must be 1 or 2")
    if cfg.x_extent <= 0.0 or cfg.t_end <= 0.0 or cfg.y_extent <= 0.0 or cfg.thickness <= 0.0:
        raise ConfigError("domain.x_extent/y_extent/thickness/t_end: extents must be positive")
    if cfg.nx < 1 or cfg.ny < 1 or cfg.nt < 1:
        raise ConfigError("mesh.nx/ny/nt: root grid dims must be >= 1")
    if cfg.dimension == 1 and cfg.ny != 1:
        raise ConfigError("mesh.ny: must be 1 for 1-D problems")
    if cfg.oil_density <= 0.0 or cfg.water_density <= 0.0:
        raise ConfigError("fluids.oil_density/water_density: must be positive")
    if cfg.oil_viscosity <= 0.0 or cfg.water_viscosity <= 0.0:
        raise ConfigError("fluids.oil_viscosity/water_viscosity: must be positive")
    if cfg.oil_compressibility < 0.0 or cfg.water_compressibility < 0.0:
        raise ConfigError("fluids.*_compressibility: must be non-negative")
    if cfg.s_wirr < 0.0 or cfg.s_or < 0.0 or cfg.s_wirr + cfg.s_or >= 1.0:
        raise ConfigError("relperm.s_wirr + relperm.s_or must be < 1 and non-negative")
    for key, v in (("relperm.krw0", cfg.krw0), ("relperm.kro0", cfg.kro0)):
        if not 0.0 < v <= 1.0:
            raise ConfigError(f"{key}: must be in (0, 1]")
    if cfg.n_w < 1.0 or cfg.n_o < 1.0:
        raise ConfigError("relperm.n_w/n_o: exponents must be >= 1")
    if cfg.entry_pressure < 0.0 or cfg.cap_exponent <= 0.0 or cfg.cap_delta_reg <= 0.0:
        raise ConfigError("capillary.entry_pressure/exponent/delta_reg: out of range")
    if not 0.0 <= cfg.initial_saturation <= 1.0:
        raise ConfigError("initial.water_saturation: must be in [0, 1]")
    if cfg.tol_rel <= 0.0 or (cfg.tol_abs is not None and cfg.tol_abs <= 0.0):
        raise ConfigError("newton.tol_rel/tol_abs: must be positive")
    if cfg.max_iter < 1:
        raise ConfigError("newton.max_iter: must be >= 1")
    if cfg.max_sat_step <= 0.0:
        raise ConfigError("newton.max_sat_step: must be positive")
    if cfg.marking not in ("residual", "error", "union"):
        raise ConfigError("adapt.marking: must be residual, error, or union")
    if cfg.field_file is not None:
        resolved = cfg.field_file
        if not os.path.isabs(resolved):
            resolved = os.path.join(base_dir, resolved)
        if not os.path.isfile(resolved):
            raise ConfigError(f"rock.field_file: file not found: {resolved}")
        cfg.field_file = os.path.abspath(resolved)
    else:
        if cfg.permeability <= 0.0:
            raise ConfigError("rock.permeability: must be positive")
        if not 0.0 < cfg.porosity <= 1.0:
            raise ConfigError("rock.porosity: must be in (0, 1]")
    for well in cfg.wells:
        if not (0.0 <= well.x < cfg.x_extent and 0.0 <= well.y < cfg.y_extent):
            raise ConfigError(f"well:{well.name}.x/y: location outside the domain")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(cfg: SimulationConfig) -> str:
    """Canonical INI text with every key explicit (defaults included)."""
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, attr in keys.items():
            if attr == "ratios":
                out.write(f"{key} = {', '.join(str(r) for r in cfg.ratios)}\n")
            else:
                out.write(f"{key} = {_fmt(getattr(cfg, attr))}\n")
        out.write("\n")
    for well in cfg.wells:
        out.write(f"[well:{well.name}]\n")
        out.write(f"kind = {well.kind}\n")
        out.write(f"x = {_fmt(well.x)}\n")
        out.write(f"y = {_fmt(well.y)}\n")
        control_key = "rate" if well.kind == "rate_injector" else "bhp"
        out.write(f"{control_key} = {_fmt(well.control)}\n")
        out.write(f"radius = {_fmt(well.radius)}\n")
        out.write(f"skin = {_fmt(well.skin)}\n\n")
    return out.getvalue()


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as handle:
        handle.write(text)
    os.replace(tmp, path)


# ------------------------------------------------------------------ rock field


def load_field(path: str, expected_nx: int, expected_ny: int, x0: float, y0: float,
               dx: float, dy: float) -> RockField:
    """Plain-text grid: header ``nx ny``, then nx*ny rows ``i j Kx Ky phi``."""
    with open(path) as handle:
        lines = [ln.strip() for ln in handle if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise FieldFileError(f"{path}: empty field file")
    head = lines[0].split()
    if len(head) != 2:
        raise FieldFileError(f"{path}: header must be 'nx ny', got {lines[0]!r}")
    nx, ny = int(head[0]), int(head[1])
    if (nx, ny) != (expected_nx, expected_ny):
        raise FieldFileError(
            f"{path}: field dims {nx} x {ny} do not match the finest grid "
            f"{expected_nx} x {expected_ny}"
        )
    kx = np.full((nx, ny), np.nan)
    ky = np.full((nx, ny), np.nan)
    phi = np.full((nx, ny), np.nan)
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 5:
            raise FieldFileError(f"{path}: expected 'i j Kx Ky phi', got {ln!r}")
        i, j = int(parts[0]), int(parts[1])
        if not (0 <= i < nx and 0 <= j < ny):
            raise FieldFileError(f"{path}: cell ({i}, {j}) outside grid {nx} x {ny}")
        kx[i, j], ky[i, j], phi[i, j] = float(parts[2]), float(parts[3]), float(parts[4])
    missing = np.argwhere(np.isnan(phi))
    if missing.size:
        i, j = missing[0]
        raise FieldFileError(f"{path}: missing row for cell ({i}, {j})")
    bad = np.argwhere((kx <= 0) | (ky <= 0))
    if bad.size:
        i, j = bad[0]
        raise FieldFileError(f"{path}: non-positive permeability at cell ({i}, {j})")
    bad = np.argwhere((phi <= 0) | (phi > 1))
    if bad.size:
        i, j = bad[0]
        raise FieldFileError(f"{path}: porosity outside (0, 1] at cell ({i}, {j})")
    return RockField(x0, y0, dx, dy, kx, ky, phi)


def write_field(path: str, kx: np.ndarray, ky: np.ndarray, phi: np.ndarray) -> None:
    nx, ny = kx.shape
    rows = [f"{nx} {ny}"]
    for i in range(nx):
        for j in range(ny):
            rows.append(
                f"{i} {j} {float(kx[i, j])!r} {float(ky[i, j])!r} {float(phi[i, j])!r}"
            )
    _atomic_write(path, "\n".join(rows) + "\n")


def generate_field(
    kind: str,
    nx: int,
    ny: int,
    dx: float,
    dy: float,
    seed: int = 0,
    peak: float = 500.0,
    background: float = 50.0,
    noise: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic permeability/porosity analogues: a smooth bump or a sinuous channel."""
    rng = np.random.default_rng(seed)
    xc = (np.arange(nx) + 0.5) * dx
    yc = (np.arange(ny) + 0.5) * dy
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    lx, ly = nx * dx, ny * dy
    if kind == "gaussian":
        sx, sy = lx / 4.0, ly / 4.0
        bump = np.exp(-((X - 0.5 * lx) ** 2 / (2 * sx**2) + (Y - 0.5 * ly) ** 2 / (2 * sy**2)))
        k = background + (peak - background) * bump
    elif kind == "channel":
        center = 0.5 * lx + 0.2 * lx * np.sin(2.0 * np.pi * Y / ly * 1.5 + 0.7)
        width = 0.12 * lx
        k = background + (peak - background) * np.exp(-((X - center) / width) ** 2)
    else:
        raise ValueError(f"unknown field kind {kind!r}")
    if noise > 0.0:
        k = k * np.exp(noise * rng.standard_normal((nx, ny)))
    span = k.max() - k.min()
    phi = 0.20 + 0.15 * (k - k.min()) / (span if span > 0 else 1.0)
    return k, k.copy(), phi


# --------------------------------------------------------------------- outputs


def build_setup(cfg: SimulationConfig) -> RunSetup:
    nxf, nyf = cfg.fine_dims()
    dxf = cfg.x_extent / nxf
    dyf = cfg.y_extent / nyf
    if cfg.field_file is not None:
        rock = load_field(cfg.field_file, nxf, nyf, 0.0, 0.0, dxf, dyf)
    else:
        rock = RockField.uniform(0.0, 0.0, dxf, dyf, nxf, nyf, cfg.permeability, cfg.porosity)
    model = FluidRockModel(
        oil=FluidPhaseParams(cfg.oil_density, cfg.reference_pressure, cfg.oil_compressibility,
                             cfg.oil_viscosity),
        water=FluidPhaseParams(cfg.water_density, cfg.reference_pressure,
                               cfg.water_compressibility, cfg.water_viscosity),
        relperm=RelPermParams(cfg.s_wirr, cfg.s_or, cfg.krw0, cfg.kro0, cfg.n_w, cfg.n_o),
        capillary=CapPressureParams(cfg.entry_pressure, cfg.cap_exponent, cfg.cap_delta_reg),
        rock=rock,
        gravity=(cfg.gx, cfg.gy),
    )
    domain = SpaceTimeBox(0.0, cfg.x_extent, 0.0, cfg.y_extent, 0.0, cfg.t_end)
    return RunSetup(
        domain=domain,
        dim=cfg.dimension,
        nx=cfg.nx,
        ny=cfg.ny,
        nt=cfg.nt,
        ratios=list(cfg.ratios),
        thickness=cfg.thickness,
        model=model,
        wells=cfg.wells,
        p_init=cfg.initial_pressure,
        s_init=cfg.initial_saturation,
        newton=NewtonConfig(cfg.tol_rel, cfg.tol_abs, cfg.max_iter, cfg.max_sat_step),
        marking=cfg.marking,
        slab_days=cfg.slab_days,
    )


def _vtk_text(rec, t_scale: float, title: str) -> str:
    boxes = rec.boxes
    n = boxes.shape[0]
    out = io.StringIO()
    out.write("# vtk DataFile Version 2.0\n")
    out.write(f"{title}; t_scale={t_scale!r} ft per day\n")
    out.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
    out.write(f"POINTS {8 * n} double\n")
    for b in boxes:
        x0, x1, y0, y1, t0, t1 = b
        z0, z1 = t0 * t_scale, t1 * t_scale
        for z in (z0, z1):
            out.write(f"{x0!r} {y0!r} {z!r}\n{x1!r} {y0!r} {z!r}\n")
            out.write(f"{x1!r} {y1!r} {z!r}\n{x0!r} {y1!r} {z!r}\n")
    out.write(f"CELLS {n} {9 * n}\n")
    for c in range(n):
        base = 8 * c
        out.write("8 " + " ".join(str(base + k) for k in range(8)) + "\n")
    out.write(f"CELL_TYPES {n}\n")
    out.write("12\n" * n)
    out.write(f"CELL_DATA {n}\n")
    scalars = [
        ("pressure_psi", rec.p_oil, "double"),
        ("water_saturation", rec.s_w, "double"),
        ("level", rec.cell_levels, "int"),
        ("residual_indicator", rec.residual_ind, "double"),
        ("error_indicator", rec.error_ind, "double"),
    ]
    for name, values, kind in scalars:
        out.write(f"SCALARS {name} {kind} 1\nLOOKUP_TABLE default\n")
        if kind == "int":
            out.write("\n".join(str(int(v)) for v in values) + "\n")
        else:
            out.write("\n".join(repr(float(v)) for v in values) + "\n")
    return out.getvalue()


def _cdf_rows(samples: np.ndarray, kind: str, level: int) -> list[list]:
    lo, hi = ANALYSIS_RANGE
    x = np.sort(samples[(samples >= lo) & (samples <= hi)])
    rows = []
    if x.size == 0:
        return rows
    ecdf = (np.arange(x.size) + 1.0) / x.size
    mean, std = float(np.mean(x)), float(np.std(x))
    logs = np.log(x)
    lmean, lstd = float(np.mean(logs)), float(np.std(logs))
    ncdf = norm.cdf(x, loc=mean, scale=max(std, 1e-300))
    lcdf = norm.cdf(logs, loc=lmean, scale=max(lstd, 1e-300))
    for k in range(x.size):
        rows.append([kind, level, float(x[k]), float(ecdf[k]), float(ncdf[k]), float(lcdf[k])])
    return rows


def write_outputs(result: RunResult, cfg: SimulationConfig, out_dir: str) -> dict:
    """Write production.csv, per-level VTK meshes, report.json, and CDF tables."""
    os.makedirs(out_dir, exist_ok=True)
    t_scale = cfg.resolved_t_scale()
    multi = len(result.slabs) > 1

    prod = io.StringIO()
    writer = csv.writer(prod)
    writer.writerow(["time_days", "well", "water_rate_ft3_day", "oil_rate_ft3_day", "bhp_psi"])
    rows = []
    for slab in result.slabs:
        for rec in slab.production:
            for row in rec["rows"]:
                rows.append((rec["well"], row["t_end"], row["water_rate"], row["oil_rate"], row["bhp"]))
    rows.sort(key=lambda r: (r[0], r[1]))
    for well, t, wr, orate, bhp in rows:
        writer.writerow([repr(float(t)), well, repr(float(wr)), repr(float(orate)), repr(float(bhp))])
    _atomic_write(os.path.join(out_dir, "production.csv"), prod.getvalue())

    mesh_files = []
    final_meshes = []
    cdf_rows: dict[int, list[list]] = {}
    for k, slab in enumerate(result.slabs):
        for rec in slab.levels:
            stem = f"mesh_s{k:03d}_level{rec.level}.vtk" if multi else f"mesh_level{rec.level}.vtk"
            title = f"slab {k} level {rec.level}"
            _atomic_write(os.path.join(out_dir, stem), _vtk_text(rec, t_scale, title))
            mesh_files.append(stem)
            if rec is slab.levels[-1]:
                final_meshes.append(stem)
            if cfg.emit_cdf:
                cdf_rows.setdefault(rec.level, [])
                cdf_rows[rec.level] += _cdf_rows(rec.residual_ind, "residual", rec.level)
                cdf_rows[rec.level] += _cdf_rows(rec.error_ind, "error", rec.level)
    if cfg.emit_cdf:
        for level, data in cdf_rows.items():
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(["kind", "level", "value", "empirical_cdf", "normal_cdf", "lognormal_cdf"])
            writer.writerows(data)
            _atomic_write(os.path.join(out_dir, f"cdf_level{level}.csv"), buf.getvalue())

    report = {
        "domain": [0.0, cfg.x_extent, 0.0, cfg.y_extent, 0.0, cfg.t_end],
        "dimension": cfg.dimension,
        "thickness": cfg.thickness,
        "fine_dims": list(cfg.fine_dims()),
        "t_scale": t_scale,
        "mesh_files": mesh_files,
        "final_meshes": final_meshes,
        "run": result.report(),
    }
    _atomic_write(os.path.join(out_dir, "report.json"), json.dumps(report, indent=2) + "\n")
    return report


# --------------------------------------------------------------------- compare


def read_vtk_cells(path: str, t_scale: float):
    """Recover leaf boxes and cell data from a legacy-ASCII VTK file we wrote."""
    with open(path) as handle:
        tokens = handle.read().split("\n")
    idx = 0

    def seek(prefix: str) -> list[str]:
        nonlocal idx
        while idx < len(tokens):
            line = tokens[idx]
            idx += 1
            if line.startswith(prefix):
                return line.split()
        raise FieldFileError(f"{path}: missing section {prefix}")

    head = seek("POINTS")
    n_pts = int(head[1])
    pts = np.empty((n_pts, 3))
    for k in range(n_pts):
        pts[k] = [float(v) for v in tokens[idx].split()]
        idx += 1
    head = seek("CELLS")
    n_cells = int(head[1])
    conn = np.empty((n_cells, 8), dtype=int)
    for k in range(n_cells):
        parts = tokens[idx].split()
        idx += 1
        conn[k] = [int(v) for v in parts[1:9]]
    boxes = np.empty((n_cells, 6))
    for k in range(n_cells):
        corner = pts[conn[k]]
        boxes[k] = [
            corner[:, 0].min(), corner[:, 0].max(),
            corner[:, 1].min(), corner[:, 1].max(),
            corner[:, 2].min() / t_scale, corner[:, 2].max() / t_scale,
        ]
    data = {}
    while True:
        try:
            head = seek("SCALARS")
        except FieldFileError:
            break
        name = head[1]
        seek("LOOKUP_TABLE")
        vals = np.empty(n_cells)
        for k in range(n_cells):
            vals[k] = float(tokens[idx])
            idx += 1
        data[name] = vals
    return boxes, data


def _rasterize(boxes: np.ndarray, values: np.ndarray, meta: dict, t_star: float) -> np.ndarray:
    nxf, nyf = meta["fine_dims"]
    dom = meta["domain"]
    dxf = (dom[1] - dom[0]) / nxf
    dyf = (dom[3] - dom[2]) / nyf
    grid = np.full((nxf, nyf), np.nan)
    tol = 1e-9 * max(1.0, abs(t_star))
    for k in range(boxes.shape[0]):
        x0, x1, y0, y1, t0, t1 = boxes[k]
        if not (t0 - tol < t_star <= t1 + tol):
            continue
        i0 = int(round((x0 - dom[0]) / dxf))
        i1 = int(round((x1 - dom[0]) / dxf))
        j0 = int(round((y0 - dom[2]) / dyf))
        j1 = int(round((y1 - dom[2]) / dyf))
        grid[i0:i1, j0:j1] = values[k]
    if np.any(np.isnan(grid)):
        raise FieldFileError(f"rasterization at t={t_star} left uncovered cells")
    return grid


def _load_final_field(out_dir: str):
    with open(os.path.join(out_dir, "report.json")) as handle:
        meta = json.load(handle)
    boxes_list, sat_list, p_list = [], [], []
    for stem in meta["final_meshes"]:
        boxes, data = read_vtk_cells(os.path.join(out_dir, stem), meta["t_scale"])
        boxes_list.append(boxes)
        sat_list.append(data["water_saturation"])
        p_list.append(data["pressure_psi"])
    return meta, np.vstack(boxes_list), np.concatenate(sat_list), np.concatenate(p_list)


def _load_production(out_dir: str) -> dict:
    out: dict[str, dict[float, tuple[float, float]]] = {}
    with open(os.path.join(out_dir, "production.csv")) as handle:
        for row in csv.DictReader(handle):
            per = out.setdefault(row["well"], {})
            per[round(float(row["time_days"]), 9)] = (
                float(row["water_rate_ft3_day"]),
                float(row["oil_rate_ft3_day"]),
            )
    return out


def compare_outputs(dir_a: str, dir_b: str, times: list[float]) -> dict:
    """Field differences of run A against reference run B on B's finest grid."""
    meta_a, boxes_a, sat_a, _ = _load_final_field(dir_a)
    meta_b, boxes_b, sat_b, _ = _load_final_field(dir_b)
    dom = meta_b["domain"]
    nxf, nyf = meta_b["fine_dims"]
    cell_vol = ((dom[1] - dom[0]) / nxf) * ((dom[3] - dom[2]) / nyf) * meta_b["thickness"]
    sat_rows = []
    for t_star in times:
        grid_a = _rasterize(boxes_a, sat_a, meta_a, t_star)
        grid_b = _rasterize(boxes_b, sat_b, meta_b, t_star)
        diff = grid_a - grid_b
        l2_diff = math.sqrt(float(np.sum(diff**2)) * cell_vol)
        l2_ref = math.sqrt(float(np.sum(grid_b**2)) * cell_vol)
        sat_rows.append(
            {
                "time": t_star,
                "sat_l2_diff": l2_diff,
                "sat_l2_ref": l2_ref,
                "sat_l2_rel": l2_diff / l2_ref if l2_ref > 0 else 0.0,
                "sat_linf_diff": float(np.max(np.abs(diff))),
            }
        )
    prod_a = _load_production(dir_a)
    prod_b = _load_production(dir_b)
    rate_rows = []
    for well in sorted(set(prod_a) & set(prod_b)):
        shared = sorted(set(prod_a[well]) & set(prod_b[well]))
        if not shared:
            continue
        aw = np.array([prod_a[well][t][0] for t in shared])
        bw = np.array([prod_b[well][t][0] for t in shared])
        ao = np.array([prod_a[well][t][1] for t in shared])
        bo = np.array([prod_b[well][t][1] for t in shared])

        def rms(v: np.ndarray) -> float:
            return math.sqrt(float(np.mean(v**2)))

        rate_rows.append(
            {
                "well": well,
                "water_rms_diff": rms(aw - bw),
                "water_rms_ref": rms(bw),
                "water_rms_rel": rms(aw - bw) / rms(bw) if rms(bw) > 0 else 0.0,
                "oil_rms_diff": rms(ao - bo),
                "oil_rms_ref": rms(bo),
                "oil_rms_rel": rms(ao - bo) / rms(bo) if rms(bo) > 0 else 0.0,
            }
        )
    leaf_a = meta_a["run"]["totals"]["final_leaf_count"]
    leaf_b = meta_b["run"]["totals"]["final_leaf_count"]
    work_a = meta_a["run"]["totals"]["assembly_seconds"] + meta_a["run"]["totals"]["linear_seconds"]
    work_b = meta_b["run"]["totals"]["assembly_seconds"] + meta_b["run"]["totals"]["linear_seconds"]
    return {
        "saturation": sat_rows,
        "rates": rate_rows,
        "leaf_count_ratio": leaf_a / leaf_b if leaf_b else 0.0,
        "solve_time_ratio": work_a / work_b if work_b else 0.0,
    }


def compare_csv_text(summary: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "time_or_well", "value"])
    for row in summary["saturation"]:
        for key in ("sat_l2_diff", "sat_l2_ref", "sat_l2_rel", "sat_linf_diff"):
            writer.writerow([key, repr(float(row["time"])), repr(float(row[key]))])
    for row in summary["rates"]:
        for key in (
            "water_rms_diff", "water_rms_ref", "water_rms_rel",
            "oil_rms_diff", "oil_rms_ref", "oil_rms_rel",
        ):
            writer.writerow([key, row["well"], repr(float(row[key]))])
    writer.writerow(["leaf_count_ratio", "", repr(float(summary["leaf_count_ratio"]))])
    writer.writerow(["solve_time_ratio", "", repr(float(summary["solve_time_ratio"]))])
    return buf.getvalue()


# ------------------------------------------------------------------------- CLI


def _cmd_run(args, uniform: bool) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg.output_dir
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(os.path.dirname(os.path.abspath(args.config)), out_dir)
    setup = build_setup(cfg)
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "resolved.cfg"), resolved_text(cfg))
    try:
        result = run_uniform(setup) if uniform else sequential_solve(setup)
    except SolveAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.partial is not None and exc.partial.slabs:
            write_outputs(exc.partial, cfg, out_dir)
            print(f"diagnostic state dumped to {out_dir}", file=sys.stderr)
        return 1
    write_outputs(result, cfg, out_dir)
    totals = result.report()["totals"]
    print(
        f"{result.mode} run finished: {totals['final_leaf_count']} leaves, "
        f"{totals['newton_iterations']} Newton iterations, "
        f"{totals['wall_seconds']:.2f} s wall"
    )
    return 0


def _cmd_compare(args) -> int:
    times = [float(tok) for tok in args.times.split(",")] if args.times else []
    summary = compare_outputs(args.dir_a, args.dir_b, times)
    text = compare_csv_text(summary)
    sys.stdout.write(text)
    if args.out:
        _atomic_write(args.out, text)
    return 0


def _cmd_gen_field(args) -> int:
    kx, ky, phi = generate_field(
        args.kind, args.nx, args.ny, args.dx, args.dy,
        seed=args.seed, peak=args.peak, background=args.background, noise=args.noise,
    )
    write_field(args.out, kx, ky, phi)
    print(f"wrote {args.nx} x {args.ny} {args.kind} field to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="stamr",
        description="Space-time adaptive sequential-refinement two-phase flow solver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="adaptive sequential-refinement run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="override the configured output directory")

    p_uni = sub.add_parser("run-uniform", help="uniform finest-level baseline run")
    p_uni.add_argument("--config", required=True)
    p_uni.add_argument("--out", default=None)

    p_cmp = sub.add_parser("compare", help="field/rate differences of run A against reference B")
    p_cmp.add_argument("dir_a")
    p_cmp.add_argument("dir_b")
    p_cmp.add_argument("--times", default="", help="comma-separated times (days)")
    p_cmp.add_argument("--out", default=None, help="also write the CSV here")

    p_gen = sub.add_parser("gen-field", help="emit a synthetic rock field")
    p_gen.add_argument("--kind", choices=("gaussian", "channel"), default="gaussian")
    p_gen.add_argument("--nx", type=int, required=True)
    p_gen.add_argument("--ny", type=int, required=True)
    p_gen.add_argument("--dx", type=float, default=1.0)
    p_gen.add_argument("--dy", type=float, default=1.0)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--peak", type=float, default=500.0)
    p_gen.add_argument("--background", type=float, default=50.0)
    p_gen.add_argument("--noise", type=float, default=0.0)
    p_gen.add_argument("--out", required=True)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0

    try:
        if args.command == "run":
            return _cmd_run(args, uniform=False)
        if args.command == "run-uniform":
            return _cmd_run(args, uniform=True)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "gen-field":
            return _cmd_gen_field(args)
    except (ConfigError, FieldFileError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
