"""Fluid and rock property functions for slightly compressible oil-water flow.

All functions are pure and accept scalars or numpy arrays. Units: psi,
lb/ft^3, cp, md, fractions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FluidPhaseParams:
    """Slightly compressible phase: rho = rho_ref * exp(c_f * (p - p_ref))."""

    rho_ref: float  # lb/ft^3
    p_ref: float  # psi
    c_f: float  # 1/psi
    mu: float  # cp

    def __post_init__(self) -> None:
        if self.rho_ref <= 0.0:
            raise ValueError(f"rho_ref must be positive, got {self.rho_ref}")
        if self.mu <= 0.0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.c_f < 0.0:
            raise ValueError(f"c_f must be non-negative, got {self.c_f}")


def density(params: FluidPhaseParams, p):
    return params.rho_ref * np.exp(params.c_f * (p - params.p_ref))


def ddensity_dp(params: FluidPhaseParams, p):
    return params.c_f * density(params, p)


@dataclass(frozen=True)
class RelPermParams:
    """Power-law (Brooks-Corey) relative permeability endpoints and exponents."""

    s_wirr: float
    s_or: float
    krw0: float = 1.0
    kro0: float = 1.0
    n_w: float = 2.0
    n_o: float = 2.0

    def __post_init__(self) -> None:
        if self.s_wirr < 0.0 or self.s_or < 0.0:
            raise ValueError("residual saturations must be non-negative")
        if self.s_wirr + self.s_or >= 1.0:
            raise ValueError(
                f"s_wirr + s_or must be < 1, got {self.s_wirr} + {self.s_or}"
            )
        for name, v in (("krw0", self.krw0), ("kro0", self.kro0)):
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.n_w < 1.0 or self.n_o < 1.0:
            raise ValueError("relative-permeability exponents must be >= 1")

    @property
    def mobile_span(self) -> float:
        return 1.0 - self.s_or - self.s_wirr


def rel_perm(params: RelPermParams, phase: str, s_w):
    """kr(phase) at water saturation s_w, clamped to the mobile window."""
    span = params.mobile_span
    if phase == "water":
        se = np.clip((np.asarray(s_w, dtype=float) - params.s_wirr) / span, 0.0, 1.0)
        return params.krw0 * se**params.n_w
    if phase == "oil":
        se = np.clip((1.0 - np.asarray(s_w, dtype=float) - params.s_or) / span, 0.0, 1.0)
        return params.kro0 * se**params.n_o
    raise ValueError(f"unknown phase {phase!r}")


def drel_perm_dsw(params: RelPermParams, phase: str, s_w):
    """d kr / d s_w; zero outside the mobile window (clamped, not extrapolated)."""
    span = params.mobile_span
    s_w = np.asarray(s_w, dtype=float)
    if phase == "water":
        se = (s_w - params.s_wirr) / span
        inside = (se > 0.0) & (se < 1.0)
        se = np.clip(se, 0.0, 1.0)
        return np.where(inside, params.krw0 * params.n_w * se ** (params.n_w - 1.0) / span, 0.0)
    if phase == "oil":
        se = (1.0 - s_w - params.s_or) / span
        inside = (se > 0.0) & (se < 1.0)
        se = np.clip(se, 0.0, 1.0)
        return np.where(inside, -params.kro0 * params.n_o * se ** (params.n_o - 1.0) / span, 0.0)
    raise ValueError(f"unknown phase {phase!r}")


@dataclass(frozen=True)
class CapPressureParams:
    """Entry-pressure capillary curve p_c = p_entry * ((1-s_wirr)/(s_w-s_wirr))^exponent.

    ``delta_reg`` keeps the curve finite at s_w = s_wirr: the saturation is
    evaluated at max(s_w, s_wirr + delta_reg).
    """

    p_entry: float  # psi
    exponent: float
    delta_reg: float = 1e-6

    def __post_init__(self) -> None:
        if self.p_entry < 0.0:
            raise ValueError(f"p_entry must be >= 0, got {self.p_entry}")
        if self.exponent <= 0.0:
            raise ValueError(f"exponent must be > 0, got {self.exponent}")
        if self.delta_reg <= 0.0:
            raise ValueError(f"delta_reg must be > 0, got {self.delta_reg}")


def cap_pressure(params: CapPressureParams, s_wirr: float, s_w):
    s_eff = np.maximum(np.asarray(s_w, dtype=float), s_wirr + params.delta_reg)
    return params.p_entry * ((1.0 - s_wirr) / (s_eff - s_wirr)) ** params.exponent


def dcap_pressure_dsw(params: CapPressureParams, s_wirr: float, s_w):
    """d p_c / d s_w; zero on the regularized plateau below s_wirr + delta_reg."""
    s_w = np.asarray(s_w, dtype=float)
    active = s_w > s_wirr + params.delta_reg
    s_eff = np.maximum(s_w, s_wirr + params.delta_reg)
    pc = params.p_entry * ((1.0 - s_wirr) / (s_eff - s_wirr)) ** params.exponent
    return np.where(active, -params.exponent * pc / (s_eff - s_wirr), 0.0)


def upwind_mobility(
    relperm: RelPermParams,
    mu: float,
    phase: str,
    s_left,
    rho_left,
    s_right,
    rho_right,
    u_sign,
):
    """Face mobility 0.5*(rho_L + rho_R) * kr(S_upstream) / mu.

    The upstream cell is the left one when the auxiliary flux sign is
    positive; a zero sign is treated as non-positive (right upstream).
    """
    s_up = np.where(np.asarray(u_sign) > 0.0, s_left, s_right)
    return 0.5 * (np.asarray(rho_left) + np.asarray(rho_right)) * rel_perm(relperm, phase, s_up) / mu


class RockFieldError(ValueError):
    """Rock field data inconsistent with the mesh or physically invalid."""


class RockField:
    """Per-axis permeability (md) and porosity on the finest spatial grid.

    Effective values for a coarser cell window: porosity by volume average,
    permeability by per-axis geometric mean over the covered fine cells.
    """

    def __init__(
        self,
        x0: float,
        y0: float,
        dx: float,
        dy: float,
        kx: np.ndarray,
        ky: np.ndarray,
        phi: np.ndarray,
    ):
        kx = np.asarray(kx, dtype=float)
        ky = np.asarray(ky, dtype=float)
        phi = np.asarray(phi, dtype=float)
        if kx.shape != ky.shape or kx.shape != phi.shape or kx.ndim != 2:
            raise RockFieldError(f"field arrays must share a 2-D shape, got {kx.shape}, {ky.shape}, {phi.shape}")
        if np.any(kx <= 0.0) or np.any(ky <= 0.0):
            bad = np.argwhere((kx <= 0.0) | (ky <= 0.0))[0]
            raise RockFieldError(f"non-positive permeability at cell ({bad[0]}, {bad[1]})")
        if np.any(phi <= 0.0) or np.any(phi > 1.0):
            bad = np.argwhere((phi <= 0.0) | (phi > 1.0))[0]
            raise RockFieldError(f"porosity outside (0, 1] at cell ({bad[0]}, {bad[1]})")
        self.x0 = float(x0)
        self.y0 = float(y0)
        self.dx = float(dx)
        self.dy = float(dy)
        self.kx = kx
        self.ky = ky
        self.phi = phi
        self.log_kx = np.log(kx)
        self.log_ky = np.log(ky)

    @property
    def shape(self) -> tuple[int, int]:
        return self.kx.shape

    @classmethod
    def uniform(
        cls,
        x0: float,
        y0: float,
        dx: float,
        dy: float,
        nx: int,
        ny: int,
        perm: float = 100.0,
        poro: float = 0.2,
    ) -> "RockField":
        shape = (nx, ny)
        return cls(x0, y0, dx, dy, np.full(shape, perm), np.full(shape, perm), np.full(shape, poro))

    def window(self, x_lo: float, x_hi: float, y_lo: float, y_hi: float) -> tuple[int, int, int, int]:
        """Fine-grid index window covering a cell footprint (must align with the grid)."""
        i0 = int(round((x_lo - self.x0) / self.dx))
        i1 = int(round((x_hi - self.x0) / self.dx))
        j0 = int(round((y_lo - self.y0) / self.dy))
        j1 = int(round((y_hi - self.y0) / self.dy))
        nx, ny = self.shape
        if not (0 <= i0 < i1 <= nx and 0 <= j0 < j1 <= ny):
            raise RockFieldError(
                f"footprint [{x_lo}, {x_hi}] x [{y_lo}, {y_hi}] does not align with the rock grid"
            )
        return i0, i1, j0, j1

    def effective(self, x_lo: float, x_hi: float, y_lo: float, y_hi: float) -> tuple[float, float, float]:
        """(kx_eff, ky_eff, phi_eff) for a cell footprint."""
        i0, i1, j0, j1 = self.window(x_lo, x_hi, y_lo, y_hi)
        sl = (slice(i0, i1), slice(j0, j1))
        kx_eff = float(np.exp(np.mean(self.log_kx[sl])))
        ky_eff = float(np.exp(np.mean(self.log_ky[sl])))
        phi_eff = float(np.mean(self.phi[sl]))
        return kx_eff, ky_eff, phi_eff


@dataclass
class FluidRockModel:
    """Everything the discretization needs about fluids and rock."""

    oil: FluidPhaseParams
    water: FluidPhaseParams
    relperm: RelPermParams
    capillary: CapPressureParams
    rock: RockField
    gravity: tuple[float, float] = (0.0, 0.0)  # multiples of standard gravity, (x, y)

    def water_pressure(self, p_oil, s_w):
        return p_oil - cap_pressure(self.capillary, self.relperm.s_wirr, s_w)


__all__ = [
    "CapPressureParams",
    "FluidPhaseParams",
    "FluidRockModel",
    "RelPermParams",
    "RockField",
    "RockFieldError",
    "cap_pressure",
    "dcap_pressure_dsw",
    "ddensity_dp",
    "density",
    "drel_perm_dsw",
    "rel_perm",
    "upwind_mobility",
]
