"""Newton iteration over the monolithic slab system with a sparse direct backend."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import StateVector


class SolverFailure(RuntimeError):
    """Singular or numerically failed linear solve."""


@dataclass
class NewtonConfig:
    tol_rel: float = 1e-6
    tol_abs: float | None = None  # None: 1e-8 x the assembler's cell-mass scale
    max_iter: int = 20
    max_sat_step: float = 0.2

    def __post_init__(self) -> None:
        if self.tol_rel <= 0.0 or (self.tol_abs is not None and self.tol_abs <= 0.0):
            raise ValueError("Newton tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.max_sat_step <= 0.0:
            raise ValueError("max_sat_step must be positive")


@dataclass
class NewtonReport:
    iterations: int = 0
    residual_norms: list[float] = field(default_factory=list)
    converged: bool = False
    assembly_seconds: float = 0.0
    linear_seconds: float = 0.0
    step_halvings: int = 0
    damping_level: int = 0


def solve_linear(matrix, rhs: np.ndarray) -> np.ndarray:
    """Direct sparse solve meeting ||J x - rhs||_inf <= 1e-10 ||rhs||_inf.

    A few iterative-refinement passes with the factored matrix recover the
    contract when the first triangular solve alone falls short.
    """
    rhs = np.asarray(rhs, dtype=float)
    mat = sp.csc_matrix(matrix)
    if mat.shape[0] != mat.shape[1] or mat.shape[0] != rhs.size:
        raise SolverFailure(f"shape mismatch: matrix {mat.shape}, rhs {rhs.size}")
    rhs_norm = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    if rhs_norm == 0.0:
        return np.zeros_like(rhs)
    factor = mat.copy()
    factor.eliminate_zeros()  # structural zeros would bloat the fill-in
    try:
        lu = spla.splu(factor)
    except RuntimeError as exc:
        raise SolverFailure(f"sparse factorization failed: {exc}") from exc
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverFailure("factorization produced non-finite solution (singular matrix?)")
    target = 1e-10 * rhs_norm
    residual = rhs - mat @ x
    for _ in range(3):
        if np.max(np.abs(residual)) <= target:
            break
        x = x + lu.solve(residual)
        residual = rhs - mat @ x
    res_norm = float(np.max(np.abs(residual)))
    if not np.isfinite(res_norm) or res_norm > target:
        raise SolverFailure(
            f"linear solve residual {res_norm:.3e} exceeds contract {target:.3e}"
        )
    return x


def newton_solve(assembler, guess: StateVector, config: NewtonConfig | None = None):
    """Damped Newton on R(x) = 0; returns (state, report) whether or not converged.

    Convergence: ||R||_inf <= max(tol_abs, tol_rel * ||R(guess)||_inf). Each
    update is scaled so no saturation moves more than max_sat_step, then
    saturations are clamped to [0, 1]. Two safeguards, both deterministic and
    recorded in the report: three consecutive residual increases halve the
    next step once, and sustained stagnation with small raw steps compounds a
    persistent damping factor (breaks period-2 limit cycles at upwind
    switches and property-curve kinks, which the increase rule never sees).
    """
    cfg = config or NewtonConfig()
    tol_abs = cfg.tol_abs
    if tol_abs is None:
        tol_abs = 1e-8 * float(getattr(assembler, "mass_scale", 1.0))

    report = NewtonReport()
    x = guess.to_flat()

    t0 = time.perf_counter()
    residual = assembler.residual_flat(x)
    report.assembly_seconds += time.perf_counter() - t0
    norm = float(np.max(np.abs(residual))) if residual.size else 0.0
    report.residual_norms.append(norm)
    target = max(tol_abs, cfg.tol_rel * norm)

    best = norm
    rising = 0
    stagnant = 0
    halve_next = False
    for _ in range(cfg.max_iter):
        if report.residual_norms[-1] <= target:
            break
        t0 = time.perf_counter()
        jac = assembler.jacobian_flat(x)
        report.assembly_seconds += time.perf_counter() - t0

        t0 = time.perf_counter()
        delta = solve_linear(jac, -residual)
        report.linear_seconds += time.perf_counter() - t0

        raw_sat_step = float(np.max(np.abs(delta[1::2]))) if delta.size >= 2 else 0.0
        if report.damping_level:
            delta = delta * 0.5**report.damping_level
        if halve_next:
            delta = 0.5 * delta
            halve_next = False
        sat_step = float(np.max(np.abs(delta[1::2]))) if delta.size >= 2 else 0.0
        if sat_step > cfg.max_sat_step:
            delta = delta * (cfg.max_sat_step / sat_step)
        x = x + delta
        x[1::2] = np.clip(x[1::2], 0.0, 1.0)

        t0 = time.perf_counter()
        residual = assembler.residual_flat(x)
        report.assembly_seconds += time.perf_counter() - t0
        norm = float(np.max(np.abs(residual)))
        report.residual_norms.append(norm)
        report.iterations += 1

        if norm > report.residual_norms[-2]:
            rising += 1
            if rising == 3:
                halve_next = True
                report.step_halvings += 1
                rising = 0
        else:
            rising = 0
        if norm < 0.7 * best:
            stagnant = 0
        else:
            recent = report.residual_norms[:-1][-3:]
            if raw_sat_step <= cfg.max_sat_step and norm >= 0.9 * min(recent):
                stagnant += 1
                if stagnant >= 2 and report.damping_level < 6:
                    report.damping_level += 1
                    stagnant = 0
        best = min(best, norm)

    report.converged = report.residual_norms[-1] <= target
    return StateVector.from_flat(x), report


__all__ = ["NewtonConfig", "NewtonReport", "SolverFailure", "newton_solve", "solve_linear"]
