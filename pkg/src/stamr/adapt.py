"""Sequential local refinement driver.

Per slab: solve the coarsest mesh, then repeatedly (indicator -> threshold ->
mark -> refine -> interpolate previous solution as the Newton guess -> solve)
until the finest level. Residual indicators expose where the initial guess is
poor; error indicators expose saturation variation in space and time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .discretization import SlabAssembler, SlabInflow, StateVector, Well
from .mesh import Direction, MeshError, MeshTree, SpaceTimeBox
from .petrophysics import FluidRockModel
from .solver import NewtonConfig, NewtonReport, newton_solve

ANALYSIS_RANGE = (0.01, 1.0)


class ThresholdMethod(Enum):
    LOG_MEAN = "log_mean"
    MEAN_LOG_MEAN_AVERAGE = "mean_log_mean_average"


@dataclass
class IndicatorField:
    """Per-leaf values in [0, 1]; the maximum is exactly 1 when any value is > 0."""

    values: np.ndarray
    kind: str  # "residual" | "error"


class SolveAbort(RuntimeError):
    """Newton failed at the finest level; carries the partial result for dumping."""

    def __init__(self, message: str, partial: "RunResult | None" = None):
        super().__init__(message)
        self.partial = partial


def _normalized(values: np.ndarray) -> np.ndarray:
    peak = float(np.max(values)) if values.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(values)
    return values / peak


def residual_indicator(assembler: SlabAssembler, state: StateVector) -> IndicatorField:
    """Normalized nonlinear residual magnitude at the pre-Newton guess.

    Total-mass and water-mass families are normalized separately; a leaf's
    value is the larger of the two. An identically zero family contributes 0.
    """
    res = assembler.assemble_residual(state)
    v = np.maximum(_normalized(np.abs(res.r_total)), _normalized(np.abs(res.r_water)))
    return IndicatorField(values=v, kind="residual")


def error_indicator(tree: MeshTree, state: StateVector) -> IndicatorField:
    """Normalized combination of spatial and temporal saturation variation.

    Spatial part: max |S_w(leaf) - S_w(neighbor)| over spatial neighbors.
    Temporal part: |S_w(leaf) - overlap-weighted past S_w| (0 at slab start).
    The squared parts are each normalized by their max before combining, and
    the result is normalized to [0, 1].
    """
    index = tree.index_leaves()
    s = np.asarray(state.s_w, dtype=float)
    if s.size != len(index):
        raise MeshError(f"state has {s.size} leaves, mesh has {len(index)}")
    d_space = np.zeros(s.size)
    d_time = np.zeros(s.size)
    past_acc = np.zeros(s.size)
    covered = np.zeros(s.size)
    for face in tree.enumerate_faces():
        if face.is_boundary:
            continue
        il = index.index_of[face.left]
        ir = index.index_of[face.right]
        if face.direction is Direction.FUTURE:
            w = face.spatial_measure / (tree.nodes[face.right].box.spatial_area * tree.thickness)
            past_acc[ir] += w * s[il]
            covered[ir] += w
        else:
            jump = abs(s[il] - s[ir])
            d_space[il] = max(d_space[il], jump)
            d_space[ir] = max(d_space[ir], jump)
    has_past = covered > 0.5
    d_time[has_past] = np.abs(s[has_past] - past_acc[has_past])
    eps = np.sqrt(_normalized(d_space**2) + _normalized(d_time**2))
    return IndicatorField(values=_normalized(eps), kind="error")


def select_threshold(samples: np.ndarray, method: ThresholdMethod) -> float | None:
    """Statistical marking threshold over samples in the analysis range.

    LOG_MEAN is the geometric mean (the median of a log-normal fit);
    MEAN_LOG_MEAN_AVERAGE averages the arithmetic and geometric means.
    Returns None when no sample lies in the analysis range.
    """
    lo, hi = ANALYSIS_RANGE
    x = np.asarray(samples, dtype=float)
    x = x[(x >= lo) & (x <= hi)]
    if x.size == 0:
        return None
    log_mean = float(np.exp(np.mean(np.log(x))))
    if method is ThresholdMethod.LOG_MEAN:
        return log_mean
    if method is ThresholdMethod.MEAN_LOG_MEAN_AVERAGE:
        return 0.5 * (float(np.mean(x)) + log_mean)
    raise ValueError(f"unknown threshold method {method}")


def mark_cells(
    indicator: IndicatorField,
    threshold: float | None,
    tree: MeshTree,
    wells: tuple[Well, ...] | list[Well] = (),
) -> set[int]:
    """Leaves to refine: indicator >= max(threshold, 0.01), plus well-containing
    leaves, restricted to level < max_level."""
    index = tree.index_leaves()
    plan: set[int] = set()
    if threshold is not None:
        cut = max(threshold, ANALYSIS_RANGE[0])
        for k, lid in enumerate(index.ids):
            if indicator.values[k] >= cut and tree.nodes[lid].level < tree.max_level:
                plan.add(lid)
    for well in wells:
        for lid in index.ids:
            node = tree.nodes[lid]
            if node.level < tree.max_level and node.box.contains_point(well.x, well.y):
                plan.add(lid)
    return plan


def apply_plan(tree: MeshTree, plan: set[int]) -> None:
    for lid in sorted(plan):
        tree.refine_cell(lid)


# --------------------------------------------------------------- interpolation


def _side_stats(tree: MeshTree, leaf_id: int, direction: Direction, vals: np.ndarray, index):
    """Overlap-weighted mean value and axis-center of the neighbors on one side."""
    nbrs = tree.find_neighbors(leaf_id, direction)
    if not nbrs:
        return None
    a = tree.nodes[leaf_id].box
    axis = direction.axis
    orth = [ax for ax in (0, 1, 2) if ax != axis]
    w_sum = 0.0
    v_sum = np.zeros(vals.shape[1])
    c_sum = 0.0
    for nid in nbrs:
        b = tree.nodes[nid].box
        w = 1.0
        for ax in orth:
            alo, ahi = a.interval(ax)
            blo, bhi = b.interval(ax)
            w *= min(ahi, bhi) - max(alo, blo)
        center = 0.5 * sum(b.interval(axis))
        w_sum += w
        v_sum += w * vals[index.index_of[nid]]
        c_sum += w * center
    return v_sum / w_sum, c_sum / w_sum


def _leaf_slopes(tree: MeshTree, leaf_id: int, vals: np.ndarray, index) -> np.ndarray:
    """Per-axis centered slopes of (P, S) around a leaf (one-sided at boundaries)."""
    node = tree.nodes[leaf_id]
    own = vals[index.index_of[leaf_id]]
    slopes = np.zeros((3, vals.shape[1]))
    pairs = [
        (0, Direction.X_MINUS, Direction.X_PLUS),
        (1, Direction.Y_MINUS, Direction.Y_PLUS),
        (2, Direction.PAST, Direction.FUTURE),
    ]
    for axis, d_minus, d_plus in pairs:
        if tree.dim == 1 and axis == 1:
            continue
        lo = _side_stats(tree, leaf_id, d_minus, vals, index)
        hi = _side_stats(tree, leaf_id, d_plus, vals, index)
        own_c = 0.5 * sum(node.box.interval(axis))
        if lo is not None and hi is not None:
            slopes[axis] = (hi[0] - lo[0]) / (hi[1] - lo[1])
        elif hi is not None:
            slopes[axis] = (hi[0] - own) / (hi[1] - own_c)
        elif lo is not None:
            slopes[axis] = (own - lo[0]) / (own_c - lo[1])
    return slopes


def interpolate_solution(old_tree: MeshTree, old_state: StateVector, new_tree: MeshTree) -> StateVector:
    """Transfer a solution onto a refined mesh by cell-centered multilinear
    interpolation; unchanged leaves copy exactly and S_w is clamped to [0, 1]."""
    n_old = len(old_tree.nodes)
    if len(new_tree.nodes) < n_old:
        raise MeshError("new mesh has fewer nodes than the old one; not a refinement")
    for k in range(n_old):
        a, b = old_tree.nodes[k], new_tree.nodes[k]
        if a.box != b.box or a.level != b.level or a.parent != b.parent:
            raise MeshError(f"node {k} differs between meshes; not a refinement")
        if a.children and a.children != b.children[: len(a.children)]:
            raise MeshError(f"node {k} lost children; not a refinement")

    old_index = old_tree.index_leaves()
    vals = np.column_stack([old_state.p_oil, old_state.s_w])
    if vals.shape[0] != len(old_index):
        raise MeshError("old state does not match the old mesh")

    slope_cache: dict[int, np.ndarray] = {}
    new_index = new_tree.index_leaves()
    out = np.empty((len(new_index), 2))
    for k, lid in enumerate(new_index.ids):
        if lid < n_old:
            out[k] = vals[old_index.index_of[lid]]
            continue
        node = new_tree.nodes[lid]
        anc = node
        while anc.id >= n_old:
            anc = new_tree.nodes[anc.parent]
        if not old_tree.nodes[anc.id].is_leaf:
            raise MeshError(f"ancestor {anc.id} of new leaf {lid} is not an old leaf")
        if anc.id not in slope_cache:
            slope_cache[anc.id] = _leaf_slopes(old_tree, anc.id, vals, old_index)
        slopes = slope_cache[anc.id]
        base = vals[old_index.index_of[anc.id]]
        delta = np.asarray(node.box.center()) - np.asarray(old_tree.nodes[anc.id].box.center())
        out[k] = base + delta @ slopes
    return StateVector(p_oil=out[:, 0], s_w=np.clip(out[:, 1], 0.0, 1.0))


# ------------------------------------------------------------------ run driver


@dataclass
class RunSetup:
    """Everything a run needs except file I/O."""

    domain: SpaceTimeBox
    dim: int
    nx: int
    ny: int
    nt: int
    ratios: list[int]
    thickness: float
    model: FluidRockModel
    wells: tuple[Well, ...]
    p_init: float
    s_init: float
    newton: NewtonConfig
    marking: str = "union"  # residual | error | union
    slab_days: float | None = None

    def __post_init__(self) -> None:
        if self.marking not in ("residual", "error", "union"):
            raise ValueError(f"marking must be residual, error, or union, got {self.marking!r}")

    @property
    def max_level(self) -> int:
        return len(self.ratios)

    def slab_windows(self) -> list[tuple[float, float, int]]:
        """(t_lo, t_hi, nt_root) per slab."""
        horizon = self.domain.t_hi - self.domain.t_lo
        slab = self.slab_days if self.slab_days is not None else horizon
        n_slabs = int(round(horizon / slab))
        if n_slabs < 1 or abs(n_slabs * slab - horizon) > 1e-9 * horizon:
            raise ValueError(f"slab length {slab} does not divide the horizon {horizon}")
        if self.nt % n_slabs != 0:
            raise ValueError(f"root time cells {self.nt} not divisible by {n_slabs} slabs")
        nt_slab = self.nt // n_slabs
        return [
            (self.domain.t_lo + k * slab, self.domain.t_lo + (k + 1) * slab, nt_slab)
            for k in range(n_slabs)
        ]


@dataclass
class LevelRecord:
    """Snapshot of one refinement level of one slab, self-contained for output."""

    level: int
    leaf_count: int
    newton: NewtonReport
    wall_seconds: float
    residual_ind: np.ndarray
    error_ind: np.ndarray
    residual_threshold: float | None
    error_threshold: float | None
    marked: int
    boxes: np.ndarray  # (N, 6): x_lo, x_hi, y_lo, y_hi, t_lo, t_hi
    p_oil: np.ndarray
    s_w: np.ndarray
    cell_levels: np.ndarray


@dataclass
class SlabResult:
    t_lo: float
    t_hi: float
    levels: list[LevelRecord]
    tree: MeshTree
    assembler: SlabAssembler
    state: StateVector
    production: list[dict]
    water_mass_start: float
    water_mass_end: float
    injected_water_mass: float
    produced_water_mass: float
    produced_oil_mass: float


@dataclass
class RunResult:
    mode: str  # "adaptive" | "uniform"
    slabs: list[SlabResult] = field(default_factory=list)

    @property
    def final_leaf_count(self) -> int:
        return sum(s.levels[-1].leaf_count for s in self.slabs)

    def report(self) -> dict:
        slabs = []
        tot_asm = tot_lin = tot_wall = 0.0
        tot_iters = 0
        for s in self.slabs:
            levels = []
            for rec in s.levels:
                levels.append(
                    {
                        "level": rec.level,
                        "leaf_count": rec.leaf_count,
                        "iterations": rec.newton.iterations,
                        "converged": rec.newton.converged,
                        "step_halvings": rec.newton.step_halvings,
                        "assembly_seconds": rec.newton.assembly_seconds,
                        "linear_seconds": rec.newton.linear_seconds,
                        "wall_seconds": rec.wall_seconds,
                        "marked": rec.marked,
                        "residual_threshold": rec.residual_threshold,
                        "error_threshold": rec.error_threshold,
                    }
                )
                tot_asm += rec.newton.assembly_seconds
                tot_lin += rec.newton.linear_seconds
                tot_wall += rec.wall_seconds
                tot_iters += rec.newton.iterations
            slabs.append(
                {
                    "t_lo": s.t_lo,
                    "t_hi": s.t_hi,
                    "levels": levels,
                    "final_leaf_count": s.levels[-1].leaf_count,
                    "water_mass_start_lb": s.water_mass_start,
                    "water_mass_end_lb": s.water_mass_end,
                    "injected_water_mass_lb": s.injected_water_mass,
                    "produced_water_mass_lb": s.produced_water_mass,
                    "produced_oil_mass_lb": s.produced_oil_mass,
                }
            )
        return {
            "mode": self.mode,
            "slabs": slabs,
            "totals": {
                "assembly_seconds": tot_asm,
                "linear_seconds": tot_lin,
                "wall_seconds": tot_wall,
                "newton_iterations": tot_iters,
                "final_leaf_count": self.final_leaf_count,
            },
        }


def _refine_well_columns(tree: MeshTree, wells: tuple[Well, ...]) -> None:
    # wells are refined to the finest level so each host cell spans one finest
    # time sub-interval
    again = True
    while again:
        again = False
        for lid in list(tree.leaf_ids()):
            node = tree.nodes[lid]
            if node.level >= tree.max_level:
                continue
            if any(node.box.contains_point(w.x, w.y) for w in wells):
                tree.refine_cell(lid)
                again = True


def _record_level(
    tree: MeshTree,
    assembler: SlabAssembler,
    guess: StateVector,
    state: StateVector,
    newton: NewtonReport,
    level: int,
    wall: float,
) -> LevelRecord:
    rind = residual_indicator(assembler, guess)
    eind = error_indicator(tree, state)
    boxes = np.array(
        [
            (b.x_lo, b.x_hi, b.y_lo, b.y_hi, b.t_lo, b.t_hi)
            for b in (tree.nodes[lid].box for lid in tree.index_leaves().ids)
        ]
    )
    return LevelRecord(
        level=level,
        leaf_count=tree.leaf_count,
        newton=newton,
        wall_seconds=wall,
        residual_ind=rind.values,
        error_ind=eind.values,
        residual_threshold=select_threshold(rind.values, ThresholdMethod.LOG_MEAN),
        error_threshold=select_threshold(eind.values, ThresholdMethod.MEAN_LOG_MEAN_AVERAGE),
        marked=0,
        boxes=boxes,
        p_oil=state.p_oil.copy(),
        s_w=state.s_w.copy(),
        cell_levels=np.array([tree.nodes[lid].level for lid in tree.index_leaves().ids]),
    )


def _finish_slab(
    t_lo: float,
    t_hi: float,
    levels: list[LevelRecord],
    tree: MeshTree,
    assembler: SlabAssembler,
    state: StateVector,
) -> SlabResult:
    production = assembler.well_rates(state)
    injected = produced_w = produced_o = 0.0
    for rec in production:
        for row in rec["rows"]:
            if rec["kind"] == "rate_injector":
                injected += row["water_rate"] * assembler.model.water.rho_ref * row["dt"]
            else:
                produced_w += row["water_rate"] * assembler.model.water.rho_ref * row["dt"]
                produced_o += row["oil_rate"] * assembler.model.oil.rho_ref * row["dt"]
    return SlabResult(
        t_lo=t_lo,
        t_hi=t_hi,
        levels=levels,
        tree=tree,
        assembler=assembler,
        state=state,
        production=production,
        water_mass_start=assembler.inflow_water_mass(),
        water_mass_end=assembler.water_mass(state),
        injected_water_mass=injected,
        produced_water_mass=produced_w,
        produced_oil_mass=produced_o,
    )


def sequential_solve(setup: RunSetup) -> RunResult:
    """Adaptive run: coarse solve, then level-by-level refinement per slab.

    Intermediate non-convergence is tolerated (the next level re-solves);
    failure at the finest level raises SolveAbort with the partial result.
    """
    result = RunResult(mode="adaptive")
    inflow = SlabInflow.uniform(setup.model, setup.p_init, setup.s_init)
    for t_lo, t_hi, nt_slab in setup.slab_windows():
        slab_box = SpaceTimeBox(
            setup.domain.x_lo, setup.domain.x_hi, setup.domain.y_lo, setup.domain.y_hi, t_lo, t_hi
        )
        tree = MeshTree(
            slab_box, setup.nx, setup.ny, nt_slab, setup.ratios, dim=setup.dim, thickness=setup.thickness
        )
        _refine_well_columns(tree, setup.wells)

        t_start = time.perf_counter()
        assembler = SlabAssembler(tree, setup.model, setup.wells, inflow)
        guess = assembler.inflow_guess()
        state, nrep = newton_solve(assembler, guess, setup.newton)
        levels = [
            _record_level(tree, assembler, guess, state, nrep, 0, time.perf_counter() - t_start)
        ]
        if not nrep.converged and setup.max_level == 0:
            result.slabs.append(_finish_slab(t_lo, t_hi, levels, tree, assembler, state))
            raise SolveAbort(
                f"Newton failed at the finest level (slab [{t_lo}, {t_hi}], level 0)", result
            )

        for level in range(1, setup.max_level + 1):
            t_start = time.perf_counter()
            prev = levels[-1]
            plan: set[int] = set()
            if setup.marking in ("residual", "union"):
                plan |= mark_cells(
                    IndicatorField(prev.residual_ind, "residual"),
                    prev.residual_threshold,
                    tree,
                    setup.wells,
                )
            if setup.marking in ("error", "union"):
                plan |= mark_cells(
                    IndicatorField(prev.error_ind, "error"), prev.error_threshold, tree, setup.wells
                )
            prev.marked = len(plan)
            if plan:
                old_tree = tree.clone()
                apply_plan(tree, plan)
                guess = interpolate_solution(old_tree, state, tree)
                assembler = SlabAssembler(tree, setup.model, setup.wells, inflow)
                state, nrep = newton_solve(assembler, guess, setup.newton)
            else:
                guess = state
                nrep = NewtonReport(converged=levels[-1].newton.converged,
                                    residual_norms=[levels[-1].newton.residual_norms[-1]])
            levels.append(
                _record_level(
                    tree, assembler, guess, state, nrep, level, time.perf_counter() - t_start
                )
            )
            if level == setup.max_level and not nrep.converged:
                result.slabs.append(_finish_slab(t_lo, t_hi, levels, tree, assembler, state))
                raise SolveAbort(
                    f"Newton failed at the finest level (slab [{t_lo}, {t_hi}], level {level})",
                    result,
                )

        result.slabs.append(_finish_slab(t_lo, t_hi, levels, tree, assembler, state))
        inflow = SlabInflow.from_slab_end(tree, state, assembler)
    return result


def run_uniform(setup: RunSetup) -> RunResult:
    """Baseline: every cell refined to max_level, one monolithic solve per slab."""
    result = RunResult(mode="uniform")
    inflow = SlabInflow.uniform(setup.model, setup.p_init, setup.s_init)
    for t_lo, t_hi, nt_slab in setup.slab_windows():
        slab_box = SpaceTimeBox(
            setup.domain.x_lo, setup.domain.x_hi, setup.domain.y_lo, setup.domain.y_hi, t_lo, t_hi
        )
        tree = MeshTree(
            slab_box, setup.nx, setup.ny, nt_slab, setup.ratios, dim=setup.dim, thickness=setup.thickness
        )
        for _ in range(setup.max_level):
            for lid in list(tree.leaf_ids()):
                if tree.nodes[lid].level < tree.max_level:
                    tree.refine_cell(lid)

        t_start = time.perf_counter()
        assembler = SlabAssembler(tree, setup.model, setup.wells, inflow)
        guess = assembler.inflow_guess()
        state, nrep = newton_solve(assembler, guess, setup.newton)
        levels = [
            _record_level(
                tree, assembler, guess, state, nrep, setup.max_level, time.perf_counter() - t_start
            )
        ]
        result.slabs.append(_finish_slab(t_lo, t_hi, levels, tree, assembler, state))
        if not nrep.converged:
            raise SolveAbort(f"Newton failed on the uniform mesh (slab [{t_lo}, {t_hi}])", result)
        inflow = SlabInflow.from_slab_end(tree, state, assembler)
    return result


__all__ = [
    "ANALYSIS_RANGE",
    "IndicatorField",
    "LevelRecord",
    "RunResult",
    "RunSetup",
    "SlabResult",
    "SolveAbort",
    "ThresholdMethod",
    "apply_plan",
    "error_indicator",
    "interpolate_solution",
    "mark_cells",
    "residual_indicator",
    "run_uniform",
    "select_threshold",
    "sequential_solve",
]
