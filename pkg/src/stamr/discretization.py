"""Monolithic nonlinear residual and Jacobian for one space-time slab.

Unknowns are per-leaf oil pressure P_o (psi) and water saturation S_w,
interleaved as [P_0, S_0, P_1, S_1, ...] in leaf-index order. Velocities are
eliminated locally, so a face carries a two-point flux: an auxiliary flux
U~ = T * (potential difference) and the phase flux U = lambda*(upwind) * U~,
both in lb over the space-time face. Residuals are (total mass, water mass)
in lb per leaf. Temporal faces carry no Darcy flux; time coupling enters
through the accumulation term. Boundaries are no-flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Direction, FaceAdjacency, MeshError, MeshTree
from .petrophysics import (
    FluidRockModel,
    cap_pressure,
    dcap_pressure_dsw,
    ddensity_dp,
    density,
    drel_perm_dsw,
    rel_perm,
)

# md * psi / (cp * ft) -> ft/day
DARCY_CONST = 6.328e-3
# lb/ft^3 * ft -> psi
PSI_PER_PSF = 1.0 / 144.0


class AssemblyError(RuntimeError):
    """Mesh/state inconsistency detected during assembly."""


class ConfigurationError(ValueError):
    """Physically or geometrically invalid problem setup."""


@dataclass(frozen=True)
class Well:
    """Point well: rate-specified water injector or BHP-specified producer."""

    name: str
    kind: str  # "rate_injector" | "bhp_producer"
    x: float
    y: float
    control: float  # ft^3/day (injector) or psi (producer)
    radius: float = 0.25  # ft
    skin: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("rate_injector", "bhp_producer"):
            raise ConfigurationError(f"unknown well kind {self.kind!r}")
        if not math.isfinite(self.control):
            raise ConfigurationError(f"well {self.name}: control value must be finite")
        if self.radius <= 0.0:
            raise ConfigurationError(f"well {self.name}: radius must be positive")


@dataclass
class StateVector:
    """Per-leaf (P_o, S_w) in leaf-index order."""

    p_oil: np.ndarray
    s_w: np.ndarray

    def __post_init__(self) -> None:
        self.p_oil = np.asarray(self.p_oil, dtype=float)
        self.s_w = np.asarray(self.s_w, dtype=float)
        if self.p_oil.shape != self.s_w.shape:
            raise AssemblyError("p_oil and s_w must have the same length")

    def __len__(self) -> int:
        return self.p_oil.size

    def to_flat(self) -> np.ndarray:
        out = np.empty(2 * len(self), dtype=float)
        out[0::2] = self.p_oil
        out[1::2] = self.s_w
        return out

    @classmethod
    def from_flat(cls, x: np.ndarray) -> "StateVector":
        x = np.asarray(x, dtype=float)
        return cls(p_oil=x[0::2].copy(), s_w=x[1::2].copy())

    @classmethod
    def constant(cls, n: int, p: float, s: float) -> "StateVector":
        return cls(np.full(n, float(p)), np.full(n, float(s)))

    def copy(self) -> "StateVector":
        return StateVector(self.p_oil.copy(), self.s_w.copy())


@dataclass
class ResidualVector:
    """Per-leaf residuals in lb: total mass and water mass."""

    r_total: np.ndarray
    r_water: np.ndarray

    def to_flat(self) -> np.ndarray:
        out = np.empty(2 * self.r_total.size, dtype=float)
        out[0::2] = self.r_total
        out[1::2] = self.r_water
        return out

    @property
    def inf_norm(self) -> float:
        return float(max(np.max(np.abs(self.r_total)), np.max(np.abs(self.r_water))))


class SlabInflow:
    """Piecewise-constant spatial profile feeding a slab's start time.

    Each rectangle carries (P_o, S_w, phi); the water/total pore-mass
    densities derived from it are integrated over the footprints of the
    slab-start leaves, which makes mass bookkeeping telescope exactly across
    slabs.
    """

    def __init__(
        self,
        x_lo: np.ndarray,
        x_hi: np.ndarray,
        y_lo: np.ndarray,
        y_hi: np.ndarray,
        p_oil: np.ndarray,
        s_w: np.ndarray,
        phi: np.ndarray,
    ):
        self.x_lo = np.asarray(x_lo, dtype=float)
        self.x_hi = np.asarray(x_hi, dtype=float)
        self.y_lo = np.asarray(y_lo, dtype=float)
        self.y_hi = np.asarray(y_hi, dtype=float)
        self.p_oil = np.asarray(p_oil, dtype=float)
        self.s_w = np.asarray(s_w, dtype=float)
        self.phi = np.asarray(phi, dtype=float)

    @classmethod
    def uniform(cls, model: FluidRockModel, p: float, s: float) -> "SlabInflow":
        """Uniform initial condition; porosity varies at the rock-field resolution."""
        rock = model.rock
        nx, ny = rock.shape
        xs = rock.x0 + rock.dx * np.arange(nx + 1)
        ys = rock.y0 + rock.dy * np.arange(ny + 1)
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        ii = ii.ravel()
        jj = jj.ravel()
        k = ii.size
        return cls(
            xs[ii], xs[ii + 1], ys[jj], ys[jj + 1],
            np.full(k, float(p)), np.full(k, float(s)), rock.phi[ii, jj],
        )

    @classmethod
    def from_slab_end(cls, tree: MeshTree, state: StateVector, assembler: "SlabAssembler") -> "SlabInflow":
        """Profile at the slab's final time, from leaves touching it."""
        idx = assembler.index
        t_end = tree.domain.t_hi
        rows = [
            (k, tree.nodes[lid].box)
            for k, lid in enumerate(idx.ids)
            if abs(tree.nodes[lid].box.t_hi - t_end) <= 1e-12 * max(1.0, abs(t_end))
        ]
        ks = np.array([k for k, _ in rows], dtype=int)
        boxes = [b for _, b in rows]
        return cls(
            np.array([b.x_lo for b in boxes]),
            np.array([b.x_hi for b in boxes]),
            np.array([b.y_lo for b in boxes]),
            np.array([b.y_hi for b in boxes]),
            state.p_oil[ks],
            state.s_w[ks],
            assembler.phi_eff[ks],
        )

    def overlap_fractions(self, box) -> tuple[np.ndarray, np.ndarray]:
        """(rect indices, area fractions of ``box`` covered by each rect)."""
        ox = np.minimum(self.x_hi, box.x_hi) - np.maximum(self.x_lo, box.x_lo)
        oy = np.minimum(self.y_hi, box.y_hi) - np.maximum(self.y_lo, box.y_lo)
        area = np.maximum(ox, 0.0) * np.maximum(oy, 0.0)
        hit = area > 0.0
        return np.nonzero(hit)[0], area[hit] / box.spatial_area


def face_transmissibility(face: FaceAdjacency, tree: MeshTree, model: FluidRockModel) -> float:
    """Two-point space-time face transmissibility (ft^3 * cp / psi).

    T = beta * |e| * 2 / (dx_L / K_L + dx_R / K_R) with the full cell extents
    along the face axis, per-axis effective permeabilities, and |e| the
    space-time face measure.
    """
    if face.is_boundary or face.direction.axis == 2:
        raise AssemblyError("transmissibility is defined for interior spatial faces only")
    a = tree.nodes[face.left].box
    b = tree.nodes[face.right].box
    axis = face.direction.axis
    ka = model.rock.effective(a.x_lo, a.x_hi, a.y_lo, a.y_hi)[axis]
    kb = model.rock.effective(b.x_lo, b.x_hi, b.y_lo, b.y_hi)[axis]
    da = a.interval(axis)[1] - a.interval(axis)[0]
    db = b.interval(axis)[1] - b.interval(axis)[0]
    return DARCY_CONST * face.measure * 2.0 / (da / ka + db / kb)


class SlabAssembler:
    """Assembles R(x) and J(x) for one slab on a fixed mesh.

    Geometry, transmissibilities, past-overlap weights, inflow integrals, and
    well indices are precomputed at construction; ``residual``/``jacobian``
    are then pure functions of the interleaved state vector.
    """

    def __init__(
        self,
        tree: MeshTree,
        model: FluidRockModel,
        wells: tuple[Well, ...] | list[Well] = (),
        inflow: SlabInflow | None = None,
    ):
        self.tree = tree
        self.model = model
        self.wells = tuple(wells)
        self.index = tree.index_leaves()
        self.faces = tree.enumerate_faces()
        if inflow is None:
            inflow = SlabInflow.uniform(model, p=0.0, s=0.0)
        self.inflow = inflow
        self._setup_cells()
        self._setup_faces()
        self._setup_past()
        self._setup_inflow()
        self._setup_wells()

    # ------------------------------------------------------------ precompute

    def _setup_cells(self) -> None:
        tree, rock = self.tree, self.model.rock
        n = len(self.index)
        self.n_cells = n
        self.vol = np.empty(n)  # spatial volume, ft^3 (includes thickness)
        self.dt = np.empty(n)
        self.cx = np.empty(n)
        self.cy = np.empty(n)
        self.ct = np.empty(n)
        self.dx = np.empty(n)
        self.dy = np.empty(n)
        self.levels = np.empty(n, dtype=int)
        self.phi_eff = np.empty(n)
        self.kx_eff = np.empty(n)
        self.ky_eff = np.empty(n)
        for k, lid in enumerate(self.index.ids):
            node = tree.nodes[lid]
            b = node.box
            self.vol[k] = b.spatial_area * tree.thickness
            self.dt[k] = b.dt
            self.cx[k], self.cy[k], self.ct[k] = b.center()
            self.dx[k] = b.dx
            self.dy[k] = b.dy
            self.levels[k] = node.level
            kx, ky, phi = rock.effective(b.x_lo, b.x_hi, b.y_lo, b.y_hi)
            self.kx_eff[k] = kx
            self.ky_eff[k] = ky
            self.phi_eff[k] = phi
        # typical cell pore mass, used for absolute Newton tolerances
        self.mass_scale = float(np.mean(self.phi_eff * self.vol) * self.model.water.rho_ref)

    def _setup_faces(self) -> None:
        idx = self.index.index_of
        gx, gy = self.model.gravity
        L, R, T, G = [], [], [], []
        self.spatial_faces: list[FaceAdjacency] = []
        self._face_pos: dict[tuple[int, int, Direction], int] = {}
        for face in self.faces:
            if face.is_boundary or face.direction.axis == 2:
                continue
            f = len(L)
            self.spatial_faces.append(face)
            self._face_pos[(face.left, face.right, face.direction)] = f
            il, ir = idx[face.left], idx[face.right]
            L.append(il)
            R.append(ir)
            T.append(face_transmissibility(face, self.tree, self.model))
            # gravity head factor: rho_bar * G gives psi
            G.append(
                (gx * (self.cx[il] - self.cx[ir]) + gy * (self.cy[il] - self.cy[ir])) * PSI_PER_PSF
            )
        self.f_left = np.asarray(L, dtype=int)
        self.f_right = np.asarray(R, dtype=int)
        self.f_trans = np.asarray(T, dtype=float)
        self.f_grav = np.asarray(G, dtype=float)

    def _setup_past(self) -> None:
        idx = self.index.index_of
        fut, past, w = [], [], []
        for face in self.faces:
            if face.is_boundary or face.direction is not Direction.FUTURE:
                continue
            ip = idx[face.left]  # the earlier cell: FUTURE faces point left -> right in time
            if_ = idx[face.right]
            fut.append(if_)
            past.append(ip)
            w.append(face.spatial_measure / self.vol[if_])
        self.p_fut = np.asarray(fut, dtype=int)
        self.p_past = np.asarray(past, dtype=int)
        self.p_w = np.asarray(w, dtype=float)
        covered = np.zeros(self.n_cells)
        np.add.at(covered, self.p_fut, self.p_w)
        t0 = self.tree.domain.t_lo
        starts = np.array(
            [abs(self.tree.nodes[lid].box.t_lo - t0) <= 1e-12 * max(1.0, abs(t0) + 1.0) for lid in self.index.ids]
        )
        self.start_mask = starts
        interior = ~starts
        if np.any(np.abs(covered[interior] - 1.0) > 1e-12):
            bad = int(np.nonzero(interior & (np.abs(covered - 1.0) > 1e-12))[0][0])
            raise AssemblyError(
                f"past-overlap fractions of leaf {self.index.ids[bad]} sum to {covered[bad]}, expected 1"
            )
        if np.any(covered[starts] != 0.0):
            raise AssemblyError("slab-start leaf has an in-slab past neighbor")

    def _setup_inflow(self) -> None:
        model = self.model
        n = self.n_cells
        self.m_w_in = np.zeros(n)  # (phi rho_w S_w) averaged over footprint, lb/ft^3
        self.m_t_in = np.zeros(n)
        self.guess_p = np.empty(n)
        self.guess_s = np.empty(n)
        pw = model.water_pressure(self.inflow.p_oil, self.inflow.s_w)
        rho_w = density(model.water, pw)
        rho_o = density(model.oil, self.inflow.p_oil)
        m_w = self.inflow.phi * rho_w * self.inflow.s_w
        m_t = m_w + self.inflow.phi * rho_o * (1.0 - self.inflow.s_w)
        for k, lid in enumerate(self.index.ids):
            box = self.tree.nodes[lid].box
            hit, frac = self.inflow.overlap_fractions(box)
            if hit.size == 0 or abs(frac.sum() - 1.0) > 1e-10:
                raise AssemblyError(
                    f"inflow profile does not cover leaf {lid} (coverage {frac.sum() if hit.size else 0.0})"
                )
            self.guess_p[k] = float(frac @ self.inflow.p_oil[hit])
            self.guess_s[k] = float(frac @ self.inflow.s_w[hit])
            if self.start_mask[k]:
                self.m_w_in[k] = float(frac @ m_w[hit])
                self.m_t_in[k] = float(frac @ m_t[hit])

    def _setup_wells(self) -> None:
        dom = self.tree.domain
        self.well_cells: list[np.ndarray] = []
        self.well_wi: list[np.ndarray] = []
        for well in self.wells:
            if not (dom.x_lo <= well.x < dom.x_hi and dom.y_lo <= well.y < dom.y_hi):
                raise ConfigurationError(f"well {well.name} at ({well.x}, {well.y}) lies outside the domain")
            cells = [
                k
                for k, lid in enumerate(self.index.ids)
                if self.tree.nodes[lid].box.contains_point(well.x, well.y)
            ]
            cells = np.asarray(sorted(cells, key=lambda k: self.ct[k]), dtype=int)
            if cells.size == 0:
                raise ConfigurationError(f"well {well.name} is not contained in any leaf")
            wi = np.array([self._peaceman_index(well, k) for k in cells])
            self.well_cells.append(cells)
            self.well_wi.append(wi)

    def _peaceman_index(self, well: Well, k: int) -> float:
        kx, ky = self.kx_eff[k], self.ky_eff[k]
        dx, dy = self.dx[k], self.dy[k]
        ratio = ky / kx
        r_eq = 0.28 * math.sqrt(math.sqrt(ratio) * dx**2 + math.sqrt(1.0 / ratio) * dy**2)
        r_eq /= ratio**0.25 + (1.0 / ratio) ** 0.25
        arg = r_eq / well.radius
        if arg <= 1.0 and well.kind == "bhp_producer":
            raise ConfigurationError(
                f"well {well.name}: equivalent radius {r_eq:.4g} ft does not exceed the "
                f"wellbore radius {well.radius} ft in cell of size {dx} x {dy} ft"
            )
        denom = math.log(arg) + well.skin
        if denom <= 0.0 and well.kind == "bhp_producer":
            raise ConfigurationError(f"well {well.name}: non-positive Peaceman denominator")
        h = self.tree.thickness
        if denom <= 0.0:
            return 0.0  # rate injectors never use the index in the residual
        return DARCY_CONST * 2.0 * math.pi * math.sqrt(kx * ky) * h / denom

    # ------------------------------------------------------- state evaluation

    def _eval_state(self, x: np.ndarray) -> dict[str, np.ndarray]:
        model = self.model
        p = x[0::2]
        s = x[1::2]
        if p.size != self.n_cells:
            raise AssemblyError(f"state has {p.size} cells, mesh has {self.n_cells}")
        pc = cap_pressure(model.capillary, model.relperm.s_wirr, s)
        dpc = dcap_pressure_dsw(model.capillary, model.relperm.s_wirr, s)
        rho_o = density(model.oil, p)
        rho_w = density(model.water, p - pc)
        drho_o = ddensity_dp(model.oil, p)
        drho_w_dp = ddensity_dp(model.water, p - pc)
        return {
            "p": p,
            "s": s,
            "pc": pc,
            "dpc": dpc,
            "rho_o": rho_o,
            "rho_w": rho_w,
            "drho_o": drho_o,
            "drho_w_dp": drho_w_dp,
            "drho_w_ds": -drho_w_dp * dpc,
            "krw": rel_perm(model.relperm, "water", s),
            "kro": rel_perm(model.relperm, "oil", s),
            "dkrw": drel_perm_dsw(model.relperm, "water", s),
            "dkro": drel_perm_dsw(model.relperm, "oil", s),
        }

    # ------------------------------------------------------------- residual

    def residual_flat(self, x: np.ndarray) -> np.ndarray:
        return self.assemble_residual_from_flat(x).to_flat()

    def assemble_residual(self, state: StateVector) -> ResidualVector:
        return self.assemble_residual_from_flat(state.to_flat())

    def assemble_residual_from_flat(self, x: np.ndarray) -> ResidualVector:
        ev = self._eval_state(np.asarray(x, dtype=float))
        model = self.model
        phi = self.phi_eff
        m_w = phi * ev["rho_w"] * ev["s"]
        m_t = m_w + phi * ev["rho_o"] * (1.0 - ev["s"])

        r_w = m_w * self.vol
        r_t = m_t * self.vol
        r_w -= self.m_w_in * self.vol
        r_t -= self.m_t_in * self.vol
        if self.p_fut.size:
            np.add.at(r_w, self.p_fut, -self.p_w * self.vol[self.p_fut] * m_w[self.p_past])
            np.add.at(r_t, self.p_fut, -self.p_w * self.vol[self.p_fut] * m_t[self.p_past])

        if self.f_left.size:
            u_o, u_w, _, _ = self._face_fluxes(ev)
            np.add.at(r_t, self.f_left, u_o + u_w)
            np.add.at(r_t, self.f_right, -(u_o + u_w))
            np.add.at(r_w, self.f_left, u_w)
            np.add.at(r_w, self.f_right, -u_w)

        for well, cells, wi in zip(self.wells, self.well_cells, self.well_wi):
            q_t, q_w = self._well_masses(well, cells, wi, ev)
            # R = A + div - q_source; production enters with positive sign
            r_t[cells] -= q_t
            r_w[cells] -= q_w
        return ResidualVector(r_total=r_t, r_water=r_w)

    def _face_fluxes(self, ev) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(U_o, U_w, U~_o, U~_w) on all interior spatial faces."""
        li, ri = self.f_left, self.f_right
        T, G = self.f_trans, self.f_grav
        model = self.model
        rbo = 0.5 * (ev["rho_o"][li] + ev["rho_o"][ri])
        rbw = 0.5 * (ev["rho_w"][li] + ev["rho_w"][ri])
        ut_o = T * (ev["p"][li] - ev["p"][ri] - rbo * G)
        pw = ev["p"] - ev["pc"]
        ut_w = T * (pw[li] - pw[ri] - rbw * G)
        up_o = np.where(ut_o > 0.0, li, ri)
        up_w = np.where(ut_w > 0.0, li, ri)
        lam_o = rbo * ev["kro"][up_o] / model.oil.mu
        lam_w = rbw * ev["krw"][up_w] / model.water.mu
        return lam_o * ut_o, lam_w * ut_w, ut_o, ut_w

    def _well_masses(self, well: Well, cells: np.ndarray, wi: np.ndarray, ev):
        """Source masses (q_total, q_water) in lb per host leaf; positive = into cell."""
        dt = self.dt[cells]
        if well.kind == "rate_injector":
            q_w = well.control * self.model.water.rho_ref * dt
            return q_w, q_w
        draw = ev["p"][cells] - well.control
        lam_o = ev["rho_o"][cells] * ev["kro"][cells] / self.model.oil.mu
        lam_w = ev["rho_w"][cells] * ev["krw"][cells] / self.model.water.mu
        q_o = -wi * lam_o * draw * dt
        q_w = -wi * lam_w * draw * dt
        return q_o + q_w, q_w

    # -------------------------------------------------------------- jacobian

    def jacobian_flat(self, x: np.ndarray) -> sp.csr_matrix:
        ev = self._eval_state(np.asarray(x, dtype=float))
        model = self.model
        phi = self.phi_eff
        n2 = 2 * self.n_cells
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []

        def push(r, c, v):
            rows.append(np.asarray(r, dtype=int))
            cols.append(np.asarray(c, dtype=int))
            vals.append(np.asarray(v, dtype=float))

        # accumulation: own-cell block
        s = ev["s"]
        dmw_dp = phi * s * ev["drho_w_dp"]
        dmw_ds = phi * (ev["rho_w"] + s * ev["drho_w_ds"])
        dmt_dp = dmw_dp + phi * (1.0 - s) * ev["drho_o"]
        dmt_ds = dmw_ds - phi * ev["rho_o"]
        ids = np.arange(self.n_cells)
        push(2 * ids, 2 * ids, dmt_dp * self.vol)
        push(2 * ids, 2 * ids + 1, dmt_ds * self.vol)
        push(2 * ids + 1, 2 * ids, dmw_dp * self.vol)
        push(2 * ids + 1, 2 * ids + 1, dmw_ds * self.vol)

        # accumulation: past-neighbor coupling (and its structurally symmetric
        # zero mirror so the pattern follows the face adjacency)
        if self.p_fut.size:
            fut, past, w = self.p_fut, self.p_past, self.p_w
            scale = -w * self.vol[fut]
            push(2 * fut, 2 * past, scale * dmt_dp[past])
            push(2 * fut, 2 * past + 1, scale * dmt_ds[past])
            push(2 * fut + 1, 2 * past, scale * dmw_dp[past])
            push(2 * fut + 1, 2 * past + 1, scale * dmw_ds[past])
            zero = np.zeros(fut.size)
            for dr in (0, 1):
                for dc in (0, 1):
                    push(2 * past + dr, 2 * fut + dc, zero)

        # fluxes
        if self.f_left.size:
            li, ri = self.f_left, self.f_right
            T, G = self.f_trans, self.f_grav
            rbo = 0.5 * (ev["rho_o"][li] + ev["rho_o"][ri])
            rbw = 0.5 * (ev["rho_w"][li] + ev["rho_w"][ri])
            ut_o = T * (ev["p"][li] - ev["p"][ri] - rbo * G)
            pw = ev["p"] - ev["pc"]
            ut_w = T * (pw[li] - pw[ri] - rbw * G)
            left_up_o = ut_o > 0.0
            left_up_w = ut_w > 0.0
            up_o = np.where(left_up_o, li, ri)
            up_w = np.where(left_up_w, li, ri)
            lam_o = rbo * ev["kro"][up_o] / model.oil.mu
            lam_w = rbw * ev["krw"][up_w] / model.water.mu
            u_o = lam_o * ut_o
            u_w = lam_w * ut_w

            dut_o_pl = T * (1.0 - 0.5 * ev["drho_o"][li] * G)
            dut_o_pr = T * (-1.0 - 0.5 * ev["drho_o"][ri] * G)
            dut_w_pl = T * (1.0 - 0.5 * ev["drho_w_dp"][li] * G)
            dut_w_pr = T * (-1.0 - 0.5 * ev["drho_w_dp"][ri] * G)
            dut_w_sl = T * (-ev["dpc"][li] - 0.5 * ev["drho_w_ds"][li] * G)
            dut_w_sr = T * (ev["dpc"][ri] - 0.5 * ev["drho_w_ds"][ri] * G)

            kro_up = ev["kro"][up_o]
            krw_up = ev["krw"][up_w]
            dlam_o_pl = 0.5 * ev["drho_o"][li] * kro_up / model.oil.mu
            dlam_o_pr = 0.5 * ev["drho_o"][ri] * kro_up / model.oil.mu
            dlam_o_sl = np.where(left_up_o, rbo * ev["dkro"][li] / model.oil.mu, 0.0)
            dlam_o_sr = np.where(~left_up_o, rbo * ev["dkro"][ri] / model.oil.mu, 0.0)
            dlam_w_pl = 0.5 * ev["drho_w_dp"][li] * krw_up / model.water.mu
            dlam_w_pr = 0.5 * ev["drho_w_dp"][ri] * krw_up / model.water.mu
            dlam_w_sl = 0.5 * ev["drho_w_ds"][li] * krw_up / model.water.mu + np.where(
                left_up_w, rbw * ev["dkrw"][li] / model.water.mu, 0.0
            )
            dlam_w_sr = 0.5 * ev["drho_w_ds"][ri] * krw_up / model.water.mu + np.where(
                ~left_up_w, rbw * ev["dkrw"][ri] / model.water.mu, 0.0
            )

            du_o = {
                "pl": lam_o * dut_o_pl + ut_o * dlam_o_pl,
                "pr": lam_o * dut_o_pr + ut_o * dlam_o_pr,
                "sl": ut_o * dlam_o_sl,
                "sr": ut_o * dlam_o_sr,
            }
            du_w = {
                "pl": lam_w * dut_w_pl + ut_w * dlam_w_pl,
                "pr": lam_w * dut_w_pr + ut_w * dlam_w_pr,
                "sl": lam_w * dut_w_sl + ut_w * dlam_w_sl,
                "sr": lam_w * dut_w_sr + ut_w * dlam_w_sr,
            }
            col_of = {"pl": 2 * li, "sl": 2 * li + 1, "pr": 2 * ri, "sr": 2 * ri + 1}
            for key in ("pl", "sl", "pr", "sr"):
                dtot = du_o[key] + du_w[key]
                push(2 * li, col_of[key], dtot)
                push(2 * ri, col_of[key], -dtot)
                push(2 * li + 1, col_of[key], du_w[key])
                push(2 * ri + 1, col_of[key], -du_w[key])

        # wells (producers couple to their host cell; injectors are constant)
        for well, cells, wi in zip(self.wells, self.well_cells, self.well_wi):
            if well.kind != "bhp_producer":
                continue
            dt = self.dt[cells]
            draw = ev["p"][cells] - well.control
            lam_o = ev["rho_o"][cells] * ev["kro"][cells] / model.oil.mu
            lam_w = ev["rho_w"][cells] * ev["krw"][cells] / model.water.mu
            dlam_o_p = ev["drho_o"][cells] * ev["kro"][cells] / model.oil.mu
            dlam_o_s = ev["rho_o"][cells] * ev["dkro"][cells] / model.oil.mu
            dlam_w_p = ev["drho_w_dp"][cells] * ev["krw"][cells] / model.water.mu
            dlam_w_s = (
                ev["drho_w_ds"][cells] * ev["krw"][cells] + ev["rho_w"][cells] * ev["dkrw"][cells]
            ) / model.water.mu
            # residual holds -q with q = -WI lam draw dt, i.e. +WI lam draw dt
            dq_w_p = wi * dt * (lam_w + draw * dlam_w_p)
            dq_w_s = wi * dt * draw * dlam_w_s
            dq_o_p = wi * dt * (lam_o + draw * dlam_o_p)
            dq_o_s = wi * dt * draw * dlam_o_s
            push(2 * cells, 2 * cells, dq_o_p + dq_w_p)
            push(2 * cells, 2 * cells + 1, dq_o_s + dq_w_s)
            push(2 * cells + 1, 2 * cells, dq_w_p)
            push(2 * cells + 1, 2 * cells + 1, dq_w_s)

        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n2, n2)
        )
        return mat.tocsr()

    def assemble_jacobian(self, state: StateVector) -> sp.csr_matrix:
        return self.jacobian_flat(state.to_flat())

    # ------------------------------------------------------- per-item queries

    def inflow_guess(self) -> StateVector:
        """Per-leaf footprint average of the inflow profile (the slab's initial guess)."""
        return StateVector(self.guess_p.copy(), self.guess_s.copy())

    def phase_flux(self, face: FaceAdjacency, state: StateVector) -> tuple[float, float, float, float]:
        """(U~_o, U~_w, U_o, U_w) in lb over one interior spatial face."""
        key = (face.left, face.right, face.direction)
        if key not in self._face_pos:
            raise AssemblyError(f"face {key} is not an interior spatial face of this mesh")
        f = self._face_pos[key]
        ev = self._eval_state(state.to_flat())
        u_o, u_w, ut_o, ut_w = self._face_fluxes(ev)
        return float(ut_o[f]), float(ut_w[f]), float(u_o[f]), float(u_w[f])

    def accumulation(self, leaf_id: int, state: StateVector) -> tuple[float, float]:
        """(A_total, A_water) in lb for one leaf against its past state."""
        k = self.index.index_of[leaf_id]
        ev = self._eval_state(state.to_flat())
        m_w = self.phi_eff * ev["rho_w"] * ev["s"]
        m_t = m_w + self.phi_eff * ev["rho_o"] * (1.0 - ev["s"])
        a_w = m_w[k] * self.vol[k]
        a_t = m_t[k] * self.vol[k]
        if self.start_mask[k]:
            a_w -= self.m_w_in[k] * self.vol[k]
            a_t -= self.m_t_in[k] * self.vol[k]
        else:
            sel = self.p_fut == k
            a_w -= float(np.sum(self.p_w[sel] * m_w[self.p_past[sel]])) * self.vol[k]
            a_t -= float(np.sum(self.p_w[sel] * m_t[self.p_past[sel]])) * self.vol[k]
        return a_t, a_w

    def well_source(self, well_index: int, leaf_id: int, state: StateVector) -> tuple[float, float]:
        """(q_total, q_water) in lb added to one leaf by one well."""
        k = self.index.index_of[leaf_id]
        cells = self.well_cells[well_index]
        pos = np.nonzero(cells == k)[0]
        if pos.size == 0:
            return 0.0, 0.0
        ev = self._eval_state(state.to_flat())
        q_t, q_w = self._well_masses(
            self.wells[well_index], cells[pos], self.well_wi[well_index][pos], ev
        )
        return float(q_t[0]), float(q_w[0])

    def well_rates(self, state: StateVector) -> list[dict]:
        """Per well, per host leaf: volumetric rates (ft^3/day at reference
        density) and bottom-hole pressure. Producers report production as
        positive; the injector BHP estimate uses total mobility."""
        ev = self._eval_state(state.to_flat())
        out = []
        for well, cells, wi in zip(self.wells, self.well_cells, self.well_wi):
            rows = []
            for kk, cell in enumerate(cells):
                dt = self.dt[cell]
                t_end = self.ct[cell] + 0.5 * dt
                if well.kind == "rate_injector":
                    lam_t = (
                        ev["rho_w"][cell] * ev["krw"][cell] / self.model.water.mu
                        + ev["rho_o"][cell] * ev["kro"][cell] / self.model.oil.mu
                    )
                    bhp = ev["p"][cell]
                    if wi[kk] > 0.0 and lam_t > 0.0:
                        bhp += well.control * self.model.water.rho_ref / (wi[kk] * lam_t)
                    rows.append(
                        {
                            "t_end": float(t_end),
                            "dt": float(dt),
                            "water_rate": well.control,
                            "oil_rate": 0.0,
                            "bhp": float(bhp),
                        }
                    )
                else:
                    draw = ev["p"][cell] - well.control
                    lam_o = ev["rho_o"][cell] * ev["kro"][cell] / self.model.oil.mu
                    lam_w = ev["rho_w"][cell] * ev["krw"][cell] / self.model.water.mu
                    q_o = wi[kk] * lam_o * draw  # lb/day produced
                    q_w = wi[kk] * lam_w * draw
                    rows.append(
                        {
                            "t_end": float(t_end),
                            "dt": float(dt),
                            "water_rate": float(q_w / self.model.water.rho_ref),
                            "oil_rate": float(q_o / self.model.oil.rho_ref),
                            "bhp": float(well.control),
                        }
                    )
            out.append({"well": well.name, "kind": well.kind, "rows": rows})
        return out

    def water_mass(self, state: StateVector) -> float:
        """Water mass (lb) in the slab's final-time spatial profile."""
        ev = self._eval_state(state.to_flat())
        t_end = self.tree.domain.t_hi
        ends = np.array(
            [
                abs(self.tree.nodes[lid].box.t_hi - t_end) <= 1e-12 * max(1.0, abs(t_end))
                for lid in self.index.ids
            ]
        )
        m_w = self.phi_eff * ev["rho_w"] * ev["s"]
        return float(np.sum(m_w[ends] * self.vol[ends]))

    def inflow_water_mass(self) -> float:
        """Water mass (lb) in the slab's start-time profile."""
        return float(np.sum(self.m_w_in[self.start_mask] * self.vol[self.start_mask]))


__all__ = [
    "AssemblyError",
    "ConfigurationError",
    "DARCY_CONST",
    "ResidualVector",
    "SlabAssembler",
    "SlabInflow",
    "StateVector",
    "Well",
    "face_transmissibility",
]
