"""Axisymmetric finite-volume solver for the reactive duct channel.

The bulk field lives on an (rho, z) cell-centred mesh; bound complexes live on
the wall faces of the receiver ring. One time step is operator split:

1. explicit first-order upwind advection in the Poiseuille profile,
2. backward-Euler diffusion (axis regularity, reflective wall, zero-gradient
   inlet, advective-only outlet),
3. closed-form local bulk/receptor exchange on each receiver wall cell,
4. exact first-order decay ``exp(-kappa*dt)``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import ChannelParams, FixedGeometry, TimeGrid, validate_params
from . import _kernels as K

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class ResolutionError(SolverError):
    pass


class PositivityError(SolverError):
    pass


class BlowupError(SolverError):
    def __init__(self, t: float, message: str):
        super().__init__(message)
        self.t = t


def poiseuille(rho, v_bar: float, a_c: float):
    return 2.0 * v_bar * (1.0 - (np.asarray(rho) / a_c) ** 2)


@dataclass(frozen=True)
class Mesh:
    N_rho: int = 24
    N_z: int = 192
    geometry: FixedGeometry = field(default_factory=FixedGeometry)

    def __post_init__(self):
        if self.N_rho < 2 or self.N_z < 3:
            raise ValueError("mesh needs at least 2 radial and 3 axial cells")

    @property
    def d_rho(self) -> float:
        return self.geometry.a_c / self.N_rho

    @property
    def d_z(self) -> float:
        return self.geometry.L / self.N_z

    @property
    def rho(self) -> np.ndarray:
        return (np.arange(self.N_rho) + 0.5) * self.d_rho

    @property
    def z(self) -> np.ndarray:
        return (np.arange(self.N_z) + 0.5) * self.d_z

    @property
    def row_volume(self) -> np.ndarray:
        """Volume of one annular cell in each radial row."""
        return 2.0 * math.pi * self.rho * self.d_rho * self.d_z

    @property
    def volumes(self) -> np.ndarray:
        return np.repeat(self.row_volume[:, None], self.N_z, axis=1)

    def refined(self, factor: int = 2) -> "Mesh":
        return replace(self, N_rho=self.N_rho * factor, N_z=self.N_z * factor)

    def receiver_cells(self, p: ChannelParams):
        """Wall cells overlapping the ring and the ring area each one carries.

        Areas use the exact axial overlap between each cell and
        ``[z_rx - ell_z/2, z_rx + ell_z/2]`` so the total equals
        ``2*pi*a_c*ell_z`` and varies smoothly with ``z_rx`` and ``ell_z``.
        """
        lo, hi = p.z_rx - p.ell_z / 2, p.z_rx + p.ell_z / 2
        faces = np.arange(self.N_z + 1) * self.d_z
        overlap = np.clip(np.minimum(faces[1:], hi) - np.maximum(faces[:-1], lo), 0.0, None)
        idx = np.nonzero(overlap > 0)[0].astype(np.int64)
        area = 2.0 * math.pi * self.geometry.a_c * overlap[idx]
        return idx, area

    def to_dict(self) -> dict:
        return {"N_rho": self.N_rho, "N_z": self.N_z}


@dataclass
class SolverState:
    c: np.ndarray
    C_surf: np.ndarray
    t_now: float = 0.0
    degraded: float = 0.0
    outflow: float = 0.0
    bound_events: float = 0.0
    clamp: float = 0.0
    last_rate: float = 0.0

    def copy(self) -> "SolverState":
        return replace(self, c=self.c.copy(), C_surf=self.C_surf.copy())

    def _diag(self) -> np.ndarray:
        d = np.zeros(5)
        d[K.DEGRADED] = self.degraded
        d[K.OUTFLOW] = self.outflow
        d[K.FORWARD] = self.bound_events
        d[K.CLAMP] = self.clamp
        return d

    def _absorb(self, d: np.ndarray, dt: float):
        self.degraded = float(d[K.DEGRADED])
        self.outflow = float(d[K.OUTFLOW])
        self.bound_events = float(d[K.FORWARD])
        self.clamp = float(d[K.CLAMP])
        self.last_rate = float(d[K.LAST_FORWARD]) / dt


@dataclass(frozen=True)
class Budget:
    bulk: float
    bound: float
    degraded: float
    outflow: float

    @property
    def total(self) -> float:
        return self.bulk + self.bound + self.degraded + self.outflow


@dataclass(frozen=True)
class CirWaveform:
    params: ChannelParams
    grid: TimeGrid
    h: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.h.shape != (self.grid.N_s,):
            raise ValueError(f"h has shape {self.h.shape}, grid expects ({self.grid.N_s},)")


class DuctSolver:
    """Precomputed operators for one (parameters, geometry, mesh) triple.

    ``flow=False`` drops advection, ``closed_outlet=True`` keeps molecules that
    reach the outlet inside the duct, ``binding=False`` turns the receiver
    into a reflecting wall. All three exist for verification runs.
    """

    def __init__(self, p: ChannelParams, mesh: Mesh | None = None, *,
                 flow: bool = True, closed_outlet: bool = False, binding: bool = True,
                 receiver: bool = True):
        self.mesh = mesh or Mesh()
        self.geometry = self.mesh.geometry
        self.p = validate_params(p, self.geometry)
        self.flow = flow
        self.closed_outlet = closed_outlet
        self.binding = binding and receiver
        g, m = self.geometry, self.mesh
        if receiver:
            self.rx_j, self.rx_A = m.receiver_cells(p)
        else:
            self.rx_j, self.rx_A = np.zeros(0, dtype=np.int64), np.zeros(0)
        self.rx_r = self.rx_A / m.row_volume[-1]
        self.velocity = poiseuille(m.rho, p.v_bar, g.a_c) if flow else np.zeros(m.N_rho)

        # radial operator L = R^-1 S / d_rho^2, diagonalised through its symmetric form
        rho_face = np.arange(m.N_rho + 1) * m.d_rho
        rho_face[-1] = 0.0  # reflective wall: no diffusive flux
        S = np.zeros((m.N_rho, m.N_rho))
        for i in range(m.N_rho):
            S[i, i] = -(rho_face[i] + rho_face[i + 1])
            if i + 1 < m.N_rho:
                S[i, i + 1] = S[i + 1, i] = rho_face[i + 1]
        r_half = np.sqrt(m.rho)
        lam, U = np.linalg.eigh(S / np.outer(r_half, r_half))
        self._lam = lam / m.d_rho**2
        self._P = np.ascontiguousarray(U / r_half[:, None])
        self._Pinv = np.ascontiguousarray(U.T * r_half[None, :])
        self._dt = None

    # time step selection -------------------------------------------------

    def max_dt(self, grid_dt: float | None = None) -> float:
        m, p = self.mesh, self.p
        limits = [0.25 * (self.geometry.a_c**2 / (4 * p.D)) / m.N_rho**2]
        vmax = float(self.velocity.max()) if self.flow else 0.0
        if vmax > 0:
            limits.append(0.5 * m.d_z / vmax)
        if grid_dt is not None:
            limits.append(grid_dt)
        return min(limits)

    def _prepare(self, dt: float):
        if self._dt == dt:
            return
        m, D = self.mesh, self.p.D
        a = D * dt / m.d_z**2
        main = np.empty((m.N_rho, m.N_z))
        main[:] = 1.0 - D * dt * self._lam[:, None] + 2 * a
        main[:, 0] -= a
        main[:, -1] -= a
        cp = np.zeros_like(main)
        den = np.zeros_like(main)
        den[:, 0] = main[:, 0]
        cp[:, 0] = -a / den[:, 0]
        for j in range(1, m.N_z):
            den[:, j] = main[:, j] + a * cp[:, j - 1]
            cp[:, j] = -a / den[:, j]
        self._cp, self._den, self._off = cp, den, -a
        self._nu = np.ascontiguousarray(self.velocity * dt / m.d_z)
        self._decay = math.exp(-self.p.kappa * dt)
        self._dt = dt

    # state -----------------------------------------------------------------

    def init_state(self) -> SolverState:
        g, m = self.geometry, self.mesh
        R, Z = np.meshgrid(m.rho, m.z, indexing="ij")
        inside = R**2 + (Z - g.z_tx) ** 2 <= g.a_tx**2
        n_in = int(inside.sum())
        if n_in < 4:
            raise ResolutionError(f"transmitter ball covers only {n_in} cells; refine the mesh")
        c = np.where(inside, g.N_0 / g.V_tx, 0.0)
        c *= g.N_0 / float((c * m.volumes).sum())
        return SolverState(c=c, C_surf=np.zeros(len(self.rx_j)))

    def budget(self, s: SolverState) -> Budget:
        bulk = float(K.row_mass(s.c, self.mesh.row_volume))
        bound = float(np.dot(s.C_surf, self.rx_A))
        return Budget(bulk, bound, s.degraded, s.outflow)

    def binding_flux(self, s: SolverState) -> float:
        """Instantaneous ``sum k_f c (B_tot - C) A`` over the receiver wall cells."""
        if not len(self.rx_j):
            return 0.0
        c_wall = s.c[-1, self.rx_j]
        return float(np.sum(self.p.k_f * c_wall * (self.p.B_tot - s.C_surf) * self.rx_A))

    def advance(self, s: SolverState, dt: float, n_steps: int = 1) -> SolverState:
        if not dt > 0:
            raise ValueError("dt must be positive")
        vmax = float(self.velocity.max())
        if vmax > 0 and dt > 0.5 * self.mesh.d_z / vmax * (1 + 1e-12):
            raise ValueError(f"dt={dt:.3e} s violates the advective CFL limit")
        self._prepare(dt)
        p = self.p
        d = s._diag()
        status = K.advance(s.c, s.C_surf, int(n_steps), dt, self._nu, self.mesh.row_volume,
                           self.closed_outlet, self._P, self._Pinv, self._cp, self._den,
                           self._off, self.rx_j, self.rx_r, self.rx_A, p.k_f, p.k_r, p.B_tot,
                           self._decay, self.binding, d)
        if status == K.NEGATIVE_BULK:
            raise PositivityError(f"negative concentration beyond tolerance near t={s.t_now:.4e} s")
        if status == K.NON_FINITE:
            raise BlowupError(s.t_now, f"non-finite concentration near t={s.t_now:.4e} s")
        s._absorb(d, dt)
        s.t_now += n_steps * dt
        return s

    def substeps(self, grid: TimeGrid) -> tuple[int, float]:
        n = max(1, math.ceil(grid.dt / self.max_dt(grid.dt) - 1e-9))
        return n, grid.dt / n

    def solve(self, grid: TimeGrid | None = None, log_path=None) -> CirWaveform:
        """Integrate to ``grid.t_end`` and return the CIR.

        ``h`` at each grid time is the forward-binding count of the substep
        ending there divided by its length, per released molecule.
        """
        grid = grid or TimeGrid()
        n_sub, dt = self.substeps(grid)
        s = self.init_state()
        N_0 = self.geometry.N_0
        h = np.zeros(grid.N_s)
        rows = []
        for ell, t_l in enumerate(grid.t):
            self.advance(s, dt, n_sub)
            s.t_now = float(t_l)
            h[ell] = s.last_rate / N_0
            if not math.isfinite(h[ell]):
                raise BlowupError(float(t_l), f"non-finite CIR value at t={t_l:.4e} s")
            b = self.budget(s)
            rows.append((float(t_l), b.bulk, b.bound, b.degraded, b.outflow, s.clamp))
        if log_path is not None:
            write_budget_log(log_path, rows)
        b = self.budget(s)
        meta = {
            "substeps": n_sub,
            "dt": dt,
            "mesh": self.mesh.to_dict(),
            "budget_defect": max(abs(r[1] + r[2] + r[3] + r[4] - N_0) for r in rows) / N_0,
            "clamp": s.clamp,
            "final_budget": {"bulk": b.bulk, "bound": b.bound, "degraded": b.degraded,
                             "outflow": b.outflow},
        }
        self.last_budget_rows = rows
        return CirWaveform(self.p, grid, h, meta)


def write_budget_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bulk", "bound", "degraded", "outflow", "clamp"])
        for r in rows:
            w.writerow([f"{x:.17g}" for x in r])


# functional surface ---------------------------------------------------------

def init_state(p: ChannelParams, g: FixedGeometry | None = None, m: Mesh | None = None) -> SolverState:
    m = m or Mesh(geometry=g or FixedGeometry())
    return DuctSolver(p, m).init_state()


def mass_budget(solver: DuctSolver, s: SolverState) -> Budget:
    return solver.budget(s)


def solve_cir(p: ChannelParams, g: FixedGeometry | None = None, grid: TimeGrid | None = None,
              m: Mesh | None = None, log_path=None) -> CirWaveform:
    if m is None:
        m = Mesh(geometry=g or FixedGeometry())
    elif g is not None and m.geometry != g:
        m = replace(m, geometry=g)
    return DuctSolver(p, m).solve(grid, log_path=log_path)
