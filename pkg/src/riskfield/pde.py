"""Explicit finite-volume solver for the risk transmission equation

    dR/dt = div(D grad R) - div(v R) + Q - lambda R

on the cell-centred grid, with closed (zero normal flux) boundaries and a
quadratic sponge band in front of the outflow edge.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, ScalarField, VectorField
from .ingest import HEAVY_CLASSES, Frame, Recording
from .shadow import (EgoMissing, OcclusionWindow, ShadowMask, compute_shadow_mask,
                     hidden_agent_ids)
from .sources import (MergeTopology, SourceParams, observed_frame, q_merge, q_occ, q_veh,
                      velocity_field)

log = logging.getLogger(__name__)

ADV_EPS = 1e-6  # m/s, keeps the advective bound finite for v = 0


class SolverError(Exception):
    frame: int | None = None  # set by the evolver when known


class CflViolation(SolverError):
    def __init__(self, dt, bound):
        self.dt, self.bound = dt, bound
        super().__init__(f"time step {dt:.6g} s exceeds stability bound {bound:.6g} s")

    def __reduce__(self):
        return type(self), (self.dt, self.bound), self.__dict__


class NonFiniteField(SolverError):
    pass


class WindowOutOfRange(SolverError):
    pass


@dataclass(frozen=True)
class PdeParams:
    D0: float = 1.0
    D_occ: float = 3.0
    lam0: float = 0.15
    lam_sh: float = 1.3
    lam_g: float = 1.0
    tau: float = 0.0
    sponge_width: float = 10.0
    sponge_gain: float = 5.0
    sponge_side: str = "max_x"
    c_safe: float = 0.5
    sdot_ref: float = 1.0

    def __post_init__(self):
        if not (self.D0 > 0 and self.D_occ >= self.D0):
            raise ValueError("need D_occ >= D0 > 0")
        for name in ("lam0", "lam_sh", "lam_g", "tau", "sponge_gain", "sponge_width"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.c_safe <= 1:
            raise ValueError("c_safe must lie in (0, 1]")
        if not self.sdot_ref > 0:
            raise ValueError("sdot_ref must be positive")
        if self.sponge_side not in ("max_x", "min_x", "none"):
            raise ValueError(f"unknown sponge side {self.sponge_side!r}")


@dataclass(frozen=True)
class AblationConfig:
    enable_diffusion: bool = True
    enable_advection: bool = True
    enable_decay_coupling: bool = True
    static_mode: bool = False
    name: str = "full"

    def __post_init__(self):
        if self.static_mode and (self.enable_diffusion or self.enable_advection
                                 or self.enable_decay_coupling):
            raise ValueError("static mode cannot be combined with PDE operator flags")


FULL = AblationConfig()
SOURCE_ONLY = AblationConfig(False, False, False, name="source_only")
PLUS_DIFFUSION = AblationConfig(True, False, False, name="plus_diffusion")
PLUS_ADVECTION = AblationConfig(True, True, False, name="plus_advection")
STATIC = AblationConfig(False, False, False, static_mode=True, name="static")
TABLE_ARMS = (SOURCE_ONLY, PLUS_DIFFUSION, PLUS_ADVECTION, FULL)


@dataclass
class FieldState:
    R: ScalarField
    R_prev: ScalarField | None = None
    t: float = 0.0
    clamped: float = 0.0  # pre-clamp undershoot removed by the last step

    @classmethod
    def zeros(cls, spec: GridSpec, t: float = 0.0) -> "FieldState":
        z = ScalarField(spec, np.zeros(spec.shape), t)
        return cls(z, None, t)


@dataclass
class StepDiagnostics:
    frame: int
    t: float
    dt: float
    substeps: int
    mass: float
    max: float
    min: float
    clamped: float = 0.0  # largest pre-clamp undershoot magnitude
    skipped: bool = False


# -- coefficient fields ---------------------------------------------------------------

def sponge_field(grid: GridSpec, params: PdeParams) -> np.ndarray:
    if params.sponge_side == "none" or params.sponge_width == 0 or params.sponge_gain == 0:
        return np.zeros(grid.shape)
    xmin, xmax, _, _ = grid.extent
    xc = grid.x_centers()
    if params.sponge_side == "max_x":
        depth = xc - (xmax - params.sponge_width)
    else:
        depth = (xmin + params.sponge_width) - xc
    depth = np.clip(depth, 0.0, None)
    row = params.sponge_gain * (depth / params.sponge_width) ** 2
    return np.broadcast_to(row, grid.shape).copy()


def decay_field(mask: ShadowMask, grid: GridSpec, params: PdeParams = PdeParams(),
                coupled: bool = True) -> ScalarField:
    """Geometry-coupled decay rate; ``coupled=False`` gives the constant-decay arm."""
    lam = sponge_field(grid, params)
    if coupled:
        S = mask.S.values
        shrink = np.clip(-mask.dS_dt.values * params.lam_g / params.sdot_ref, 0.0, 1.0)
        lam = lam + params.lam0 * (1.0 - S) + params.lam_sh * shrink
    else:
        lam = lam + params.lam0
    return ScalarField(grid, lam, mask.S.t)


def diffusivity(mask: ShadowMask, grid: GridSpec, params: PdeParams = PdeParams()) -> ScalarField:
    return ScalarField(grid, params.D0 + (params.D_occ - params.D0) * mask.S.values, mask.S.t)


def _rate_bound(grid: GridSpec, D_max: float, adv_max: float, lam_max: float) -> float:
    h = min(grid.dx, grid.dy)
    return 4.0 * D_max / h ** 2 + (adv_max + ADV_EPS) / h + lam_max


def stable_dt(params: PdeParams, grid: GridSpec, v: VectorField | None = None,
              D: ScalarField | None = None, lam: ScalarField | None = None) -> float:
    """Largest sub-step keeping the explicit update positive, times ``c_safe``.

    Diffusive, advective and (optionally) decay rates are summed rather than
    taking the minimum of the separate bounds, so the update coefficient of
    each cell stays within ``[1 - c_safe, 1]``. Capped at the frame interval.
    """
    D_max = float(D.values.max()) if D is not None else params.D_occ
    adv = 0.0 if v is None else float((np.abs(v.vx) + np.abs(v.vy)).max())
    lam_max = float(lam.values.max()) if lam is not None else 0.0
    return min(params.c_safe / _rate_bound(grid, D_max, adv, lam_max), 1.0 / grid.frame_rate)


# -- operators ----------------------------------------------------------------------------

def diffusion_term(R: np.ndarray, D: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """div(D grad R) with face-averaged D; boundary faces carry no flux."""
    out = np.zeros_like(R)
    fx = 0.5 * (D[:, 1:] + D[:, :-1]) * (R[:, 1:] - R[:, :-1]) / dx
    out[:, :-1] += fx / dx
    out[:, 1:] -= fx / dx
    fy = 0.5 * (D[1:, :] + D[:-1, :]) * (R[1:, :] - R[:-1, :]) / dy
    out[:-1, :] += fy / dy
    out[1:, :] -= fy / dy
    return out


def advection_term(R: np.ndarray, vx: np.ndarray, vy: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """-div(v R) by donor-cell upwinding of each cell's own flux; closed boundaries."""
    out = np.zeros_like(R)
    # flux through the face between columns i and i+1
    fx = np.maximum(vx[:, :-1], 0.0) * R[:, :-1] + np.minimum(vx[:, 1:], 0.0) * R[:, 1:]
    out[:, :-1] -= fx / dx
    out[:, 1:] += fx / dx
    fy = np.maximum(vy[:-1, :], 0.0) * R[:-1, :] + np.minimum(vy[1:, :], 0.0) * R[1:, :]
    out[:-1, :] -= fy / dy
    out[1:, :] += fy / dy
    return out


def step(state: FieldState, Q: ScalarField, v: VectorField | None, D: ScalarField | None,
         lam: ScalarField, dt: float, tau: float = 0.0, c_safe: float = 1.0) -> FieldState:
    """Advance one explicit sub-step.

    ``v`` or ``D`` may be ``None`` to drop the operator entirely. ``tau > 0``
    selects the telegrapher (second-order in time) update.
    """
    spec = state.R.spec
    R = state.R.values
    D_arr = None if D is None else D.values
    adv = 0.0 if v is None else float((np.abs(v.vx) + np.abs(v.vy)).max())
    D_max = 0.0 if D_arr is None else float(D_arr.max())
    bound = c_safe / _rate_bound(spec, D_max, adv, float(lam.values.max()))
    if dt > bound * (1 + 1e-9):
        raise CflViolation(dt, bound)

    rhs = Q.values - lam.values * R
    if D_arr is not None:
        rhs = rhs + diffusion_term(R, D_arr, spec.dx, spec.dy)
    if v is not None:
        rhs = rhs + advection_term(R, v.vx, v.vy, spec.dx, spec.dy)

    if tau > 0:
        Rp = R if state.R_prev is None else state.R_prev.values
        a = tau / dt ** 2
        new = (rhs + a * (2 * R - Rp) + R / dt) / (a + 1.0 / dt)
    else:
        new = R + dt * rhs

    if not np.all(np.isfinite(new)):
        raise NonFiniteField(f"non-finite risk at t={state.t + dt:.4f}")
    undershoot = float(-new.min()) if new.min() < 0 else 0.0
    if undershoot > 0:
        new = np.maximum(new, 0.0)
    t = state.t + dt
    prev = state.R if tau > 0 else None
    return FieldState(ScalarField(spec, new, t), prev, t, undershoot)


# -- per-frame pipeline ---------------------------------------------------------------------

@dataclass
class FrameResult:
    frame: int
    t: float
    state: FieldState
    diag: StepDiagnostics
    S: np.ndarray  # float32 shadow mask
    occ: np.ndarray  # bool Omega_occ
    q_visible: np.ndarray  # float32 Q_veh + Q_merge (evidence not tied to occlusion)
    q_total: np.ndarray | None = None


@dataclass
class EvolverConfig:
    heavy: frozenset = HEAVY_CLASSES
    sigma_s: float = 1.5
    theta_s: float = 0.5
    hide_occluded: bool = True
    occlusion: bool = True
    force_dt: float | None = None
    keep_sources: bool = False


class FieldEvolver:
    """Owns one risk field and advances it frame by frame."""

    def __init__(self, grid: GridSpec, topology: MergeTopology | None = None,
                 src: SourceParams = SourceParams(), pde: PdeParams = PdeParams(),
                 ablation: AblationConfig = FULL, config: EvolverConfig | None = None,
                 t0: float = 0.0):
        self.grid = grid
        self.topology = topology
        self.src = src
        self.pde = pde
        self.ablation = ablation
        self.config = config or EvolverConfig()
        self.state = FieldState.zeros(grid, t0)
        self.prev_mask: ShadowMask | None = None
        self._sponge = sponge_field(grid, pde)

    def shadow(self, frame: Frame, ego_id) -> ShadowMask:
        if not self.config.occlusion:
            return ShadowMask.empty(self.grid, frame.t)
        return compute_shadow_mask(frame, ego_id, self.grid, self.config.heavy,
                                   self.config.sigma_s, self.config.theta_s, self.prev_mask)

    def advance(self, frame: Frame, ego_id) -> FrameResult:
        grid, src, pde, abl = self.grid, self.src, self.pde, self.ablation
        if frame.agent(ego_id) is None:
            raise EgoMissing(f"ego {ego_id} not present in frame {frame.index}")
        mask = self.shadow(frame, ego_id)
        seen = frame
        if self.config.occlusion and self.config.hide_occluded:
            seen = observed_frame(frame, hidden_agent_ids(frame, ego_id, self.config.heavy))
        qv = q_veh(seen, ego_id, grid, src).values
        qm = q_merge(seen, self.topology, grid, src).values
        qo = q_occ(mask, grid, src).values
        Q = ScalarField(grid, qv + qm + qo, frame.t)
        frame_dt = 1.0 / grid.frame_rate

        if abl.static_mode:
            self.state = FieldState(Q.copy(), None, frame.t)
            n, dt, undershoot = 0, 0.0, 0.0
        else:
            v = velocity_field(seen, self.topology, grid, src) if abl.enable_advection else None
            D = diffusivity(mask, grid, pde) if abl.enable_diffusion else None
            lam = decay_field(mask, grid, pde, coupled=abl.enable_decay_coupling)
            if self.config.force_dt is not None:
                dt = self.config.force_dt
            else:
                dt = stable_dt(pde, grid, v, D if D is not None else ScalarField(grid, np.zeros(grid.shape)), lam)
            n = max(1, math.ceil(frame_dt / dt - 1e-9))
            dt = frame_dt / n if self.config.force_dt is None else dt
            undershoot = 0.0
            state = self.state
            try:
                for _ in range(n):
                    state = step(state, Q, v, D, lam, dt, pde.tau)
                    undershoot = max(undershoot, state.clamped)
            except SolverError as e:
                e.frame = frame.index
                raise
            if undershoot > 0:
                log.debug("frame %d: clamped undershoot %.3g", frame.index, undershoot)
            state.t = frame.t
            state.R.t = frame.t
            self.state = state

        self.prev_mask = mask
        R = self.state.R.values
        diag = StepDiagnostics(frame.index, frame.t, dt, n, float(R.sum() * grid.cell_area),
                               float(R.max()), float(R.min()), undershoot)
        return FrameResult(frame.index, frame.t, self.state, diag,
                           mask.S.values.astype(np.float32), mask.occ.copy(),
                           (qv + qm).astype(np.float32),
                           Q.values if self.config.keep_sources else None)


@dataclass
class WindowRun:
    ego_id: int
    window: OcclusionWindow
    results: list[FrameResult] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def __iter__(self):
        return ((r.state, r.diag) for r in self.results)

    def __len__(self):
        return len(self.results)

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.results])

    def fields(self) -> np.ndarray:
        return np.stack([r.state.R.values for r in self.results]) if self.results else np.zeros((0,))


def evolve_window(rec: Recording, window: OcclusionWindow, ego_id, grid: GridSpec,
                  topology: MergeTopology | None = None, src: SourceParams = SourceParams(),
                  pde: PdeParams = PdeParams(), ablation: AblationConfig = FULL,
                  config: EvolverConfig | None = None) -> WindowRun:
    """Evolve from a zero field across every frame of ``window``."""
    first, last = int(rec.frame_indices[0]), int(rec.frame_indices[-1])
    if window.start < first or window.end > last:
        raise WindowOutOfRange(f"window [{window.start}, {window.end}] outside [{first}, {last}]")
    grid = GridSpec(grid.nx, grid.ny, grid.dx, grid.dy, grid.origin, rec.frame_rate)
    evolver = FieldEvolver(grid, topology, src, pde, ablation, config,
                           t0=window.start / rec.frame_rate)
    run = WindowRun(ego_id, window)
    present = set(int(k) for k in rec.frame_indices)
    for k in window.frames():
        if k not in present:
            run.skipped.append(k)
            continue
        frame = rec.frame(k, ego_id)
        if frame.agent(ego_id) is None:
            run.skipped.append(k)
            evolver.prev_mask = None
            continue
        run.results.append(evolver.advance(frame, ego_id))
    return run
