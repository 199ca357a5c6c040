"""Per-frame source terms and the transport velocity field.

All Gaussians are peak-normalised (value 1 at the centre), so the kernel
weights read directly as dimensionless injection rates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely

from .grid import GridSpec, ScalarField, VectorField
from .ingest import AgentState, Frame, IngestError, LanePolyline, MissingColumn, load_lanes
from .shadow import EgoMissing, ShadowMask


@dataclass(frozen=True)
class SourceParams:
    sigma_x: float = 12.0
    sigma_y: float = 3.0
    L_prox: float = 50.0
    v_ref: float = 5.0
    beta_a: float = 0.3
    beta_brake: float = 0.8
    a_ref: float = 3.0
    gamma_a: float = 0.5
    t_react: float = 1.5
    k_amb: float = 0.08
    k_veh: float = 0.6
    g0: float = 1.0
    p_mode: str = "uniform"
    L_emerge: float = 30.0
    v_lat: float = 1.0
    v_cap: float = 60.0
    idw_radius: float = 50.0
    idw_eps: float = 1.0

    def __post_init__(self):
        positive = ("sigma_x", "sigma_y", "L_prox", "v_ref", "a_ref", "t_react",
                    "L_emerge", "v_cap", "idw_radius", "idw_eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("beta_a", "beta_brake", "gamma_a", "k_amb", "k_veh", "g0", "v_lat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.p_mode not in ("uniform", "depth"):
            raise ValueError(f"unknown p_mode {self.p_mode!r}")


@dataclass(frozen=True)
class KernelInstance:
    mu: tuple[float, float]
    P: np.ndarray
    w: float

    def evaluate(self, X, Y) -> np.ndarray:
        Pinv = np.linalg.inv(self.P)
        dx, dy = X - self.mu[0], Y - self.mu[1]
        q = Pinv[0, 0] * dx * dx + 2 * Pinv[0, 1] * dx * dy + Pinv[1, 1] * dy * dy
        return self.w * np.exp(-0.5 * q)


@dataclass(frozen=True)
class MergePolygon:
    vertices: np.ndarray  # (n, 2)
    lateral: tuple[float, float] = (0.0, 1.0)  # unit main-lane lateral direction


@dataclass(eq=False)
class MergeTopology:
    polygons: tuple[MergePolygon, ...] = ()
    lanes: tuple[LanePolyline, ...] = ()
    sigma_m: float = 5.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.sigma_m > 0:
            raise ValueError("merge taper must be positive")
        for poly in self.polygons:
            if not shapely.Polygon(poly.vertices).is_valid:
                raise ValueError("merge polygons must be simple")

    def densities(self, grid: GridSpec) -> list[np.ndarray]:
        """Per-polygon merge density: 1 inside, Gaussian taper outside."""
        if grid not in self._cache:
            X, Y = grid.mesh()
            out = []
            for poly in self.polygons:
                shape = shapely.Polygon(poly.vertices)
                inside = shapely.contains_xy(shape, X, Y)
                d = shapely.distance(shape, shapely.points(X, Y))
                rho = np.exp(-(d ** 2) / (2 * self.sigma_m ** 2))
                out.append(np.where(inside, 1.0, rho))
            self._cache[grid] = out
        return self._cache[grid]

    def lane_flow(self, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
        """Nearest-lane nominal velocity per cell (fallback far from agents)."""
        key = ("lanes", grid)
        if key not in self._cache:
            X, Y = grid.mesh()
            self._cache[key] = _lane_fallback(self.lanes, X, Y)
        return self._cache[key]

    def rho_merge(self, grid: GridSpec) -> np.ndarray:
        dens = self.densities(grid)
        if not dens:
            return np.zeros(grid.shape)
        return np.maximum.reduce(dens)


def _unit(v) -> tuple[float, float]:
    n = math.hypot(v[0], v[1])
    if n == 0:
        raise ValueError("zero-length direction")
    return (v[0] / n, v[1] / n)


def load_topology(path, lanes_path=None, sigma_m: float = 5.0) -> MergeTopology:
    """Merge polygons from ``polygon_id,vertex_index,x,y`` rows.

    A row whose ``vertex_index`` is ``lateral`` carries the polygon's
    main-lane lateral direction in its ``x,y`` fields.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise IngestError(f"{path}: {e.strerror}") from None
    with fh:
        rows = list(csv.DictReader(fh))
        header = rows[0].keys() if rows else []
    for name in ("polygon_id", "vertex_index", "x", "y"):
        if rows and name not in header:
            raise MissingColumn(name, path)
    verts: dict[str, list] = {}
    lateral: dict[str, tuple[float, float]] = {}
    for r in rows:
        pid = r["polygon_id"].strip()
        if r["vertex_index"].strip().lower() == "lateral":
            lateral[pid] = _unit((float(r["x"]), float(r["y"])))
        else:
            verts.setdefault(pid, []).append((int(r["vertex_index"]), float(r["x"]), float(r["y"])))
    polys = []
    for pid in sorted(verts):
        pts = np.array([(x, y) for _, x, y in sorted(verts[pid])])
        polys.append(MergePolygon(pts, lateral.get(pid, (0.0, 1.0))))
    lanes = load_lanes(lanes_path) if lanes_path else ()
    return MergeTopology(tuple(polys), lanes, sigma_m)


def write_topology(topology: MergeTopology, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["polygon_id", "vertex_index", "x", "y"])
        for pid, poly in enumerate(topology.polygons):
            for k, (x, y) in enumerate(poly.vertices):
                w.writerow([pid, k, repr(float(x)), repr(float(y))])
            w.writerow([pid, "lateral", repr(poly.lateral[0]), repr(poly.lateral[1])])


def write_lanes(lanes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lane_id", "vertex_index", "x", "y", "nominal_speed"])
        for lane in lanes:
            for k, (x, y) in enumerate(lane.points):
                w.writerow([lane.lane_id, k, repr(float(x)), repr(float(y)), repr(lane.nominal_speed)])


# -- vehicle interaction source ---------------------------------------------------

def _longitudinal_accel(a: AgentState) -> float:
    speed = a.speed
    if speed < 1e-6:
        return 0.0
    return (a.acceleration[0] * a.velocity[0] + a.acceleration[1] * a.velocity[1]) / speed


def vehicle_kernel(agent: AgentState, ego: AgentState, params: SourceParams) -> KernelInstance:
    a_par = _longitudinal_accel(agent)
    a_mag = math.hypot(*agent.acceleration)
    c, s = math.cos(agent.heading), math.sin(agent.heading)
    shift = params.gamma_a * a_mag * params.t_react if a_par < 0 else 0.0
    mu = (agent.position[0] + shift * c, agent.position[1] + shift * s)

    d = math.hypot(agent.position[0] - ego.position[0], agent.position[1] - ego.position[1])
    rel = math.hypot(agent.velocity[0] - ego.velocity[0], agent.velocity[1] - ego.velocity[1])
    w = (math.exp(-d / params.L_prox)
         * (1.0 + rel / params.v_ref)
         * (1.0 + params.beta_a * max(0.0, a_par) / params.a_ref
            + params.beta_brake * max(0.0, -a_par) / params.a_ref))

    rot = np.array([[c, -s], [s, c]])
    P = rot @ np.diag([params.sigma_x ** 2, params.sigma_y ** 2]) @ rot.T
    return KernelInstance(mu, P, w)


def vehicle_kernels(frame: Frame, ego_id, params: SourceParams) -> list[KernelInstance]:
    ego = frame.agent(ego_id)
    if ego is None:
        raise EgoMissing(f"ego {ego_id} not present in frame {frame.index}")
    return [vehicle_kernel(a, ego, params) for a in frame.agents if a.id != ego_id]


def q_veh(frame: Frame, ego_id, grid: GridSpec, params: SourceParams = SourceParams()) -> ScalarField:
    X, Y = grid.mesh()
    out = np.zeros(grid.shape)
    for k in vehicle_kernels(frame, ego_id, params):
        out += k.evaluate(X, Y)
    return ScalarField(grid, out, frame.t)


# -- occlusion source ---------------------------------------------------------------

def shadow_flow_depth(mask: ShadowMask, grid: GridSpec, direction: float = 1.0) -> ScalarField:
    """Distance travelled inside the shadow along the (signed) x flow direction."""
    occ = mask.occ if direction >= 0 else mask.occ[:, ::-1]
    depth = np.zeros(grid.shape)
    run = np.zeros(grid.ny)
    for i in range(grid.nx):
        run = np.where(occ[:, i], run + grid.dx, 0.0)
        depth[:, i] = np.where(occ[:, i], run - 0.5 * grid.dx, 0.0)
    if direction < 0:
        depth = depth[:, ::-1]
    return ScalarField(grid, depth, mask.S.t)


def q_occ(mask: ShadowMask, grid: GridSpec, params: SourceParams = SourceParams(),
          flow_depth: ScalarField | None = None) -> ScalarField:
    g = params.g0 * mask.S.values
    if params.p_mode == "depth":
        if flow_depth is None:
            flow_depth = shadow_flow_depth(mask, grid)
        p = np.exp(-flow_depth.values / params.L_emerge)
    else:
        p = 1.0
    return ScalarField(grid, np.where(mask.occ, g * p, 0.0), mask.S.t)


# -- merge source ---------------------------------------------------------------------

def vehicle_presence(frame: Frame, grid: GridSpec, sigma: float) -> np.ndarray:
    X, Y = grid.mesh()
    rho = np.zeros(grid.shape)
    for a in frame.agents:
        rho += np.exp(-((X - a.position[0]) ** 2 + (Y - a.position[1]) ** 2) / (2 * sigma ** 2))
    return np.clip(rho, 0.0, 1.0)


def q_merge(frame: Frame, topology: MergeTopology | None, grid: GridSpec,
            params: SourceParams = SourceParams()) -> ScalarField:
    if topology is None or not topology.polygons:
        return ScalarField(grid, np.zeros(grid.shape), frame.t)
    rho_m = topology.rho_merge(grid)
    rho_v = vehicle_presence(frame, grid, params.sigma_y)
    return ScalarField(grid, params.k_amb * rho_m + params.k_veh * rho_m * rho_v, frame.t)


def total_source(frame: Frame, ego_id, mask: ShadowMask | None, topology: MergeTopology | None,
                 grid: GridSpec, params: SourceParams = SourceParams()) -> ScalarField:
    """Additive composition of the three sources."""
    parts = source_components(frame, ego_id, mask, topology, grid, params)
    return ScalarField(grid, parts["veh"].values + parts["occ"].values + parts["merge"].values,
                       frame.t)


def source_components(frame, ego_id, mask, topology, grid, params=SourceParams()) -> dict:
    occ = (q_occ(mask, grid, params) if mask is not None
           else ScalarField(grid, np.zeros(grid.shape), frame.t))
    return {"veh": q_veh(frame, ego_id, grid, params), "occ": occ,
            "merge": q_merge(frame, topology, grid, params)}


# -- transport velocity -------------------------------------------------------------------

def _lane_fallback(lanes, X, Y):
    best = np.full(X.shape, np.inf)
    vx = np.zeros(X.shape)
    vy = np.zeros(X.shape)
    for lane in lanes:
        pts = lane.points
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            L2 = float(ab @ ab)
            if L2 == 0:
                continue
            s = np.clip(((X - a[0]) * ab[0] + (Y - a[1]) * ab[1]) / L2, 0, 1)
            d = np.hypot(X - (a[0] + s * ab[0]), Y - (a[1] + s * ab[1]))
            closer = d < best
            ux, uy = ab / math.sqrt(L2)
            vx = np.where(closer, ux * lane.nominal_speed, vx)
            vy = np.where(closer, uy * lane.nominal_speed, vy)
            best = np.minimum(best, d)
    return vx, vy


def velocity_field(frame: Frame, topology: MergeTopology | None, grid: GridSpec,
                   params: SourceParams = SourceParams()) -> VectorField:
    """Flow velocity by inverse-distance interpolation plus merge-zone lateral drift."""
    X, Y = grid.mesh()
    vx = np.zeros(grid.shape)
    vy = np.zeros(grid.shape)
    if frame.agents:
        num_x = np.zeros(grid.shape)
        num_y = np.zeros(grid.shape)
        den = np.zeros(grid.shape)
        dmin2 = np.full(grid.shape, np.inf)
        for a in frame.agents:
            d2 = (X - a.position[0]) ** 2 + (Y - a.position[1]) ** 2
            w = 1.0 / (d2 + params.idw_eps)
            num_x += w * a.velocity[0]
            num_y += w * a.velocity[1]
            den += w
            dmin2 = np.minimum(dmin2, d2)
        # relative slack keeps cells exactly on the radius inside under translation
        near = dmin2 <= params.idw_radius ** 2 * (1 + 1e-9)
        vx = np.where(near, num_x / den, 0.0)
        vy = np.where(near, num_y / den, 0.0)
    else:
        near = np.zeros(grid.shape, bool)

    if topology is not None and topology.lanes and not near.all():
        fx, fy = topology.lane_flow(grid)
        vx = np.where(near, vx, fx)
        vy = np.where(near, vy, fy)

    if topology is not None and topology.polygons and params.v_lat > 0:
        for poly, rho in zip(topology.polygons, topology.densities(grid)):
            vx = vx + poly.lateral[0] * params.v_lat * rho
            vy = vy + poly.lateral[1] * params.v_lat * rho

    mag = np.hypot(vx, vy)
    scale = np.where(mag > params.v_cap, params.v_cap / np.maximum(mag, 1e-300), 1.0)
    return VectorField(grid, vx * scale, vy * scale, frame.t, v_cap=params.v_cap)


def observed_frame(frame: Frame, hidden_ids) -> Frame:
    if not hidden_ids:
        return frame
    return Frame(frame.index, frame.t, tuple(a for a in frame.agents if a.id not in hidden_ids),
                 frame.ego_id)
