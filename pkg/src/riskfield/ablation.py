"""Static baseline, PDE-term ablation arms and scripted paired scenarios."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evaluate import MetricSettings, evaluate_runs
from .grid import GridSpec, ScalarField
from .ingest import (
    HEAVY_CLASSES, AgentState, Frame, LanePolyline, Recording, detect_lane_changes,
)
from .metrics import MetricsReport, RegionSpec, delta_coll, near_collision
from .pde import (
    FULL, STATIC, TABLE_ARMS, AblationConfig, EvolverConfig, FieldEvolver, PdeParams, evolve_window,
)
from .shadow import OcclusionWindow, ShadowMask, SelectionZone, extract_occlusion_windows
from .sources import MergePolygon, MergeTopology, SourceParams, total_source


def static_field(frame: Frame, ego_id, mask: ShadowMask | None, topology: MergeTopology | None,
                 grid: GridSpec, src: SourceParams = SourceParams()) -> ScalarField:
    """Frame-wise snapshot baseline: the instantaneous total source is the field."""
    return total_source(frame, ego_id, mask, topology, grid, src)


def field_scale(ablation: AblationConfig, pde: PdeParams) -> float:
    return 1.0 if ablation.static_mode else pde.lam0


# -- ablation over recordings ----------------------------------------------------------

@dataclass
class ArmResult:
    arm: AblationConfig
    report: MetricsReport
    errors: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    results: list[ArmResult]

    def by_name(self) -> dict[str, MetricsReport]:
        return {r.arm.name: r.report for r in self.results}

    def rows(self) -> list[tuple[str, str, float | None, int]]:
        out = []
        for r in self.results:
            for name in ("lcrd", "rpr", "tai", "osi", "orl", "delta_coll", "temp"):
                out.append((r.arm.name, name, r.report.value(name), r.report.counts.get(name, 0)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "metric", "value", "n"])
        for arm, metric, value, n in self.rows():
            w.writerow([arm, metric, "" if value is None else f"{value:.4f}", n])
        return buf.getvalue()

    def ordering_checks(self) -> dict[str, bool]:
        return ordering_checks(self.by_name())


def _gt(a, b):
    return a is not None and b is not None and a > b


def ordering_checks(rep: dict[str, MetricsReport]) -> dict[str, bool]:
    """The monotone trends expected across the four additive arms."""
    g = lambda arm, m: getattr(rep[arm], m) if arm in rep else None  # noqa: E731
    checks = {}
    if {"plus_advection", "plus_diffusion", "source_only"} <= rep.keys():
        checks["tai_advection_gt_diffusion"] = _gt(g("plus_advection", "tai"), g("plus_diffusion", "tai"))
        checks["tai_diffusion_ge_source"] = not _gt(g("source_only", "tai"), g("plus_diffusion", "tai"))
    if {"plus_diffusion", "source_only"} <= rep.keys():
        checks["osi_diffusion_gt_source"] = _gt(g("plus_diffusion", "osi"), g("source_only", "osi"))
    if {"full", "plus_advection"} <= rep.keys():
        checks["orl_full_lt_advection"] = _gt(g("plus_advection", "orl"), g("full", "orl"))
        checks["temp_full_gt_advection"] = _gt(g("full", "temp"), g("plus_advection", "temp"))
    return checks


@dataclass
class Episode:
    """One recording plus the egos and windows to evaluate on it."""

    rec: Recording
    windows: dict  # ego_id -> list[OcclusionWindow]
    topology: MergeTopology | None = None


def windows_for(rec: Recording, egos, zone: SelectionZone = SelectionZone(),
                heavy=HEAVY_CLASSES, t_pad: float = 2.0) -> dict:
    return {e: extract_occlusion_windows(rec, e, zone, heavy, t_pad) for e in egos}


def run_ablation(episodes, arms=TABLE_ARMS, grid: GridSpec = GridSpec(),
                 src: SourceParams = SourceParams(), pde: PdeParams = PdeParams(),
                 config: EvolverConfig | None = None,
                 settings: MetricSettings = MetricSettings()) -> AblationTable:
    """Evolve every window of every episode under each arm and report per arm."""
    if not arms:
        raise ValueError("at least one arm is required")
    results = []
    for arm in arms:
        reports = []
        for ep in episodes:
            runs = [evolve_window(ep.rec, w, ego, grid, ep.topology, src, pde, arm, config)
                    for ego in sorted(ep.windows) for w in ep.windows[ego]]
            lcs = detect_lane_changes(ep.rec) if ep.rec.tracks.has_lanes else []
            reports.append(evaluate_runs(ep.rec, runs, _grid_for(grid, ep.rec),
                                         field_scale(arm, pde), settings, lcs))
        rep, errs = merge_reports(reports, settings)
        results.append(ArmResult(arm, rep, errs))
    return AblationTable(results)


def _grid_for(grid: GridSpec, rec: Recording) -> GridSpec:
    return replace(grid, frame_rate=rec.frame_rate)


def merge_reports(reports, settings: MetricSettings) -> tuple[MetricsReport, dict]:
    """Sample-weighted pooling of per-episode reports (slopes pooled by weight)."""
    out = MetricsReport(theta=settings.theta)
    errors = {}
    for _, e in reports:
        for k, v in e.items():
            errors.setdefault(k, v)
    for name in ("lcrd", "rpr", "tai", "osi", "orl", "temp"):
        vals = [(r.value(name), r.counts.get(name, 0)) for r, _ in reports]
        n = sum(c for v, c in vals if v is not None)
        out.counts[name] = n
        if n:
            setattr(out, name, sum(v * c for v, c in vals if v is not None) / n)
    if out.tai is None:
        out.tai = 0.0
    capped = [(r.extras.get("orl_capped"), r.counts.get("orl", 0)) for r, _ in reports]
    n = sum(c for v, c in capped if v is not None)
    if n:
        out.extras["orl_capped"] = sum(v * c for v, c in capped if v is not None) / n
    out.counts["delta_coll"] = 0
    for name in list(errors):
        if out.counts.get(name):
            errors.pop(name)
    return out, errors


# -- scripted scenarios --------------------------------------------------------------------

SCENARIO_COLUMNS = ("agent_id", "cls", "length", "width", "t_start", "duration",
                    "x0", "y0", "v0", "heading", "a")


@dataclass(frozen=True)
class Segment:
    agent_id: int
    t_start: float
    duration: float
    x0: float
    y0: float
    v0: float
    heading: float
    a: float

    def state(self, t: float) -> tuple[float, float, float]:
        """Position and speed ``tau`` seconds in; speed never goes negative."""
        tau = t - self.t_start
        if self.a < 0 and self.v0 + self.a * tau < 0:
            tau = -self.v0 / self.a
        s = self.v0 * tau + 0.5 * self.a * tau * tau
        v = self.v0 + self.a * tau
        return (self.x0 + s * math.cos(self.heading), self.y0 + s * math.sin(self.heading), v)

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    cls: str = "car"
    length: float = 4.5
    width: float = 1.8


@dataclass
class SyntheticScenario:
    segments: tuple[Segment, ...]
    agents: dict  # agent_id -> AgentSpec
    occluder: bool = True
    topology: MergeTopology | None = None
    duration: float = 8.0
    seed: int = 0
    ego_id: int = 0
    occluder_ids: tuple = ()
    frame_rate: float = 20.0
    name: str = ""

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("scenario duration must be positive")
        ids = {s.agent_id for s in self.segments}
        if self.ego_id not in ids:
            raise ValueError("ego has no scripted segment")
        missing = ids - set(self.agents)
        if missing:
            raise ValueError(f"segments for unknown agents {sorted(missing)}")
        for aid in ids:
            segs = self.agent_segments(aid)
            for a, b in zip(segs, segs[1:]):
                if b.t_start < a.t_end - 1e-9:
                    raise ValueError(f"agent {aid} has overlapping segments")

    def agent_segments(self, agent_id) -> list[Segment]:
        return sorted((s for s in self.segments if s.agent_id == agent_id), key=lambda s: s.t_start)

    def paired(self) -> "SyntheticScenario":
        """The same scripts with the occluder flag flipped."""
        return replace(self, occluder=not self.occluder)

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate)) + 1

    def agent_class(self, agent_id) -> str:
        cls = self.agents[agent_id].cls
        if not self.occluder and agent_id in self.occluder_ids:
            return "van"  # same body, no longer treated as an occluder
        return cls

    def agent_state(self, agent_id, t: float) -> AgentState | None:
        segs = self.agent_segments(agent_id)
        for i, s in enumerate(segs):
            last = i == len(segs) - 1
            if s.t_start - 1e-9 <= t < s.t_end - 1e-9 or (last and abs(t - s.t_end) < 1e-9):
                x, y, v = s.state(t)
                spec = self.agents[agent_id]
                a = s.a if v > 0 else 0.0
                c, sn = math.cos(s.heading), math.sin(s.heading)
                return AgentState(agent_id, (x, y), (v * c, v * sn), (a * c, a * sn), s.heading,
                                  spec.length, spec.width, self.agent_class(agent_id),
                                  lane_of(y, self.topology))
        return None

    def frame(self, k: int, skip=()) -> Frame:
        t = k / self.frame_rate
        agents = []
        for aid in sorted(self.agents):
            if aid in skip:
                continue
            st = self.agent_state(aid, t)
            if st is not None:
                agents.append(st)
        return Frame(k, t, tuple(agents))

    def recording(self) -> Recording:
        frames = [self.frame(k) for k in range(self.n_frames)]
        lanes = self.topology.lanes if self.topology else ()
        return Recording.from_frames(frames, self.frame_rate, self.name, lanes)


def lane_of(y: float, topology: MergeTopology | None) -> int | None:
    if topology is None or not topology.lanes:
        return None
    best = min(topology.lanes, key=lambda ln: abs(float(np.mean(ln.points[:, 1])) - y))
    return best.lane_id


def write_scenario(sc: SyntheticScenario, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write(f"# occluder={int(sc.occluder)}\n")
    buf.write(f"# occluder_ids={' '.join(str(i) for i in sc.occluder_ids)}\n")
    buf.write(f"# duration={sc.duration!r}\n# seed={sc.seed}\n# ego_id={sc.ego_id}\n")
    buf.write(f"# frame_rate={sc.frame_rate!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCENARIO_COLUMNS)
    for s in sorted(sc.segments, key=lambda s: (s.agent_id, s.t_start)):
        a = sc.agents[s.agent_id]
        w.writerow([s.agent_id, a.cls, repr(a.length), repr(a.width), repr(s.t_start),
                    repr(s.duration), repr(s.x0), repr(s.y0), repr(s.v0), repr(s.heading), repr(s.a)])
    path.write_text(buf.getvalue())
    return path


def read_scenario(path, topology: MergeTopology | None = None) -> SyntheticScenario:
    path = Path(path)
    flags = {}
    rows = []
    for line in path.read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition("=")
            flags[k.strip()] = v.strip()
        elif line.strip():
            rows.append(line)
    reader = csv.DictReader(rows)
    if tuple(reader.fieldnames or ()) != SCENARIO_COLUMNS:
        raise ValueError(f"{path}: expected columns {','.join(SCENARIO_COLUMNS)}")
    segs, agents = [], {}
    for r in reader:
        aid = int(r["agent_id"])
        agents[aid] = AgentSpec(aid, r["cls"], float(r["length"]), float(r["width"]))
        segs.append(Segment(aid, float(r["t_start"]), float(r["duration"]), float(r["x0"]),
                            float(r["y0"]), float(r["v0"]), float(r["heading"]), float(r["a"])))
    occ_ids = tuple(int(x) for x in flags.get("occluder_ids", "").split())
    return SyntheticScenario(tuple(segs), agents, bool(int(flags.get("occluder", "1"))), topology,
                             float(flags.get("duration", "12.0")), int(flags.get("seed", "0")),
                             int(flags.get("ego_id", "0")), occ_ids,
                             float(flags.get("frame_rate", "20.0")), path.stem)


class ScriptBuilder:
    """Chains constant-acceleration segments so each starts where the last ended."""

    def __init__(self, agent_id, x0, y0, v0, heading=0.0, t0=0.0):
        self.agent_id = agent_id
        self.x, self.y, self.v, self.heading, self.t = x0, y0, v0, heading, t0
        self.segments: list[Segment] = []

    def hold(self, duration, a=0.0, heading=None):
        if heading is not None:
            self.heading = heading
        seg = Segment(self.agent_id, self.t, duration, self.x, self.y, self.v, self.heading, a)
        self.segments.append(seg)
        self.x, self.y, self.v = seg.state(seg.t_end)
        self.t = seg.t_end
        return self

    def shift(self, duration, dy, a=0.0):
        """Straight-line lateral move of ``dy`` over ``duration`` at the current speed."""
        dist = self.v * duration + 0.5 * a * duration ** 2
        psi = math.asin(max(-1.0, min(1.0, dy / dist)))
        self.hold(duration, a, psi)
        self.heading = 0.0
        return self


# -- highway merge geometry --------------------------------------------------------------

ACCEL_Y, RIGHT_Y, LEFT_Y = 0.0, 3.75, 7.5


def merge_grid(nx: int = 400, ny: int = 30) -> GridSpec:
    return GridSpec(nx, ny, 1.0, 1.0, (0.0, -10.0), 20.0)


def merge_topology(x_merge=(60.0, 180.0), length: float = 400.0, sigma_m: float = 5.0) -> MergeTopology:
    xs = np.array([0.0, length])
    lanes = (
        LanePolyline(0, np.c_[xs, [ACCEL_Y, ACCEL_Y]], 20.0),
        LanePolyline(1, np.c_[xs, [RIGHT_Y, RIGHT_Y]], 25.0),
        LanePolyline(2, np.c_[xs, [LEFT_Y, LEFT_Y]], 27.0),
    )
    a, b = x_merge
    poly = MergePolygon(np.array([(a, -1.875), (b, -1.875), (b, 1.875), (a, 1.875)]), (0.0, 1.0))
    return MergeTopology((poly,), lanes, sigma_m)


TRUCK = dict(cls="truck", length=16.0, width=2.5)


def merge_scenario(seed: int, occluder: bool = True, duration: float = 12.0) -> SyntheticScenario:
    """Ego in the left lane, a truck ahead in the right lane, a hidden car in the acceleration lane.

    The car sits in the truck's shadow, cuts across both lanes in front of the
    truck and brakes in the ego's lane.
    """
    rng = np.random.default_rng(seed)
    v_ego = 25.0 + rng.uniform(-1.0, 1.0)
    x_ego = 20.0
    x_truck = x_ego + 25.0 + rng.uniform(-2.0, 2.0)
    v_truck = v_ego - 1.0
    x_car = x_truck + 8.0 + rng.uniform(-2.0, 2.0)
    t_cut = 4.0 + rng.uniform(-0.5, 0.5)

    ego = ScriptBuilder(0, x_ego, LEFT_Y, v_ego).hold(duration)
    truck = ScriptBuilder(1, x_truck, RIGHT_Y, v_truck).hold(duration)
    car = (ScriptBuilder(2, x_car, ACCEL_Y, v_truck + 1.0)
           .hold(t_cut).shift(2.0, RIGHT_Y - ACCEL_Y).hold(0.5)
           .shift(2.0, LEFT_Y - RIGHT_Y, a=-4.0))
    car.hold(max(0.1, duration - car.t), a=-4.0)
    segs = tuple(ego.segments + truck.segments + car.segments)
    agents = {0: AgentSpec(0), 1: AgentSpec(1, **TRUCK), 2: AgentSpec(2)}
    return SyntheticScenario(segs, agents, occluder, merge_topology(), duration, seed, 0, (1,),
                             name=f"merge_{seed:03d}")


def merge_corpus(n: int = 20, seed: int = 0, duration: float = 12.0) -> list[SyntheticScenario]:
    return [merge_scenario(seed + i, True, duration) for i in range(n)]


def stopped_car_scenario(occluder: bool = True, duration: float = 8.0) -> SyntheticScenario:
    """A truck cuts in ahead of the ego, hides a stalled car in the ego's lane, then cuts out."""
    ego = ScriptBuilder(0, 20.0, RIGHT_Y, 25.0).hold(duration)
    truck = ScriptBuilder(1, 65.0, LEFT_Y, 25.0).hold(0.5).shift(1.5, RIGHT_Y - LEFT_Y)
    truck.hold(2.5 - truck.t).shift(1.5, LEFT_Y - RIGHT_Y)
    truck.hold(duration - truck.t)
    car = ScriptBuilder(2, 170.0, RIGHT_Y, 0.0).hold(duration)
    segs = tuple(ego.segments + truck.segments + car.segments)
    agents = {0: AgentSpec(0), 1: AgentSpec(1, **TRUCK), 2: AgentSpec(2)}
    return SyntheticScenario(segs, agents, occluder, merge_topology(), duration, 0, 0, (1,),
                             name="stopped_car")


def scenario_episode(sc: SyntheticScenario, zone: SelectionZone = SelectionZone(),
                     t_pad: float = 2.0) -> Episode:
    rec = sc.recording()
    return Episode(rec, windows_for(rec, [sc.ego_id], zone, t_pad=t_pad), sc.topology)


# -- reactive ego ---------------------------------------------------------------------

@dataclass(frozen=True)
class ReactivePolicyParams:
    k_b: float = 4.0
    theta_brake: float = 0.15
    a_min: float = -6.0
    region: RegionSpec = RegionSpec(30.0, 3.5)

    def __post_init__(self):
        if not self.k_b > 0:
            raise ValueError("braking gain must be positive")
        if not self.a_min < 0:
            raise ValueError("a_min must be negative")

    def accel(self, rbar: float) -> float:
        return max(self.a_min, -self.k_b * max(0.0, rbar - self.theta_brake))


@dataclass
class EpisodeLog:
    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    rbar: np.ndarray
    near: np.ndarray  # per-frame near-collision flags

    @property
    def hit(self) -> bool:
        return bool(self.near.any())

    @property
    def first_brake(self) -> float | None:
        idx = np.flatnonzero(self.a < 0)
        return float(self.t[idx[0]]) if len(idx) else None


def run_paired_episode(sc: SyntheticScenario, mode: AblationConfig = FULL,
                       policy: ReactivePolicyParams = ReactivePolicyParams(),
                       pde: PdeParams = PdeParams(), src: SourceParams = SourceParams(),
                       grid: GridSpec | None = None, config: EvolverConfig | None = None) -> EpisodeLog:
    """Replay the scripts with a reactive ego that brakes on look-ahead risk."""
    grid = replace(grid or merge_grid(), frame_rate=sc.frame_rate)
    ego0 = sc.agent_state(sc.ego_id, 0.0)
    spec = sc.agents[sc.ego_id]
    x, y = ego0.position
    v, psi = ego0.speed, ego0.heading
    evolver = FieldEvolver(grid, sc.topology, src, pde, mode, config)
    scale = field_scale(mode, pde)
    dt = 1.0 / sc.frame_rate
    a = 0.0
    cols = {k: [] for k in ("t", "x", "v", "a", "rbar", "near")}
    for k in range(sc.n_frames):
        base = sc.frame(k, skip=(sc.ego_id,))
        ego = AgentState(sc.ego_id, (x, y), (v * math.cos(psi), v * math.sin(psi)),
                         (a * math.cos(psi), a * math.sin(psi)), psi, spec.length, spec.width,
                         spec.cls, lane_of(y, sc.topology))
        frame = Frame(k, base.t, (ego,) + base.agents)
        res = evolver.advance(frame, sc.ego_id)
        roi = policy.region.mask(grid, ego.position, psi)
        rbar = float(scale * res.state.R.values[roi].mean()) if roi.any() else 0.0
        near = near_collision(ego, base.agents)
        a = policy.accel(rbar)
        for key, val in (("t", base.t), ("x", x), ("v", v), ("a", a), ("rbar", rbar), ("near", near)):
            cols[key].append(val)
        v_new = max(0.0, v + a * dt)
        x += 0.5 * (v + v_new) * dt * math.cos(psi)
        y += 0.5 * (v + v_new) * dt * math.sin(psi)
        v = v_new
    return EpisodeLog(*(np.array(cols[k]) for k in ("t", "x", "v", "a", "rbar", "near")))


def paired_delta_coll(corpus, mode: AblationConfig, policy: ReactivePolicyParams = ReactivePolicyParams(),
                      pde: PdeParams = PdeParams(), src: SourceParams = SourceParams(),
                      grid: GridSpec | None = None) -> tuple[float, list[tuple[bool, bool]]]:
    pairs = []
    for sc in corpus:
        occ = sc if sc.occluder else sc.paired()
        hit_occ = run_paired_episode(occ, mode, policy, pde, src, grid).hit
        hit_vis = run_paired_episode(occ.paired(), mode, policy, pde, src, grid).hit
        pairs.append((hit_occ, hit_vis))
    return delta_coll(pairs), pairs
