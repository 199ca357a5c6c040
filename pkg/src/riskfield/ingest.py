"""Trajectory recordings: CSV ingestion, frame grouping and lane-change events.

Tracks are held column-wise (:class:`TrackTable`) because every hot path
(window extraction, source construction) wants vectorised access; per-frame
:class:`AgentState` objects are materialised lazily.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

CLASSES = ("car", "truck", "trailer", "truck_trailer", "bus", "van",
           "motorcycle", "bicycle", "pedestrian", "other")
VEHICLE_CLASSES = frozenset(CLASSES) - {"bicycle", "pedestrian"}
HEAVY_CLASSES = frozenset({"truck", "trailer", "truck_trailer", "bus"})

_CLASS_ALIASES = {
    "truck_bus": "truck",
    "semitrailer": "truck_trailer",
    "truck-trailer": "truck_trailer",
    "trucktrailer": "truck_trailer",
    "motorbike": "motorcycle",
    "bike": "bicycle",
    "cyclist": "bicycle",
}

COLUMNS = ("frame", "id", "x_center", "y_center", "x_velocity", "y_velocity",
           "x_acceleration", "y_acceleration", "heading_deg", "width", "length",
           "lane_id")
REQUIRED = ("frame", "id", "x_center", "y_center", "x_velocity", "y_velocity",
            "heading_deg", "width", "length")


class IngestError(Exception):
    """Base class for recording-ingestion failures."""


class MissingColumn(IngestError):
    def __init__(self, name, path=None):
        self.name = name
        self.path = path
        super().__init__(f"{path}: missing required column {name!r}" if path
                         else f"missing required column {name!r}")

    def __reduce__(self):
        return type(self), (self.name, self.path)


class MalformedRow(IngestError):
    def __init__(self, line, path=None, reason=""):
        self.line = line
        self.path = path
        self.reason = reason
        super().__init__(f"{path}:{line}: malformed row" + (f" ({reason})" if reason else ""))

    def __reduce__(self):
        return type(self), (self.line, self.path, self.reason)


class EmptyRecording(IngestError):
    pass


class NoLaneInformation(IngestError):
    pass


# Source column names per dataset family; the first match wins.
ADAPTERS: dict[str, dict[str, tuple[str, ...]]] = {
    "normalized": {c: (c,) for c in COLUMNS},
    "exid": {
        "frame": ("frame",),
        "id": ("trackId", "id"),
        "x_center": ("xCenter",),
        "y_center": ("yCenter",),
        "x_velocity": ("xVelocity",),
        "y_velocity": ("yVelocity",),
        "x_acceleration": ("xAcceleration",),
        "y_acceleration": ("yAcceleration",),
        "heading_deg": ("heading",),
        "width": ("width",),
        "length": ("length",),
        "lane_id": ("laneId", "laneletId"),
    },
}
ADAPTERS["round"] = ADAPTERS["exid"]
ADAPTERS["ind"] = ADAPTERS["exid"]
META_ID = {"normalized": ("id",), "exid": ("trackId", "id"), "highd": ("id",)}
META_ID["round"] = META_ID["ind"] = META_ID["exid"]


def normalize_class(name: str) -> str:
    key = name.strip().lower().replace(" ", "_")
    key = _CLASS_ALIASES.get(key, key)
    return key if key in CLASSES else "other"


def wrap_angle(a):
    """Wrap radians into ``[-pi, pi)``."""
    return (np.asarray(a) + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class AgentState:
    id: int
    position: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    acceleration: tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0
    length: float = 4.5
    width: float = 1.8
    cls: str = "car"
    lane_id: int | None = None

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass
class Frame:
    index: int
    t: float
    agents: tuple[AgentState, ...]
    ego_id: int | None = None

    def __post_init__(self):
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate agent id in frame {self.index}")
        self._by_id = {a.id: a for a in self.agents}

    def agent(self, agent_id) -> AgentState | None:
        return self._by_id.get(agent_id)

    @property
    def ego(self) -> AgentState | None:
        return None if self.ego_id is None else self.agent(self.ego_id)

    def with_ego(self, ego_id) -> "Frame":
        return Frame(self.index, self.t, self.agents, ego_id)


@dataclass(frozen=True)
class LanePolyline:
    lane_id: int
    points: np.ndarray  # (n, 2)
    nominal_speed: float = 0.0


@dataclass
class TrackTable:
    """Column-wise rows sorted by ``(frame, id)``."""

    frame: np.ndarray
    id: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    heading: np.ndarray  # radians
    length: np.ndarray
    width: np.ndarray
    cls: np.ndarray  # object array of class names
    lane: np.ndarray  # int, -1 where unknown

    def __len__(self):
        return len(self.frame)

    @property
    def has_lanes(self) -> bool:
        return bool(len(self.lane)) and bool(np.any(self.lane >= 0))

    def sorted(self) -> "TrackTable":
        order = np.lexsort((self.id, self.frame))
        return TrackTable(**{k: v[order] for k, v in self.__dict__.items()})


@dataclass
class LaneChangeEvent:
    agent_id: int
    t_cross: float
    t_dec: float
    x_curr: tuple[float, float]
    x_target: tuple[float, float]
    from_lane: int = -1
    to_lane: int = -1


@dataclass
class Recording:
    tracks: TrackTable
    frame_rate: float = 20.0
    location_tag: str = ""
    lanes: tuple[LanePolyline, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.tracks) == 0:
            raise EmptyRecording("recording has no rows")
        if not self.frame_rate > 0:
            raise ValueError("frame rate must be positive")
        self.tracks = self.tracks.sorted()
        key = self.tracks.frame.astype(np.int64) * (1 << 32) + self.tracks.id.astype(np.int64)
        if np.any(np.diff(key) == 0):
            raise ValueError("agent ids must be unique within a frame")

    @cached_property
    def frame_indices(self) -> np.ndarray:
        return np.unique(self.tracks.frame)

    @cached_property
    def _frame_slices(self) -> dict[int, slice]:
        f = self.tracks.frame
        starts = np.flatnonzero(np.r_[True, f[1:] != f[:-1]])
        ends = np.r_[starts[1:], len(f)]
        return {int(f[s]): slice(int(s), int(e)) for s, e in zip(starts, ends)}

    def rows(self, k: int) -> slice:
        return self._frame_slices[int(k)]

    def frame(self, k: int, ego_id=None) -> Frame:
        return Frame(int(k), k / self.frame_rate, self._agents(self.rows(k)), ego_id)

    @cached_property
    def frames(self) -> list[Frame]:
        return [self.frame(k) for k in self.frame_indices]

    def _agents(self, sl: slice) -> tuple[AgentState, ...]:
        t = self.tracks
        out = []
        for r in range(sl.start, sl.stop):
            lane = int(t.lane[r])
            out.append(AgentState(
                int(t.id[r]), (float(t.x[r]), float(t.y[r])),
                (float(t.vx[r]), float(t.vy[r])), (float(t.ax[r]), float(t.ay[r])),
                float(t.heading[r]), float(t.length[r]), float(t.width[r]),
                str(t.cls[r]), lane if lane >= 0 else None))
        return tuple(out)

    def agent_ids(self) -> list[int]:
        return sorted(int(i) for i in np.unique(self.tracks.id))

    def agent_class(self, agent_id) -> str:
        idx = np.flatnonzero(self.tracks.id == agent_id)
        return str(self.tracks.cls[idx[0]]) if len(idx) else "other"

    def agent_frames(self, agent_id) -> np.ndarray:
        return self.tracks.frame[self.tracks.id == agent_id]

    @classmethod
    def from_frames(cls, frames, frame_rate=20.0, location_tag="", lanes=()) -> "Recording":
        rows = [(fr.index, a) for fr in frames for a in fr.agents]
        if not rows:
            raise EmptyRecording("recording has no rows")
        col = lambda f: np.array([f(k, a) for k, a in rows])  # noqa: E731
        table = TrackTable(
            frame=col(lambda k, a: k).astype(int),
            id=col(lambda k, a: a.id).astype(int),
            x=col(lambda k, a: a.position[0]).astype(float),
            y=col(lambda k, a: a.position[1]).astype(float),
            vx=col(lambda k, a: a.velocity[0]).astype(float),
            vy=col(lambda k, a: a.velocity[1]).astype(float),
            ax=col(lambda k, a: a.acceleration[0]).astype(float),
            ay=col(lambda k, a: a.acceleration[1]).astype(float),
            heading=col(lambda k, a: a.heading).astype(float),
            length=col(lambda k, a: a.length).astype(float),
            width=col(lambda k, a: a.width).astype(float),
            cls=np.array([a.cls for _, a in rows], dtype=object),
            lane=col(lambda k, a: -1 if a.lane_id is None else a.lane_id).astype(int),
        )
        return cls(table, frame_rate, location_tag, tuple(lanes))


def is_heavy(state: AgentState, heavy=HEAVY_CLASSES) -> bool:
    return state.cls in heavy


# -- CSV loading ---------------------------------------------------------------

class UnreadableFile(IngestError):
    pass


def _read_csv(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise UnreadableFile(f"{path}: {e.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyRecording(f"{path}: no header row") from None
        rows = [(reader.line_num, r) for r in reader if r and any(c.strip() for c in r)]
    return header, rows


def _resolve(header, candidates):
    for name in candidates:
        if name in header:
            return header.index(name)
    return None


def _to_float(value: str, line: int, path) -> float:
    try:
        v = float(value)
    except ValueError:
        raise MalformedRow(line, path, f"not a number: {value!r}") from None
    if not math.isfinite(v):
        raise MalformedRow(line, path, f"non-finite value {value!r}")
    return v


def _load_meta(meta_path: Path, schema: str) -> dict[int, str]:
    header, rows = _read_csv(meta_path)
    id_col = _resolve(header, META_ID.get(schema, ("id",)))
    if id_col is None:
        raise MissingColumn(META_ID.get(schema, ("id",))[0], meta_path)
    cls_col = _resolve(header, ("class",))
    if cls_col is None:
        raise MissingColumn("class", meta_path)
    out = {}
    for line, r in rows:
        if len(r) != len(header):
            raise MalformedRow(line, meta_path, f"expected {len(header)} fields, got {len(r)}")
        out[int(_to_float(r[id_col], line, meta_path))] = normalize_class(r[cls_col])
    return out


def _backfill_acceleration(frame, ids, v, rate):
    """Central differences of velocity per agent (one-sided at track ends)."""
    a = np.zeros_like(v)
    order = np.lexsort((frame, ids))
    ids_s = ids[order]
    starts = np.flatnonzero(np.r_[True, ids_s[1:] != ids_s[:-1]])
    ends = np.r_[starts[1:], len(ids_s)]
    for s, e in zip(starts, ends):
        idx = order[s:e]
        if e - s >= 2:
            t = frame[idx] / rate
            a[idx] = np.gradient(v[idx], t)
    return a


def load_recording(tracks_path, meta_path, schema: str = "normalized",
                   frame_rate: float = 20.0, location_tag: str = "",
                   lanes=()) -> Recording:
    """Parse a tracks CSV plus its per-track meta CSV into a :class:`Recording`.

    ``schema`` selects the column adapter: ``normalized``, ``exid``/``round``/
    ``ind`` (levelX naming) or ``highd`` (corner-anchored boxes, no heading).
    """
    tracks_path, meta_path = Path(tracks_path), Path(meta_path)
    schema = schema.lower()
    if schema == "highd":
        cols = _load_highd(tracks_path)
    elif schema in ADAPTERS:
        cols = _load_adapted(tracks_path, ADAPTERS[schema])
    else:
        raise ValueError(f"unknown schema {schema!r}")
    classes = _load_meta(meta_path, schema)
    n = len(cols["frame"])
    if n == 0:
        raise EmptyRecording(f"{tracks_path}: no data rows")

    frame = cols["frame"].astype(int)
    ids = cols["id"].astype(int)
    for name, vname in (("x_acceleration", "x_velocity"), ("y_acceleration", "y_velocity")):
        if cols.get(name) is None:
            cols[name] = _backfill_acceleration(frame, ids, cols[vname], frame_rate)
    lane = cols.get("lane_id")
    lane = np.full(n, -1, dtype=int) if lane is None else lane.astype(int)
    table = TrackTable(
        frame=frame, id=ids,
        x=cols["x_center"], y=cols["y_center"],
        vx=cols["x_velocity"], vy=cols["y_velocity"],
        ax=cols["x_acceleration"], ay=cols["y_acceleration"],
        heading=wrap_angle(np.radians(cols["heading_deg"])),
        length=cols["length"], width=cols["width"],
        cls=np.array([classes.get(int(i), "other") for i in ids], dtype=object),
        lane=lane,
    )
    try:
        return Recording(table, frame_rate, location_tag or tracks_path.stem, tuple(lanes))
    except ValueError as exc:
        raise MalformedRow(0, tracks_path, str(exc)) from None


def _load_adapted(path: Path, adapter, required=REQUIRED) -> dict[str, np.ndarray | None]:
    header, rows = _read_csv(path)
    index = {}
    for name in COLUMNS:
        j = _resolve(header, adapter[name])
        if j is None and name in required:
            raise MissingColumn(adapter[name][0], path)
        index[name] = j
    data = {name: [] for name, j in index.items() if j is not None}
    for line, r in rows:
        if len(r) != len(header):
            raise MalformedRow(line, path, f"expected {len(header)} fields, got {len(r)}")
        for name in data:
            cell = r[index[name]]
            if name == "lane_id" and cell.strip() == "":
                data[name].append(-1.0)
            else:
                data[name].append(_to_float(cell, line, path))
    out = {name: None for name in COLUMNS}
    out.update({name: np.array(v, dtype=float) for name, v in data.items()})
    return out


def _load_highd(path: Path):
    # highD boxes are anchored at the upper-left corner; "width" runs along x
    # (vehicle length) and "height" across (vehicle width).
    adapter = {
        "frame": ("frame",), "id": ("id",), "x_center": ("x",), "y_center": ("y",),
        "x_velocity": ("xVelocity",), "y_velocity": ("yVelocity",),
        "x_acceleration": ("xAcceleration",), "y_acceleration": ("yAcceleration",),
        "heading_deg": ("__none__",), "width": ("height",), "length": ("width",),
        "lane_id": ("laneId",),
    }
    cols = _load_adapted(path, adapter, tuple(c for c in REQUIRED if c != "heading_deg"))
    cols["x_center"] = cols["x_center"] + 0.5 * cols["length"]
    cols["y_center"] = cols["y_center"] + 0.5 * cols["width"]
    cols["heading_deg"] = np.degrees(np.arctan2(cols["y_velocity"], cols["x_velocity"]))
    return cols


def load_lanes(path) -> tuple[LanePolyline, ...]:
    """Lane centerlines from ``lane_id,vertex_index,x,y,nominal_speed`` rows."""
    path = Path(path)
    header, rows = _read_csv(path)
    need = ("lane_id", "vertex_index", "x", "y")
    for name in need:
        if name not in header:
            raise MissingColumn(name, path)
    speed_col = _resolve(header, ("nominal_speed",))
    pts: dict[int, list] = {}
    speeds: dict[int, float] = {}
    for line, r in rows:
        lane = int(_to_float(r[header.index("lane_id")], line, path))
        vi = int(_to_float(r[header.index("vertex_index")], line, path))
        x = _to_float(r[header.index("x")], line, path)
        y = _to_float(r[header.index("y")], line, path)
        pts.setdefault(lane, []).append((vi, x, y))
        if speed_col is not None and r[speed_col].strip():
            speeds[lane] = _to_float(r[speed_col], line, path)
    out = []
    for lane in sorted(pts):
        verts = sorted(pts[lane])
        out.append(LanePolyline(lane, np.array([(x, y) for _, x, y in verts]), speeds.get(lane, 0.0)))
    return tuple(out)


# -- lane changes --------------------------------------------------------------

def _project_onto_polyline(points: np.ndarray, p) -> tuple[np.ndarray, float]:
    """Closest point on a polyline and its distance."""
    a, b = points[:-1], points[1:]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(1), 1e-12)
    s = np.clip(((np.asarray(p) - a) * ab).sum(1) / denom, 0.0, 1.0)
    proj = a + s[:, None] * ab
    d = np.hypot(*(proj - np.asarray(p)).T)
    k = int(np.argmin(d))
    return proj[k], float(d[k])


def infer_lane_ids(rec: Recording) -> np.ndarray:
    """Nearest lane centerline per row."""
    t = rec.tracks
    lanes = [ln for ln in rec.lanes if len(ln.points) >= 2]
    out = np.full(len(t), -1, dtype=int)
    for r in range(len(t)):
        best = min(lanes, key=lambda ln: _project_onto_polyline(ln.points, (t.x[r], t.y[r]))[1])
        out[r] = best.lane_id
    return out


def detect_lane_changes(rec: Recording, t_dec_offset: float = 1.0) -> list[LaneChangeEvent]:
    """One event per lane-id transition of each agent, ordered by (agent, time)."""
    t = rec.tracks
    if t.has_lanes:
        lane = t.lane
    elif any(len(ln.points) >= 2 for ln in rec.lanes):
        lane = infer_lane_ids(rec)
    else:
        raise NoLaneInformation("recording has neither lane ids nor lane geometry")

    polylines = {ln.lane_id: ln for ln in rec.lanes if len(ln.points) >= 2}
    rate = rec.frame_rate
    events = []
    for agent in rec.agent_ids():
        idx = np.flatnonzero((t.id == agent) & (lane >= 0))
        if len(idx) < 2:
            continue
        idx = idx[np.argsort(t.frame[idx])]
        lanes_a = lane[idx]
        first_t = t.frame[idx[0]] / rate
        for k in np.flatnonzero(lanes_a[1:] != lanes_a[:-1]) + 1:
            t_cross = t.frame[idx[k]] / rate
            t_dec = max(t_cross - t_dec_offset, first_t)
            r_dec = idx[int(np.argmin(np.abs(t.frame[idx] / rate - t_dec)))]
            x_curr = (float(t.x[r_dec]), float(t.y[r_dec]))
            to_lane = int(lanes_a[k])
            if to_lane in polylines:
                proj, _ = _project_onto_polyline(polylines[to_lane].points, x_curr)
                x_target = (float(proj[0]), float(proj[1]))
            else:
                x_target = (x_curr[0], _empirical_lane_center(t, lane, to_lane, x_curr[0]))
            events.append(LaneChangeEvent(agent, float(t_cross), float(t_dec), x_curr,
                                          x_target, int(lanes_a[k - 1]), to_lane))
    return events


def _empirical_lane_center(t: TrackTable, lane, lane_id, station, window=10.0) -> float:
    in_lane = lane == lane_id
    near = in_lane & (np.abs(t.x - station) <= window)
    sel = near if near.any() else in_lane
    return float(np.median(t.y[sel]))


def write_recording(rec: Recording, tracks_path, meta_path) -> None:
    """Write ``rec`` in the normalized schema (tracks plus per-track meta)."""
    t = rec.tracks
    with open(tracks_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(t)):
            w.writerow([int(t.frame[i]), int(t.id[i])]
                       + [repr(float(c[i])) for c in (t.x, t.y, t.vx, t.vy, t.ax, t.ay)]
                       + [repr(float(np.degrees(t.heading[i]))), repr(float(t.width[i])),
                          repr(float(t.length[i])), int(t.lane[i])])
    with open(meta_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "class"))
        for aid in rec.agent_ids():
            w.writerow((aid, rec.agent_class(aid)))
