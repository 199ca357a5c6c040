"""Field-native evaluation metrics and the surrogate-safety helpers that anchor them.

Series-based metrics take a frame-indexed region-mean series ``(frames, values)``
plus the frame rate, so that time differences are formed from integer frame
counts and stay exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from scipy.integrate import trapezoid

from .grid import GridSpec, ScalarField, world_to_cell
from .ingest import AgentState, LaneChangeEvent
from .shadow import Rect


class MetricError(ValueError):
    """Degenerate metric input; ``metric`` names the affected metric."""

    metric = ""

    def __init__(self, msg="", metric=None):
        if metric:
            self.metric = metric
        super().__init__(msg or f"degenerate input for {self.metric}")


class NoUsableEvents(MetricError):
    pass


class ZeroPeak(MetricError):
    metric = "rpr"


class DegenerateRho(MetricError):
    metric = "osi"


class SeriesTooShort(MetricError):
    metric = "temp"


class NoPairs(MetricError):
    metric = "delta_coll"


METRIC_ORDER = ("lcrd", "rpr", "tai", "osi", "orl", "delta_coll", "temp")


@dataclass(frozen=True)
class RegionSpec:
    """Ego-anchored forward window, or an explicit boolean cell set."""

    length: float = 30.0
    width: float = 12.0
    cells: np.ndarray | None = None

    def mask(self, grid: GridSpec, ego_pos=None, ego_heading: float = 0.0) -> np.ndarray:
        if self.cells is not None:
            return np.asarray(self.cells, bool).reshape(grid.shape)
        X, Y = grid.mesh()
        c, s = math.cos(ego_heading), math.sin(ego_heading)
        dx, dy = X - ego_pos[0], Y - ego_pos[1]
        r_par = c * dx + s * dy
        r_perp = -s * dx + c * dy
        return (r_par > 0) & (r_par < self.length) & (np.abs(r_perp) < 0.5 * self.width)


@dataclass
class HazardEvent:
    t_event: float
    pair: tuple[int, int]
    trigger: str = "ttc_below"
    t_end: float | None = None

    def __post_init__(self):
        if self.trigger not in ("ttc_below", "gap_below"):
            raise ValueError(f"unknown trigger {self.trigger!r}")
        if self.t_end is None:
            self.t_end = self.t_event
        if self.t_end < self.t_event:
            raise ValueError("event must end after it starts")


@dataclass
class MetricsReport:
    lcrd: float | None = None
    rpr: float | None = None
    tai: float | None = None
    osi: float | None = None
    orl: float | None = None
    delta_coll: float | None = None
    temp: float | None = None
    counts: dict = field(default_factory=dict)
    theta: float | None = None
    extras: dict = field(default_factory=dict)

    def value(self, name):
        return getattr(self, name)

    def lines(self) -> list[str]:
        out = []
        if self.theta is not None:
            out.append(f"theta={self.theta:.4f}")
        for name in METRIC_ORDER:
            v = getattr(self, name)
            n = self.counts.get(name, 0)
            if v is not None:
                out.append(f"{name}={v:.4f}")
            out.append(f"{name}_n={n}")
        for key in sorted(self.extras):
            out.append(f"{key}={self.extras[key]:.4f}")
        return out

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.lines()) + "\n")
        return path


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


# -- surrogate safety --------------------------------------------------------------

def agent_rect(a: AgentState) -> Rect:
    return Rect(a.position[0], a.position[1], a.heading, a.length, a.width)


def _ray_half_extent(rect: Rect, ux: float, uy: float) -> float:
    """Distance from a rectangle's centre to its boundary along unit direction u."""
    c, s = math.cos(rect.heading), math.sin(rect.heading)
    along = abs(ux * c + uy * s)
    across = abs(-ux * s + uy * c)
    cands = []
    if along > 1e-12:
        cands.append(0.5 * rect.length / along)
    if across > 1e-12:
        cands.append(0.5 * rect.width / across)
    return min(cands)


def centerline_gap(ego: AgentState, other: AgentState) -> float:
    """Bumper-to-bumper gap measured along the line joining the two centres."""
    dx = other.position[0] - ego.position[0]
    dy = other.position[1] - ego.position[1]
    d = math.hypot(dx, dy)
    if d == 0:
        return -math.inf
    ux, uy = dx / d, dy / d
    return d - _ray_half_extent(agent_rect(ego), ux, uy) - _ray_half_extent(agent_rect(other), ux, uy)


def closing_speed(ego: AgentState, other: AgentState) -> float:
    dx = other.position[0] - ego.position[0]
    dy = other.position[1] - ego.position[1]
    d = math.hypot(dx, dy)
    if d == 0:
        return 0.0
    dvx = other.velocity[0] - ego.velocity[0]
    dvy = other.velocity[1] - ego.velocity[1]
    return -(dvx * dx + dvy * dy) / d


def ttc(ego: AgentState, other: AgentState) -> float | None:
    """Time to collision along the centre line; ``None`` when not closing."""
    gap = centerline_gap(ego, other)
    vc = closing_speed(ego, other)
    if vc <= 0 or gap <= 0:
        return None
    return gap / vc


def rect_gap(a: AgentState, b: AgentState) -> float:
    pa = shapely.Polygon(agent_rect(a).corners())
    pb = shapely.Polygon(agent_rect(b).corners())
    return float(pa.distance(pb))


def in_path(ego: AgentState, other: AgentState, margin: float = 0.5) -> bool:
    """Lateral overlap of ``other`` with the ego's swept path (ego body frame)."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    r_perp = -s * (other.position[0] - ego.position[0]) + c * (other.position[1] - ego.position[1])
    return abs(r_perp) < 0.5 * (ego.width + other.width) + margin


def near_collision(ego: AgentState, others, ttc_threshold: float = 1.5,
                   gap_threshold: float = 2.0, margin: float = 0.5) -> bool:
    for o in others:
        if o.id == ego.id or not in_path(ego, o, margin):
            continue
        t = ttc(ego, o)
        if t is not None and t < ttc_threshold:
            return True
        if rect_gap(ego, o) < gap_threshold:
            return True
    return False


def detect_hazard_events(frames, ego_id, rate: float, ttc_threshold: float = 2.0,
                         margin: float = 0.5) -> list[HazardEvent]:
    """Onsets of ``TTC < threshold`` between the ego and in-path agents."""
    active: dict[int, float] = {}
    last_t: dict[int, float] = {}
    events: list[HazardEvent] = []
    for fr in frames:
        ego = fr.agent(ego_id)
        if ego is None:
            continue
        below_now = set()
        for o in fr.agents:
            if o.id == ego_id or not in_path(ego, o, margin):
                continue
            t = ttc(ego, o)
            if t is not None and t < ttc_threshold:
                below_now.add(o.id)
                if o.id not in active:
                    active[o.id] = fr.index / rate
                last_t[o.id] = fr.index / rate
        for oid in sorted(set(active) - below_now):
            events.append(HazardEvent(active.pop(oid), (ego_id, oid), "ttc_below", last_t[oid]))
    for oid in sorted(active):
        events.append(HazardEvent(active[oid], (ego_id, oid), "ttc_below", last_t[oid]))
    return sorted(events, key=lambda e: (e.t_event, e.pair))


# -- field metrics -------------------------------------------------------------------

def lcrd(events, field_at) -> float:
    """Share of lane changes whose target cell is strictly less risky.

    ``field_at(t)`` returns the :class:`ScalarField` in force at ``t`` or
    ``None``; events without a field or with out-of-domain points are dropped.
    """
    good = total = 0
    for ev in events:
        f = field_at(ev.t_dec)
        if f is None:
            continue
        a = world_to_cell(f.spec, ev.x_curr)
        b = world_to_cell(f.spec, ev.x_target)
        if a is None or b is None:
            continue
        total += 1
        if f[a] > f[b]:
            good += 1
    if total == 0:
        raise NoUsableEvents("no lane change covered by the field", metric="lcrd")
    return good / total


def lcrd_count(events, field_at) -> int:
    n = 0
    for ev in events:
        f = field_at(ev.t_dec)
        if f is not None and world_to_cell(f.spec, ev.x_curr) and world_to_cell(f.spec, ev.x_target):
            n += 1
    return n


def anticipation(t_event: float, t_field: float, t_r: float = 1.5) -> float:
    return (t_event - t_field) / t_r


def _to_frame(t: float, rate: float) -> int:
    return int(round(t * rate))


def field_crossing(frames, values, k_event: int, theta: float, horizon_frames: int) -> int | None:
    """First frame in ``[k_event - horizon, k_event]`` where the series exceeds theta."""
    frames = np.asarray(frames)
    values = np.asarray(values, float)
    sel = (frames >= k_event - horizon_frames) & (frames <= k_event) & np.isfinite(values)
    hits = frames[sel][values[sel] > theta]
    return int(hits.min()) if len(hits) else None


def tai(events, frames, values, rate: float, theta: float = 0.15, t_r: float = 1.5,
        horizon: float = 10.0) -> float:
    """Mean lead of the field crossing over each event, in reaction times."""
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise NoUsableEvents("empty series", metric="tai")
    covered = [e for e in events if frames.min() <= _to_frame(e.t_event, rate) <= frames.max()]
    if not covered:
        raise NoUsableEvents("no hazard event inside the series", metric="tai")
    h = _to_frame(horizon, rate)
    leads = []
    for e in covered:
        k_e = _to_frame(e.t_event, rate)
        k_f = field_crossing(frames, values, k_e, theta, h)
        leads.append(0.0 if k_f is None else (k_e - k_f) / (rate * t_r))
    return math.fsum(leads) / len(leads)


def tai_count(events, frames, rate) -> int:
    frames = np.asarray(frames)
    if len(frames) == 0:
        return 0
    return sum(frames.min() <= _to_frame(e.t_event, rate) <= frames.max() for e in events)


def rpr(frames, values, event: HazardEvent, rate: float, delta_t: float = 2.0) -> float:
    """Post-event risk retention over ``delta_t``, relative to the in-event peak."""
    frames = np.asarray(frames)
    values = np.asarray(values, float)
    k0, k1 = _to_frame(event.t_event, rate), _to_frame(event.t_end, rate)
    k2 = k1 + _to_frame(delta_t, rate)
    if frames.min() > k0 or frames.max() < k2:
        raise NoUsableEvents("series does not cover the event and its aftermath", metric="rpr")
    span = values[(frames >= k0) & (frames <= k1)]
    peak = float(np.nanmax(span)) if len(span) else 0.0
    if not peak > 0:
        raise ZeroPeak("region-mean risk never rises during the event")
    sel = (frames >= k1) & (frames <= k2)
    t = frames[sel] / rate
    area = float(trapezoid(np.nan_to_num(values[sel]), t))
    return area / (peak * delta_t)


def osi(rho, rbar) -> float:
    """Least-squares slope of region-mean risk against occlusion ratio."""
    rho = np.asarray(rho, float)
    rbar = np.asarray(rbar, float)
    ok = np.isfinite(rho) & np.isfinite(rbar)
    rho, rbar = rho[ok], rbar[ok]
    if len(np.unique(rho)) < 2:
        raise DegenerateRho("occlusion ratio takes fewer than two distinct values")
    x = rho - rho.mean()
    return float((x * (rbar - rbar.mean())).sum() / (x * x).sum())


@dataclass(frozen=True)
class Latency:
    value: float
    capped: bool = False


def orl(frames, values, t_shadow: float, rate: float, theta: float = 0.15,
        direction: str = "clearance", cap: float = 5.0) -> Latency:
    """Delay between a shadow transition and the matching threshold crossing."""
    if direction not in ("onset", "clearance"):
        raise ValueError(f"unknown direction {direction!r}")
    frames = np.asarray(frames)
    values = np.asarray(values, float)
    k_s = _to_frame(t_shadow, rate)
    k_cap = k_s + _to_frame(cap, rate)
    sel = (frames >= k_s) & (frames <= k_cap)
    hit = values[sel] > theta if direction == "onset" else values[sel] < theta
    if not hit.any():
        return Latency(cap, True)
    return Latency((int(frames[sel][hit].min()) - k_s) / rate, False)


def clearance_latencies(R: np.ndarray, occ: np.ndarray, q_visible: np.ndarray, rate: float,
                        theta: float = 0.15, cap: float = 5.0) -> np.ndarray:
    """Per-cell clearance latencies for every occluded-to-visible transition.

    Only cells whose occlusion-free evidence (vehicle + merge sources) is
    below theta at the transition count: there the remaining risk is purely
    latent and should clear. A cell that has not cleared when the record ends
    short of the cap is censored and dropped. Arrays are ``(frames, ny, nx)``
    on a common frame clock.
    """
    n_f = R.shape[0]
    cap_k = int(round(cap * rate))
    below = R < theta
    out = []
    for k in range(1, n_f):
        cells = occ[k - 1] & ~occ[k] & (q_visible[k] < theta)
        if not cells.any():
            continue
        stop = min(n_f, k + cap_k + 1)
        hist = below[k:stop][:, cells]  # (lookahead, n_cells)
        found = hist.any(axis=0)
        first = np.argmax(hist, axis=0)
        lat = np.where(found, first / rate, cap)
        if stop - k < cap_k + 1:
            lat = lat[found]
        out.append(lat)
    return np.concatenate(out) if out else np.zeros(0)


def temporal_consistency(series) -> float:
    """Lag-1 Pearson autocorrelation; a constant series counts as perfectly consistent."""
    x = np.asarray(series, float)
    x = x[np.isfinite(x)]
    if len(x) < 3:
        raise SeriesTooShort(f"need at least 3 samples, got {len(x)}")
    a, b = x[:-1], x[1:]
    sa, sb = a.std(), b.std()
    if np.ptp(x) == 0:
        return 1.0
    if sa == 0 or sb == 0:
        return 0.0
    r = float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))
    return max(-1.0, min(1.0, r))


def delta_coll(pairs) -> float:
    """Near-collision rate under occlusion minus under visibility, in points.

    ``pairs`` holds ``(occluded_hit, visible_hit)`` booleans per paired episode.
    """
    pairs = list(pairs)
    if not pairs:
        raise NoPairs("no paired episodes")
    occ = sum(bool(a) for a, _ in pairs) / len(pairs)
    vis = sum(bool(b) for _, b in pairs) / len(pairs)
    return (occ - vis) * 100.0
