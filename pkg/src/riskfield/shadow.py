"""Ego-view occlusion: shadow masks on the grid and occlusion-window extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import GridSpec, ScalarField
from .ingest import HEAVY_CLASSES, Frame, Recording


class EgoMissing(Exception):
    pass


class EmptyRoi(ValueError):
    pass


@dataclass(frozen=True)
class SelectionZone:
    length: float = 90.0  # forward extent along the ego heading
    half_width: float = 18.0

    def __post_init__(self):
        if not (self.length > 0 and self.half_width > 0):
            raise ValueError("selection zone extents must be positive")

    def contains(self, r_par, r_perp):
        return (r_par > 0) & (r_par < self.length) & (np.abs(r_perp) < self.half_width)


@dataclass(frozen=True)
class OcclusionWindow:
    start: int
    end: int  # inclusive

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"window start {self.start} after end {self.end}")

    def frames(self) -> range:
        return range(self.start, self.end + 1)

    def __len__(self):
        return self.end - self.start + 1


@dataclass
class ShadowMask:
    S: ScalarField
    dS_dt: ScalarField
    occ: np.ndarray  # bool, S > theta_S
    hard: np.ndarray  # bool, unsmoothed geometric shadow

    @classmethod
    def empty(cls, spec: GridSpec, t: float = 0.0) -> "ShadowMask":
        z = np.zeros(spec.shape)
        return cls(ScalarField(spec, z, t), ScalarField(spec, z.copy(), t),
                   np.zeros(spec.shape, bool), np.zeros(spec.shape, bool))


def rotation(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, s], [-s, c]])


def ego_frame_transform(p_j, p_e, psi_e: float) -> tuple[float, float]:
    """Longitudinal/lateral offset of ``p_j`` in the ego body frame."""
    r = rotation(psi_e) @ (np.asarray(p_j, float) - np.asarray(p_e, float))
    return float(r[0]), float(r[1])


@dataclass(frozen=True)
class Rect:
    """Oriented rectangle: centre, heading, full length along heading, full width."""

    cx: float
    cy: float
    heading: float
    length: float
    width: float

    def to_local(self, x, y):
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx, dy = np.asarray(x) - self.cx, np.asarray(y) - self.cy
        return c * dx + s * dy, -s * dx + c * dy

    def contains(self, x, y):
        u, v = self.to_local(x, y)
        return (np.abs(u) <= 0.5 * self.length) & (np.abs(v) <= 0.5 * self.width)

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + (self.cx, self.cy)


def segment_enters_rect(ex: float, ey: float, px, py, rect: Rect):
    """Slab test for segments ``e -> p``; true where the rectangle is entered before ``p``.

    Returns a bool array shaped like ``px``. A segment only grazing the
    rectangle at ``p`` itself (entry parameter 1) does not count.
    """
    eu, ev = rect.to_local(ex, ey)
    pu, pv = rect.to_local(px, py)
    t_in = np.zeros(np.shape(pu))
    t_out = np.ones(np.shape(pu))
    ok = np.ones(np.shape(pu), bool)
    for e0, p0, half in ((eu, pu, 0.5 * rect.length), (ev, pv, 0.5 * rect.width)):
        d = p0 - e0
        par = np.abs(d) < 1e-12
        ok &= ~(par & (abs(e0) > half))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - e0) / d
            t2 = (half - e0) / d
        lo = np.where(par, -np.inf, np.minimum(t1, t2))
        hi = np.where(par, np.inf, np.maximum(t1, t2))
        t_in = np.maximum(t_in, lo)
        t_out = np.minimum(t_out, hi)
    return ok & (t_in <= t_out) & (t_in < 1.0)


def occluder_rects(frame: Frame, ego_id, heavy=HEAVY_CLASSES) -> list[Rect]:
    """Heavy agents ahead of the ego (positive longitudinal offset)."""
    ego = frame.agent(ego_id)
    if ego is None:
        raise EgoMissing(f"ego {ego_id} not present in frame {frame.index}")
    rects = []
    for a in frame.agents:
        if a.id == ego_id or a.cls not in heavy:
            continue
        r_par, _ = ego_frame_transform(a.position, ego.position, ego.heading)
        if r_par <= 0:
            continue
        rect = Rect(a.position[0], a.position[1], a.heading, a.length, a.width)
        if bool(rect.contains(*ego.position)):
            continue
        rects.append(rect)
    return rects


def hard_shadow(frame: Frame, ego_id, grid: GridSpec, heavy=HEAVY_CLASSES) -> np.ndarray:
    ego = frame.agent(ego_id)
    rects = occluder_rects(frame, ego_id, heavy)
    X, Y = grid.mesh()
    out = np.zeros(grid.shape, bool)
    ex, ey = ego.position
    for rect in rects:
        out |= segment_enters_rect(ex, ey, X, Y, rect)
    return out


def smooth_shadow(hard: np.ndarray, grid: GridSpec, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return hard.astype(float)
    s = gaussian_filter(hard.astype(float), sigma=(sigma / grid.dy, sigma / grid.dx),
                        mode="nearest", truncate=3.0)
    return np.clip(s, 0.0, 1.0)


def compute_shadow_mask(frame: Frame, ego_id, grid: GridSpec, heavy=HEAVY_CLASSES,
                        sigma_s: float = 1.5, theta_s: float = 0.5,
                        prev: ShadowMask | None = None) -> ShadowMask:
    hard = hard_shadow(frame, ego_id, grid, heavy)
    S = smooth_shadow(hard, grid, sigma_s)
    if prev is not None:
        dS = (S - prev.S.values) * grid.frame_rate
    else:
        dS = np.zeros(grid.shape)
    return ShadowMask(ScalarField(grid, S, frame.t), ScalarField(grid, dS, frame.t),
                      S > theta_s, hard)


def point_occluded(ego_pos, point, rects) -> bool:
    px, py = np.array([point[0]]), np.array([point[1]])
    return any(bool(segment_enters_rect(ego_pos[0], ego_pos[1], px, py, r)[0]) for r in rects)


def hidden_agent_ids(frame: Frame, ego_id, heavy=HEAVY_CLASSES) -> set[int]:
    """Agents whose centre and all four corners are out of the ego's line of sight."""
    ego = frame.agent(ego_id)
    rects = occluder_rects(frame, ego_id, heavy)
    if not rects:
        return set()
    hidden = set()
    for a in frame.agents:
        if a.id == ego_id:
            continue
        own = Rect(a.position[0], a.position[1], a.heading, a.length, a.width)
        blockers = [r for r in rects if (r.cx, r.cy) != (own.cx, own.cy)]
        pts = [a.position, *own.corners()]
        if blockers and all(point_occluded(ego.position, p, blockers) for p in pts):
            hidden.add(a.id)
    return hidden


def occlusion_ratio(mask: ShadowMask, roi: np.ndarray) -> float:
    roi = np.asarray(roi, bool)
    n = int(roi.sum())
    if n == 0:
        raise EmptyRoi("region of interest has no cells")
    return float((mask.occ & roi).sum()) / n


# -- occlusion windows -----------------------------------------------------------

def pad_frames(t_pad: float, frame_rate: float) -> int:
    # tolerance keeps e.g. 2.0 * 20 from rounding up to 41
    return int(math.ceil(t_pad * frame_rate - 1e-9))


def flagged_frames(rec: Recording, ego_id, zone: SelectionZone = SelectionZone(),
                   heavy=HEAVY_CLASSES) -> np.ndarray:
    """Frame indices in which a heavy agent sits inside the ego's forward zone."""
    t = rec.tracks
    is_ego = t.id == ego_id
    if not is_ego.any():
        raise EgoMissing(f"ego {ego_id} never appears in the recording")
    ego_frames = t.frame[is_ego]
    heavy_mask = np.isin(t.cls, list(heavy)) & ~is_ego
    cand = np.flatnonzero(heavy_mask & np.isin(t.frame, ego_frames))
    if len(cand) == 0:
        return np.array([], dtype=int)
    pos = np.searchsorted(ego_frames, t.frame[cand])
    ego_rows = np.flatnonzero(is_ego)[pos]
    psi = t.heading[ego_rows]
    dx = t.x[cand] - t.x[ego_rows]
    dy = t.y[cand] - t.y[ego_rows]
    c, s = np.cos(psi), np.sin(psi)
    r_par = c * dx + s * dy
    r_perp = -s * dx + c * dy
    return np.unique(t.frame[cand][zone.contains(r_par, r_perp)])


def group_runs(frames) -> list[tuple[int, int]]:
    frames = np.asarray(sorted(set(int(k) for k in frames)), dtype=int)
    if len(frames) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frames) != 1)
    starts = np.r_[frames[0], frames[breaks + 1]]
    ends = np.r_[frames[breaks], frames[-1]]
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def extract_occlusion_windows(rec: Recording, ego_id, zone: SelectionZone = SelectionZone(),
                              heavy=HEAVY_CLASSES, t_pad: float = 2.0) -> list[OcclusionWindow]:
    """Padded occlusion windows for one ego, sorted and disjoint.

    Runs are clamped to the recording's frame range; padded runs that overlap
    or touch are merged.
    """
    flagged = flagged_frames(rec, ego_id, zone, heavy)
    pad = pad_frames(t_pad, rec.frame_rate)
    first, last = int(rec.frame_indices[0]), int(rec.frame_indices[-1])
    windows: list[list[int]] = []
    for s, e in group_runs(flagged):
        s, e = max(first, s - pad), min(last, e + pad)
        if windows and s <= windows[-1][1] + 1:
            windows[-1][1] = max(windows[-1][1], e)
        else:
            windows.append([s, e])
    return [OcclusionWindow(s, e) for s, e in windows]
