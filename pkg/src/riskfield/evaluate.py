"""Turn evolved window runs into a :class:`MetricsReport`.

Metric series use the normalised field ``scale * R``. PDE arms use
``scale = lam0`` so that a lone car's steady-state peak sits near 1; the
frame-wise static field is already in those units and uses ``scale = 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, ScalarField
from .ingest import LaneChangeEvent, Recording
from .metrics import (
    HazardEvent, MetricError, MetricsReport, NoUsableEvents, RegionSpec, clearance_latencies,
    detect_hazard_events, lcrd, osi, rpr, tai, tai_count, temporal_consistency,
)
from .pde import WindowRun


@dataclass
class MetricSettings:
    region: RegionSpec = RegionSpec()
    theta: float = 0.15
    t_r: float = 1.5
    horizon: float = 10.0
    delta_t: float = 2.0
    orl_cap: float = 5.0
    ttc_event: float = 2.0


@dataclass
class RunSummary:
    ego_id: int
    frames: np.ndarray
    rbar: np.ndarray
    rho: np.ndarray
    latencies: np.ndarray
    snapshots: dict = field(default_factory=dict)  # frame -> normalised ScalarField


def summarize_run(run: WindowRun, rec: Recording, grid: GridSpec, scale: float,
                  settings: MetricSettings = MetricSettings(), keep_frames=()) -> RunSummary:
    rate = rec.frame_rate
    frames, rbar, rho = [], [], []
    snaps = {}
    keep = set(int(k) for k in keep_frames)
    for r in run.results:
        ego = rec.frame(r.frame).agent(run.ego_id)
        roi = settings.region.mask(grid, ego.position, ego.heading)
        Rn = scale * r.state.R.values
        frames.append(r.frame)
        if roi.any():
            rbar.append(float(Rn[roi].mean()))
            rho.append(float(r.occ[roi].mean()))
        else:
            rbar.append(np.nan)
            rho.append(np.nan)
        if r.frame in keep:
            snaps[r.frame] = ScalarField(grid, Rn, r.t)
    if run.results:
        R = np.stack([scale * r.state.R.values for r in run.results])
        occ = np.stack([r.occ for r in run.results])
        qv = np.stack([r.q_visible for r in run.results])
        lat = clearance_latencies(R, occ, qv, rate, settings.theta, settings.orl_cap)
    else:
        lat = np.zeros(0)
    return RunSummary(run.ego_id, np.array(frames, int), np.array(rbar), np.array(rho), lat, snaps)


def hazard_events_for(rec: Recording, summary: RunSummary, settings: MetricSettings) -> list[HazardEvent]:
    frames = [rec.frame(int(k)) for k in summary.frames]
    return detect_hazard_events(frames, summary.ego_id, rec.frame_rate, settings.ttc_event)


def lane_change_frames(events: list[LaneChangeEvent], rate: float) -> list[int]:
    return [int(round(ev.t_dec * rate)) for ev in events]


def build_report(summaries: list[RunSummary], rec_rate: float, settings: MetricSettings,
                 lane_changes=(), hazards: dict | None = None, delta_coll: float | None = None,
                 n_pairs: int = 0) -> tuple[MetricsReport, dict]:
    """Aggregate run summaries; returns the report and ``{metric: error}`` for degenerate inputs."""
    rep = MetricsReport(theta=settings.theta)
    errors: dict[str, MetricError] = {}
    hazards = hazards or {}

    # LCRD: the lane-changing agent's own run is preferred, else any run covering t_dec
    hits = []
    for ev in lane_changes:
        k = int(round(ev.t_dec * rec_rate))
        pool = [s for s in summaries if k in s.snapshots]
        pool = [s for s in pool if s.ego_id == ev.agent_id] or pool
        if not pool:
            continue
        snap = pool[0].snapshots[k]
        try:
            hits.append(lcrd([ev], lambda t, snap=snap: snap))
        except NoUsableEvents:
            pass
    rep.counts["lcrd"] = len(hits)
    if hits:
        rep.lcrd = float(np.mean(hits))

    # TAI and RPR share the hazard events, evaluated on the ego's own series
    leads, tai_n = [], 0
    rprs = []
    for i, s in enumerate(summaries):
        evs = hazards.get(i, [])
        if not evs:
            continue
        n = tai_count(evs, s.frames, rec_rate)
        if n:
            leads.append(n * tai(evs, s.frames, s.rbar, rec_rate, settings.theta, settings.t_r,
                                 settings.horizon))
            tai_n += n
        for ev in evs:
            try:
                rprs.append(rpr(s.frames, s.rbar, ev, rec_rate, settings.delta_t))
            except NoUsableEvents:
                pass
            except MetricError as e:
                errors.setdefault("rpr", e)
    rep.tai = float(sum(leads) / tai_n) if tai_n else 0.0
    rep.counts["tai"] = tai_n
    if rprs:
        rep.rpr = float(np.mean(rprs))
        errors.pop("rpr", None)
    rep.counts["rpr"] = len(rprs)

    # OSI pooled over every frame of every window
    rho = np.concatenate([s.rho for s in summaries]) if summaries else np.zeros(0)
    rb = np.concatenate([s.rbar for s in summaries]) if summaries else np.zeros(0)
    ok = np.isfinite(rho) & np.isfinite(rb)
    rep.counts["osi"] = 0
    if ok.any():
        try:
            rep.osi = osi(rho[ok], rb[ok])
            rep.counts["osi"] = int(ok.sum())
        except MetricError as e:
            errors["osi"] = e

    lat = np.concatenate([s.latencies for s in summaries]) if summaries else np.zeros(0)
    rep.counts["orl"] = len(lat)
    if len(lat):
        rep.orl = float(lat.mean())
        rep.extras["orl_capped"] = float(np.mean(lat >= settings.orl_cap))

    temps = []
    for s in summaries:
        series = s.rbar[np.isfinite(s.rbar)]
        if len(series) >= 3:
            temps.append(temporal_consistency(series))
    rep.counts["temp"] = len(temps)
    if temps:
        rep.temp = float(np.mean(temps))

    rep.delta_coll = delta_coll
    rep.counts["delta_coll"] = n_pairs
    return rep, errors


def evaluate_runs(rec: Recording, runs: list[WindowRun], grid: GridSpec, scale: float,
                  settings: MetricSettings = MetricSettings(), lane_changes=()) -> tuple[MetricsReport, dict]:
    keep = lane_change_frames(list(lane_changes), rec.frame_rate)
    summaries = [summarize_run(r, rec, grid, scale, settings, keep) for r in runs]
    hazards = {i: hazard_events_for(rec, s, settings) for i, s in enumerate(summaries)}
    return build_report(summaries, rec.frame_rate, settings, lane_changes, hazards)
