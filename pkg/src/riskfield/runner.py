"""Work units behind the CLI, picklable so they can fan out to worker processes.

Every task takes plain values and returns plain results; the caller gathers
them in submission order, so outputs do not depend on the worker count.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

from .ablation import (
    ReactivePolicyParams, field_scale, merge_corpus, merge_grid, merge_topology, read_scenario,
    run_paired_episode, scenario_episode,
)
from .config import RunConfig, arm_by_name
from .evaluate import RunSummary, evaluate_runs, hazard_events_for, summarize_run
from .grid import GridSpec, format_grid_binary, format_grid_text
from .ingest import (
    HEAVY_CLASSES, VEHICLE_CLASSES, IngestError, Recording, detect_lane_changes, load_lanes,
    load_recording,
)
from .metrics import RegionSpec
from .pde import EvolverConfig, WindowRun, evolve_window
from .shadow import OcclusionWindow, extract_occlusion_windows
from .sources import MergeTopology, load_topology


def pmap(fn, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- inputs -------------------------------------------------------------------------

def _key(cfg: RunConfig) -> tuple:
    return tuple(sorted((k, v) for k, v in cfg.values.items())) + (str(cfg.base_dir),)


@lru_cache(maxsize=4)
def _inputs(key):
    cfg = RunConfig(dict(key[:-1]), Path(key[-1]))
    lanes = load_lanes(cfg.path("lanes")) if cfg.path("lanes") else ()
    tracks, meta = cfg.path("tracks"), cfg.path("meta")
    if tracks is None and meta is None and cfg.path("scenario"):
        return _scenario_inputs(cfg)
    if tracks is None or meta is None:
        raise IngestError("config needs both 'tracks' and 'meta' paths")
    rec = load_recording(tracks, meta, cfg["schema"], cfg["frame_rate"], cfg["location_tag"], lanes)
    topo = None
    if cfg.path("topology"):
        topo = load_topology(cfg.path("topology"), cfg.path("lanes"), cfg["sigma_m"])
    elif lanes:
        topo = MergeTopology((), lanes, cfg["sigma_m"])
    return rec, topo


def _scenario_inputs(cfg: RunConfig):
    path = cfg.path("scenario")
    if not path.is_file():
        raise IngestError(f"cannot read scenario {path}")
    topo = merge_topology(length=max(400.0, cfg["nx"] * cfg["dx"]), sigma_m=cfg["sigma_m"])
    if cfg.path("topology"):
        topo = load_topology(cfg.path("topology"), cfg.path("lanes"), cfg["sigma_m"])
    try:
        sc = read_scenario(path, topo)
    except (ValueError, KeyError) as e:
        raise IngestError(f"{path}: {e}") from None
    return sc.recording(), topo


def load_inputs(cfg: RunConfig):
    return _inputs(_key(cfg))


def evolver_config(cfg: RunConfig, force_dt=None) -> EvolverConfig:
    return EvolverConfig(HEAVY_CLASSES, cfg["sigma_s"], cfg["theta_s"], cfg["hide_occluded"],
                         True, force_dt)


def select_egos(rec: Recording, cfg: RunConfig) -> list[int]:
    egos = cfg.egos()
    if egos is not None:
        return egos
    return [a for a in rec.agent_ids()
            if rec.agent_class(a) in VEHICLE_CLASSES and rec.agent_class(a) not in HEAVY_CLASSES]


def all_windows(rec: Recording, cfg: RunConfig) -> list[tuple[int, OcclusionWindow]]:
    out = []
    ids = set(rec.agent_ids())
    for ego in select_egos(rec, cfg):
        if ego not in ids:
            continue
        for w in extract_occlusion_windows(rec, ego, cfg.zone(), HEAVY_CLASSES, cfg["t_pad"]):
            out.append((ego, w))
    return out


# -- tasks --------------------------------------------------------------------------

@dataclass
class WindowTask:
    cfg: RunConfig
    ego: int
    start: int
    end: int
    arm: str | None = None
    force_dt: float | None = None
    dump_every: int = 0


def _grid_for(cfg: RunConfig, rec: Recording) -> GridSpec:
    g = cfg.grid()
    return GridSpec(g.nx, g.ny, g.dx, g.dy, g.origin, rec.frame_rate)


def _evolve(task: WindowTask) -> tuple[Recording, WindowRun, GridSpec, object]:
    cfg = task.cfg
    rec, topo = load_inputs(cfg)
    arm = cfg.arm() if task.arm is None else arm_by_name(task.arm)
    grid = _grid_for(cfg, rec)
    run = evolve_window(rec, OcclusionWindow(task.start, task.end), task.ego, grid, topo,
                        cfg.source_params(), cfg.pde_params(), arm,
                        evolver_config(cfg, task.force_dt))
    return rec, run, grid, arm


def simulate_task(task: WindowTask) -> tuple[list[tuple], list[tuple[int, bytes]]]:
    """Diagnostics rows plus serialized field dumps for one window."""
    _, run, _, _ = _evolve(task)
    diags, dumps = [], []
    binary = task.cfg["dump_binary"]
    for r in run.results:
        d = r.diag
        diags.append((task.ego, task.start, d.frame, d.t, d.dt, d.substeps, d.mass, d.max, d.min))
        if task.dump_every and (r.frame - task.start) % task.dump_every == 0:
            f = r.state.R
            dumps.append((r.frame, format_grid_binary(f) if binary else format_grid_text(f).encode()))
    return diags, dumps


def export_task(task: WindowTask, frame: int):
    _, run, _, _ = _evolve(task)
    for r in run.results:
        if r.frame == frame:
            return r.state.R
    return None


def summary_task(task: WindowTask) -> tuple[RunSummary, list]:
    rec, run, grid, arm = _evolve(task)
    cfg = task.cfg
    settings = cfg.settings()
    lcs = detect_lane_changes(rec) if rec.tracks.has_lanes else []
    keep = [int(round(ev.t_dec * rec.frame_rate)) for ev in lcs]
    s = summarize_run(run, rec, grid, field_scale(arm, cfg.pde_params()), settings, keep)
    return s, hazard_events_for(rec, s, settings)


def lane_changes(cfg: RunConfig):
    rec, _ = load_inputs(cfg)
    return detect_lane_changes(rec) if rec.tracks.has_lanes else []


# -- synthetic corpus ----------------------------------------------------------------

def policy_params(cfg: RunConfig) -> ReactivePolicyParams:
    return ReactivePolicyParams(cfg["k_b"], cfg["theta_brake"], cfg["a_min"],
                                RegionSpec(cfg["lookahead_length"], cfg["lookahead_width"]))


@lru_cache(maxsize=2)
def _corpus(n, seed, duration):
    return merge_corpus(n, seed, duration)


def corpus(cfg: RunConfig):
    return _corpus(cfg["n_scenarios"], cfg["seed"], cfg["duration"])


@dataclass
class EpisodeTask:
    cfg: RunConfig
    index: int
    mode: str
    occluded: bool


def scenarios(cfg: RunConfig) -> list:
    """The configured scenario file, else the seeded merge corpus."""
    if cfg.path("scenario"):
        return [read_scenario(cfg.path("scenario"), merge_topology(sigma_m=cfg["sigma_m"]))]
    return corpus(cfg)


def episode_task(task: EpisodeTask) -> tuple[bool, float | None]:
    """Near-collision flag and first braking time of one paired episode."""
    cfg = task.cfg
    sc = scenarios(cfg)[task.index]
    if sc.occluder != task.occluded:
        sc = sc.paired()
    log = run_paired_episode(sc, arm_by_name(task.mode), policy_params(cfg), cfg.pde_params(),
                             cfg.source_params())
    return log.hit, log.first_brake


@dataclass
class ScenarioArmTask:
    cfg: RunConfig
    index: int
    arm: str


def scenario_arm_task(task: ScenarioArmTask):
    cfg = task.cfg
    sc = scenarios(cfg)[task.index]
    ep = scenario_episode(sc, cfg.zone(), cfg["t_pad"])
    arm = arm_by_name(task.arm)
    grid = merge_grid()
    runs = [evolve_window(ep.rec, w, ego, grid, ep.topology, cfg.source_params(), cfg.pde_params(),
                          arm, evolver_config(cfg))
            for ego in sorted(ep.windows) for w in ep.windows[ego]]
    lcs = detect_lane_changes(ep.rec) if ep.rec.tracks.has_lanes else []
    return evaluate_runs(ep.rec, runs, grid, field_scale(arm, cfg.pde_params()), cfg.settings(), lcs)
