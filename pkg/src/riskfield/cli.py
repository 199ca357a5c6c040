"""Command-line entry point.

    riskfield extract-windows --config run.cfg
    riskfield simulate --config run.cfg --dump-fields every=20
    riskfield metrics --config run.cfg --jobs 4
    riskfield ablate --config run.cfg
    riskfield synthetic --seed 3
    riskfield export-grid --config run.cfg --ego 7 --frame 240

Exit codes: 0 ok, 2 config or ingestion error, 3 solver error, 4 degenerate metric input.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import runner
from .ablation import AblationTable, ArmResult, merge_reports
from .config import ConfigError, RunConfig, defaults_help, load_config
from .evaluate import build_report
from .grid import format_grid_binary, format_grid_text
from .ingest import IngestError
from .metrics import MetricError, delta_coll
from .pde import SolverError
from .shadow import EgoMissing, OcclusionWindow

log = logging.getLogger("riskfield")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_METRIC = 0, 2, 3, 4


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def _dump_every(raw: str | None) -> int:
    if raw is None:
        return 0
    text = raw.split("=", 1)[1] if raw.startswith("every=") else raw
    try:
        n = int(text)
    except ValueError:
        raise ConfigError(f"--dump-fields expects every=N, got {raw!r}") from None
    if n < 1:
        raise ConfigError("--dump-fields interval must be at least 1")
    return n


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value)
    if args.ego is not None:
        cfg.set("ego", args.ego)
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    if args.out is not None:
        cfg.set("out_dir", str(Path(args.out).resolve()))
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.path("out_dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def _window_tasks(cfg: RunConfig, arm=None, force_dt=None, dump_every=0):
    rec, _ = runner.load_inputs(cfg)
    return [runner.WindowTask(cfg, ego, w.start, w.end, arm, force_dt, dump_every)
            for ego, w in runner.all_windows(rec, cfg)]


def _raise_metric_errors(errors: dict) -> None:
    if errors:
        name = sorted(errors)[0]
        e = errors[name]
        raise MetricError(f"{name}: {e}", name)


# -- commands -------------------------------------------------------------------------

def cmd_extract_windows(cfg: RunConfig, args) -> int:
    rec, _ = runner.load_inputs(cfg)
    rows = [(ego, w.start, w.end) for ego, w in runner.all_windows(rec, cfg)]
    rows.sort()
    _write(_out_dir(cfg) / "windows.csv", _csv_text(("ego_id", "start_frame", "end_frame"), rows))
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    every = _dump_every(args.dump_fields)
    tasks = _window_tasks(cfg, force_dt=args.force_dt, dump_every=every)
    results = runner.pmap(runner.simulate_task, tasks, args.jobs)
    out = _out_dir(cfg)
    header = ("ego_id", "window_start", "frame", "t", "dt", "substeps", "mass", "max", "min")
    rows = [tuple(_fmt(x) for x in row) for diags, _ in results for row in diags]
    _write(out / "diagnostics.csv", _csv_text(header, rows))
    if every:
        fields = out / "fields"
        fields.mkdir(exist_ok=True)
        ext = "bin" if cfg["dump_binary"] else "grid"
        for task, (_, dumps) in zip(tasks, results):
            for frame, payload in dumps:
                (fields / f"ego{task.ego}_w{task.start}_f{frame:06d}.{ext}").write_bytes(payload)
    return EXIT_OK


def _report(cfg: RunConfig, jobs: int, arm=None):
    tasks = _window_tasks(cfg, arm)
    results = runner.pmap(runner.summary_task, tasks, jobs)
    summaries = [s for s, _ in results]
    hazards = {i: evs for i, (_, evs) in enumerate(results)}
    rec, _ = runner.load_inputs(cfg)
    lcs = runner.lane_changes(cfg)
    return build_report(summaries, rec.frame_rate, cfg.settings(), lcs, hazards)


def cmd_metrics(cfg: RunConfig, args) -> int:
    rep, errors = _report(cfg, args.jobs)
    rep.write(_out_dir(cfg) / "metrics.txt")
    _raise_metric_errors(errors)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    arms = cfg.arms()
    if not arms:
        raise ConfigError("no ablation arms configured")
    results = []
    if cfg.path("tracks") or cfg.path("meta"):
        for arm in arms:
            rep, errors = _report(cfg, args.jobs, arm.name)
            results.append(ArmResult(arm, rep, errors))
    else:
        n = len(runner.scenarios(cfg))
        tasks = [runner.ScenarioArmTask(cfg, i, arm.name) for arm in arms for i in range(n)]
        reports = runner.pmap(runner.scenario_arm_task, tasks, args.jobs)
        for a, arm in enumerate(arms):
            rep, errors = merge_reports(reports[a * n:(a + 1) * n], cfg.settings())
            results.append(ArmResult(arm, rep, errors))
    table = AblationTable(results)
    out = _out_dir(cfg)
    _write(out / "ablation.csv", table.to_csv())
    checks = table.ordering_checks()
    for name in sorted(checks):
        print(f"{name}: {'ok' if checks[name] else 'violated'}")
    for r in results:
        _raise_metric_errors(r.errors)
    return EXIT_OK


def cmd_synthetic(cfg: RunConfig, args) -> int:
    modes = cfg.arms("modes")
    if not modes:
        raise ConfigError("no field modes configured")
    scs = runner.scenarios(cfg)
    tasks = [runner.EpisodeTask(cfg, i, m.name, occ)
             for m in modes for i in range(len(scs)) for occ in (True, False)]
    results = runner.pmap(runner.episode_task, tasks, args.jobs)
    by_key = {(t.mode, t.index, t.occluded): r for t, r in zip(tasks, results)}
    episodes, summary = [], []
    for m in modes:
        pairs = []
        for i, sc in enumerate(scs):
            occ, vis = by_key[(m.name, i, True)], by_key[(m.name, i, False)]
            pairs.append((occ[0], vis[0]))
            for flag, (hit, brake) in (("1", occ), ("0", vis)):
                episodes.append((sc.name or str(i), m.name, flag, int(hit), _fmt(brake)))
        summary.append((m.name, f"{delta_coll(pairs):.4f}", len(pairs)))
    out = _out_dir(cfg)
    _write(out / "synthetic.csv", _csv_text(("mode", "delta_coll", "n"), summary))
    _write(out / "episodes.csv",
           _csv_text(("scenario", "mode", "occluded", "near_collision", "first_brake"), episodes))
    for mode, value, n in summary:
        print(f"delta_coll[{mode}] = {value} (n={n})")
    return EXIT_OK


def cmd_export_grid(cfg: RunConfig, args) -> int:
    rec, _ = runner.load_inputs(cfg)
    egos = runner.select_egos(rec, cfg)
    if not egos:
        raise ConfigError("export-grid needs an ego (--ego)")
    ego, k = egos[0], args.frame
    frames = rec.agent_frames(ego)
    if len(frames) == 0 or not frames[0] <= k <= frames[-1]:
        raise ConfigError(f"ego {ego} is not present at frame {k}")
    window = None
    for e, w in runner.all_windows(rec, cfg):
        if e == ego and w.start <= k <= w.end:
            window = w
            break
    if window is None:
        window = OcclusionWindow(int(frames[0]), k)
    task = runner.WindowTask(cfg, ego, window.start, window.end)
    field = runner.export_task(task, k)
    if field is None:
        raise ConfigError(f"no field for frame {k}")
    binary = cfg["dump_binary"]
    payload = format_grid_binary(field) if binary else format_grid_text(field).encode()
    path = _out_dir(cfg) / f"grid_ego{ego}_f{k:06d}.{'bin' if binary else 'grid'}"
    path.write_bytes(payload)
    log.info("wrote %s", path)
    return EXIT_OK


COMMANDS = {
    "extract-windows": (cmd_extract_windows, "write occlusion windows per ego"),
    "simulate": (cmd_simulate, "evolve every window and write diagnostics and field dumps"),
    "metrics": (cmd_metrics, "evaluate the configured field mode and write metrics.txt"),
    "ablate": (cmd_ablate, "run the ablation arms and write ablation.csv"),
    "synthetic": (cmd_synthetic, "paired occluded/visible episodes with a reactive ego"),
    "export-grid": (cmd_export_grid, "write the field at one frame as a grid file"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--ego", help="ego id(s), comma separated")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="synthetic corpus seed")
    common.add_argument("-v", "--verbose", action="store_true")

    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="riskfield", description="Occlusion-aware risk field runner.",
                                     epilog=defaults_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_, description=help_,
                           epilog=defaults_help(), formatter_class=fmt)
        if name == "simulate":
            p.add_argument("--dump-fields", metavar="every=N", help="dump the field every N frames")
            p.add_argument("--force-dt", type=float, help=argparse.SUPPRESS)
        if name == "export-grid":
            p.add_argument("--frame", type=int, required=True, help="frame index to export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return fn(resolve_config(args), args)
    except (ConfigError, IngestError, EgoMissing) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as e:
        where = f" at frame {e.frame}" if e.frame is not None else ""
        print(f"solver error{where}: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except MetricError as e:
        print(f"metric error [{e.metric or 'unknown'}]: {e}", file=sys.stderr)
        return EXIT_METRIC


if __name__ == "__main__":
    sys.exit(main())
