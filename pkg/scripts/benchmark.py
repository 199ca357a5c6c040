"""Time one full-model window on the default grid and the CLI metrics command at two job counts.

    python3 scripts/benchmark.py --pairs 8 --jobs 4
"""
import argparse
import tempfile
import time
from pathlib import Path

from riskfield.cli import main as cli
from riskfield.grid import GridSpec
from riskfield.ingest import AgentState, Frame, Recording, write_recording
from riskfield.pde import FULL, evolve_window
from riskfield.shadow import OcclusionWindow


def traffic(n_pairs, n_frames=201):
    """Ego behind a slower truck with a car in the next lane, repeated in parallel lanes."""
    frames = []
    for k in range(n_frames):
        t = k / 20.0
        agents = []
        for p in range(n_pairs):
            y = 8.0 + 7.0 * p
            agents += [AgentState(10 * p, (5 + 12 * t, y), (12.0, 0.0)),
                       AgentState(10 * p + 1, (25 + 11 * t, y), (11.0, 0.0), cls="truck", length=16.0, width=2.5),
                       AgentState(10 * p + 2, (50 + 8 * t, y + 3.5), (8.0, 0.0))]
        frames.append(Frame(k, t, tuple(agents)))
    return Recording.from_frames(frames)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=8, help="ego/truck pairs for the jobs comparison")
    ap.add_argument("--jobs", type=int, default=4)
    args = ap.parse_args(argv)

    t0 = time.perf_counter()
    evolve_window(traffic(1), OcclusionWindow(0, 200), 0, GridSpec(), ablation=FULL)
    print(f"single window, 150x70 grid, 201 frames: {time.perf_counter() - t0:.2f} s")

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        write_recording(traffic(args.pairs), d / "tracks.csv", d / "meta.csv")
        egos = ",".join(str(10 * p) for p in range(args.pairs))
        (d / "run.cfg").write_text(f"tracks = tracks.csv\nmeta = meta.csv\nego = {egos}\n")
        times = {}
        for jobs in (1, args.jobs):
            t1 = time.perf_counter()
            cli(["metrics", "--config", str(d / "run.cfg"), "--jobs", str(jobs), "--out", str(d / f"o{jobs}")])
            times[jobs] = time.perf_counter() - t1
            print(f"metrics --jobs {jobs}: {times[jobs]:.1f} s")
        same = (d / "o1/metrics.txt").read_bytes() == (d / f"o{args.jobs}/metrics.txt").read_bytes()
        print(f"speedup {times[1] / times[args.jobs]:.2f}x, identical reports {same}")


if __name__ == "__main__":
    main()
