"""voxnav command line.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
Set ``VOXNAV_THREADS`` to spread ray batches over worker threads.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline, plotting, task, terrain
from .lidar import ConfigError, SensorConfig, load_sensor_config
from .perception import NetworkSpec

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _require_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {p}")
    return p


def _load_block(path) -> terrain.TerrainBlock:
    d = _require_file(path)
    if not (d / "block.manifest").exists():
        raise UsageError(f"{d} has no block.manifest")
    return terrain.load_block(d)


def cmd_gen_terrain(args) -> int:
    block = terrain.generate_block(args.family, args.difficulty, args.seed)
    out = terrain.export_block(block, args.out, binary=args.binary)
    print(f"{block.family.value} s={block.difficulty} seed={block.seed} -> {out}")
    return EXIT_OK


def cmd_make_script(args) -> int:
    block = _load_block(args.block) if args.block else None
    ground = None
    if block is not None:
        ground = lambda xy: float(block.ground_height([xy])[0])  # noqa: E731
    start = [*args.start, 0.0]
    goal = [*args.goal, 0.0]
    if block is not None:
        goal[2] = ground(goal[:2])
    trace = task.straight_line_trace(start, goal, duration=args.duration, speed=args.speed,
                                     base_height=args.base_height, head_height=args.head_height,
                                     ground_fn=ground, torso_pitch=np.radians(args.pitch_deg))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    task.write_trace(trace, args.out)
    print(f"{len(trace)} ticks -> {args.out}")
    return EXIT_OK


def cmd_scan_pipeline(args) -> int:
    block = _load_block(args.block)
    trace = task.read_trace(_require_file(args.script))
    sensor = load_sensor_config(_require_file(args.sensor)) if args.sensor else SensorConfig()
    seed = sensor.seed if args.seed is None else args.seed
    result = pipeline.run_scan_pipeline(block, trace, sensor, seed=seed, randomize=not args.no_dr,
                                        self_scan=args.self_scan)
    out = pipeline.write_pipeline_outputs(result, block, trace, args.out, seed, not args.no_dr,
                                          args.self_scan, height_maps=not args.no_height_maps)
    if not args.no_plots:
        plotting.plot_occupancy([(t, g.n_occupied) for _, t, _, g in result.ticks], out / "occupancy.png")
        plotting.plot_voxel_slices(result.ticks[-1][3].occupancy, out / "voxels_last.png")
    print(f"{len(result.sweeps)} sweeps, {len(result.ticks)} ticks, delay {result.delay * 1000:.1f} ms -> {out}")
    return EXIT_OK


def cmd_replay_rewards(args) -> int:
    block = _load_block(args.block)
    trace = task.read_trace(_require_file(args.script))
    rows = task.replay_rewards(trace, block)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task.write_reward_csv(rows, out / "rewards.csv")
    if not args.no_plots:
        plotting.plot_rewards(rows, out / "rewards.png")
    term = rows[-1]["termination"] or "none"
    success = task.episode_success(trace, block)
    print(f"{len(rows)} ticks, termination={term}, success={success} -> {out}")
    return EXIT_OK


def cmd_bench_conv(args) -> int:
    if args.reps < 0:
        raise UsageError("--reps must be >= 0")
    rows = pipeline.bench_conv(NetworkSpec(), reps=args.reps, seed=args.seed, density=args.density)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_bench_csv(rows, out / "bench.csv")
    if not args.no_plots:
        plotting.plot_bench(rows, out / "bench.png")
    for r in rows:
        timing = "" if r["median_ns"] is None else f" median {r['median_ns'] / 1e6:.3f} ms"
        print(f"{r['variant']}: {r['macs']} MACs, {r['params']} params{timing}")
    return EXIT_OK


def cmd_curriculum_sim(args) -> int:
    if args.episodes < 0:
        raise UsageError("--episodes must be >= 0")
    if args.success_table:
        model = pipeline.SuccessModel.from_csv(_require_file(args.success_table))
    else:
        model = pipeline.SuccessModel(constant=args.success)
    fams = [f.value for f in terrain.TerrainFamily] if args.families == "all" else args.families.split(",")
    rows = pipeline.simulate_curriculum(fams, args.episodes, model, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.write_curriculum_csv(rows, out / "curriculum.csv")
    if not args.no_plots and rows:
        plotting.plot_curriculum(rows, out / "curriculum.png")
    finals = {r["family"]: r["next_difficulty"] for r in rows}
    for fam, s in finals.items():
        print(f"{fam}: final s={s:.1f}")
    return EXIT_OK


def _xy(text: str):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("expected 'x,y'")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voxnav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-terrain", help="generate and export one terrain block")
    g.add_argument("--family", required=True, help="|".join(f.value for f in terrain.TerrainFamily))
    g.add_argument("--difficulty", type=float, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--binary", action="store_true", help="also write binary meshes")
    g.set_defaults(func=cmd_gen_terrain)

    m = sub.add_parser("make-script", help="write a straight-line episode script")
    m.add_argument("--start", type=_xy, default=[0.0, 0.0])
    m.add_argument("--goal", type=_xy, required=True)
    m.add_argument("--speed", type=float, default=0.6)
    m.add_argument("--duration", type=float, default=10.0)
    m.add_argument("--head-height", type=float, default=1.2)
    m.add_argument("--base-height", type=float, default=0.75, help="torso height above ground")
    m.add_argument("--pitch-deg", type=float, default=0.0, help="forward torso pitch (crouch)")
    m.add_argument("--block", help="follow this block's ground height")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_script)

    s = sub.add_parser("scan-pipeline", help="scan, randomize, delay and voxelize along a script")
    s.add_argument("--block", required=True)
    s.add_argument("--script", required=True)
    s.add_argument("--sensor", help="sensor config file (key = value)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--no-dr", action="store_true", help="disable pose/ray/hit noise and dropout")
    s.add_argument("--self-scan", action="store_true", help="attach leg proxy meshes to the torso")
    s.add_argument("--no-height-maps", action="store_true")
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_scan_pipeline)

    r = sub.add_parser("replay-rewards", help="reward terms and termination along a script")
    r.add_argument("--block", required=True)
    r.add_argument("--script", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=cmd_replay_rewards)

    b = sub.add_parser("bench-conv", help="MACs and latency of the 2D and 3D voxel encoders")
    b.add_argument("--reps", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--density", type=float, default=0.05, help="occupied fraction of the input grid")
    b.add_argument("--out", required=True)
    b.add_argument("--no-plots", action="store_true")
    b.set_defaults(func=cmd_bench_conv)

    c = sub.add_parser("curriculum-sim", help="promote/demote difficulty under a success model")
    c.add_argument("--families", default="all", help="comma-separated list or 'all'")
    c.add_argument("--episodes", type=int, default=100)
    grp = c.add_mutually_exclusive_group()
    grp.add_argument("--success", type=float, default=0.5, help="constant success probability")
    grp.add_argument("--success-table", help="CSV with family,difficulty,prob")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--no-plots", action="store_true")
    c.set_defaults(func=cmd_curriculum_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, task.TraceFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except terrain.TerrainInfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
