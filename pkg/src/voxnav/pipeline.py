"""Experiment drivers behind the command line: scan pipeline, conv benchmark, curriculum simulation."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import RigidTransform, TriangleMesh, box_mesh, merge_meshes
from .lidar import (LatencyBuffer, LidarPose, SceneInstance, SensorConfig, merge_scans, perturb_hits,
                    perturb_pose, scan_scene, write_ply)
from .perception import NetworkSpec, PolicyNet, count_flops, count_params, encode_voxel
from .task import EpisodeState
from .terrain import (CurriculumState, TerrainBlock, TerrainFamily, curriculum_update, write_manifest)
from .voxel import DEFAULT_BOUNDS, GridBounds, VoxelGrid, apply_dropout, sample_height_map, voxelize, \
    write_grid, write_height_map_csv

SWEEP_TICKS = 5  # 50 Hz control ticks per 10 Hz sweep
MESH_ID_ROBOT = 100


# ---------------------------------------------------------------------------
# scan pipeline


# leg proxy geometry in metres; hips sit below and beside the torso origin
HIP_LATERAL, HIP_DROP = 0.1, 0.1
THIGH, SHIN, ANKLE_HEIGHT = 0.3, 0.3, 0.05
LIMB_HALF_WIDTH = 0.05


def _segment_box(a: np.ndarray, b: np.ndarray, half_width: float) -> TriangleMesh:
    axis = b - a
    length = float(np.linalg.norm(axis))
    z = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    R = np.column_stack([x, np.cross(z, x), z])
    box = box_mesh([-half_width, -half_width, 0.0], [half_width, half_width, length])
    return box.transformed(RigidTransform(R, a))


def leg_joints(torso: RigidTransform, foot, side: float) -> tuple:
    """Hip, knee and ankle of one leg; ``side`` is +1 for the left leg.

    The knee solves the two-link chain from hip to ankle and bends toward the
    torso's forward axis, so lowering the torso pushes the knees out in front.
    """
    hip = torso.apply([0.0, side * HIP_LATERAL, -HIP_DROP])
    ankle = np.asarray(foot, dtype=np.float64) + [0.0, 0.0, ANKLE_HEIGHT]
    v = ankle - hip
    dist = float(np.linalg.norm(v))
    u = v / dist
    fwd = torso.rotation[:, 0] - (torso.rotation[:, 0] @ u) * u
    n = np.linalg.norm(fwd)
    fwd = fwd / n if n > 1e-9 else np.zeros(3)
    along = (THIGH ** 2 - SHIN ** 2 + dist ** 2) / (2 * dist)
    knee = hip + min(along, THIGH) * u + np.sqrt(max(THIGH ** 2 - along ** 2, 0.0)) * fwd
    return hip, knee, ankle


def leg_proxy_mesh(torso: RigidTransform, feet) -> TriangleMesh:
    """World-frame thigh and shin boxes for both legs, posed from the torso and foot positions."""
    parts = []
    for foot, side in zip(np.asarray(feet, dtype=np.float64), (1.0, -1.0)):
        hip, knee, ankle = leg_joints(torso, foot, side)
        parts += [_segment_box(hip, knee, LIMB_HALF_WIDTH), _segment_box(knee, ankle, LIMB_HALF_WIDTH)]
    return merge_meshes(parts, MESH_ID_ROBOT)


@dataclass(frozen=True)
class SweepRecord:
    index: int
    timestamp: float
    torso: RigidTransform
    points: np.ndarray
    grid: VoxelGrid


@dataclass
class PipelineResult:
    delay: float
    sweeps: list
    ticks: list  # (tick index, time, sweep index or -1, grid)


def run_scan_pipeline(block: TerrainBlock, trace: Sequence[EpisodeState], sensor: SensorConfig,
                      seed: int = 0, randomize: bool = True, self_scan: bool = False,
                      bounds: GridBounds = DEFAULT_BOUNDS) -> PipelineResult:
    """Sweep both sensors every 100 ms and serve the delayed grid at every 20 ms tick.

    Each sweep is voxelized in the torso pose at sweep time; a tick receives
    the newest grid old enough under the episode's latency.  Before any sweep
    qualifies the tick grid is empty.
    """
    rng = np.random.default_rng(seed)
    buffer = LatencyBuffer(sensor.rate_hz, (sensor.delay_min_s, sensor.delay_max_s))
    delay = buffer.reset(rng)
    noise = sensor.noise()
    pattern = sensor.pattern()
    mounts = []
    for m in sensor.mounts():
        pose = LidarPose.from_transform(m)
        if randomize:
            pose = perturb_pose(pose, noise, rng, pattern.n_rays)
        mounts.append(pose)

    static = list(block.instances)
    sweeps: list[SweepRecord] = []
    ticks = []
    t0 = trace[0].t
    for k, state in enumerate(trace):
        now = state.t - t0
        torso = state.base
        if k % SWEEP_TICKS == 0:
            scene = static
            if self_scan:
                legs = SceneInstance.from_mesh(leg_proxy_mesh(torso, state.feet), dynamic=True, name="legs")
                scene = static + [legs]
            scans = []
            for sid, m in enumerate(mounts):
                world = LidarPose(torso.apply(m.position), torso.rotation @ m.rotation, m.ray_jitter)
                scan = scan_scene(scene, world, pattern, now, sid)
                if randomize:
                    scan = perturb_hits(scan, noise, rng)
                scans.append(scan)
            grid = voxelize(scans, torso, bounds)
            if randomize:
                grid = apply_dropout(grid, noise.voxel_dropout_frac, rng)
            rec = SweepRecord(len(sweeps), now, torso, merge_scans(scans).points, grid)
            sweeps.append(rec)
            buffer.push(rec, now)
        got = buffer.query(now)
        ticks.append((k, now, -1 if got is None else got.index,
                      VoxelGrid.empty(bounds, torso) if got is None else got.grid))
    return PipelineResult(delay, sweeps, ticks)


def write_pipeline_outputs(result: PipelineResult, block: TerrainBlock, trace: Sequence[EpisodeState],
                           out_dir, seed: int, randomize: bool, self_scan: bool,
                           height_maps: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in result.sweeps:
        write_ply(rec.points, out / f"scan_{rec.index:06d}.ply")
    ground = block.instances
    rows = []
    for (k, now, sweep, grid), state in zip(result.ticks, trace):
        write_grid(grid, out / f"grid_{k:06d}.vxg")
        if height_maps:
            write_height_map_csv(sample_height_map(ground, state.base), out / f"height_{k:06d}.csv")
        rows.append([k, f"{now:.2f}", sweep, grid.n_occupied])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tick", "t", "sweep", "occupied"])
    w.writerows(rows)
    (out / "ticks.csv").write_text(buf.getvalue())
    write_manifest(out / "run.manifest", {
        "family": block.family.value,
        "difficulty": float(block.difficulty),
        "seed": str(seed),
        "randomize": str(randomize).lower(),
        "self_scan": str(self_scan).lower(),
        "delay_s": float(result.delay),
        "ticks": str(len(result.ticks)),
        "sweeps": str(len(result.sweeps)),
    })
    return out


# ---------------------------------------------------------------------------
# conv benchmark

BENCH_COLUMNS = ("variant", "params", "macs", "median_ns", "p95_ns")


def bench_conv(spec: Optional[NetworkSpec] = None, reps: int = 1000, seed: int = 0,
               density: float = 0.05) -> list[dict]:
    """Encoder MACs and forward latency for the z-grouped 2D and the 3D reference variants.

    With ``reps == 0`` only the counts are produced.
    """
    spec = spec or NetworkSpec()
    rng = np.random.default_rng(seed)
    grid = (rng.random(spec.voxel_shape) < density).astype(np.uint8)
    rows = []
    for variant in ("2d", "3d"):
        sp = NetworkSpec(**{**spec.__dict__, "variant": variant})
        net = PolicyNet.init(sp, seed)
        row = {"variant": variant, "params": count_params(net), "macs": count_flops(sp),
               "median_ns": None, "p95_ns": None}
        if reps > 0:
            encode_voxel(grid, net)  # warm-up
            samples = np.empty(reps, dtype=np.int64)
            for i in range(reps):
                t = time.perf_counter_ns()
                encode_voxel(grid, net)
                samples[i] = time.perf_counter_ns() - t
            row["median_ns"] = int(np.median(samples))
            row["p95_ns"] = int(np.percentile(samples, 95))
        rows.append(row)
    return rows


def write_bench_csv(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow(["" if r[c] is None else r[c] for c in BENCH_COLUMNS])
    Path(path).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# curriculum simulation


class SuccessModel:
    """Success probability per (family, difficulty).

    Either a constant or a table of ``family, difficulty, prob`` rows,
    linearly interpolated in difficulty.  Family ``*`` matches every family.
    """

    def __init__(self, constant: Optional[float] = None, table: Optional[dict] = None):
        if (constant is None) == (table is None):
            raise ValueError("give exactly one of a constant or a table")
        if constant is not None and not 0 <= constant <= 1:
            raise ValueError("success probability must lie in [0, 1]")
        self.constant = constant
        self.table = table or {}

    @classmethod
    def from_csv(cls, path) -> "SuccessModel":
        table: dict = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                fam = row["family"].strip()
                s, p = float(row["difficulty"]), float(row["prob"])
                if not 0 <= p <= 1 or not 0 <= s <= 1:
                    raise ValueError(f"{path}: difficulty and prob must lie in [0, 1]")
                table.setdefault(fam, []).append((s, p))
        if not table:
            raise ValueError(f"{path}: empty success table")
        return cls(table={k: sorted(v) for k, v in table.items()})

    def prob(self, family: str, s: float) -> float:
        if self.constant is not None:
            return self.constant
        pts = self.table.get(family, self.table.get("*"))
        if pts is None:
            raise KeyError(f"no success entry for family {family!r}")
        xs, ys = zip(*pts)
        return float(np.interp(s, xs, ys))


def simulate_curriculum(families: Sequence[str], episodes: int, model: SuccessModel, seed: int = 0,
                        step: float = 0.1) -> list[dict]:
    """One environment per family; each episode draws success and moves the level by one step."""
    fams = [TerrainFamily.parse(f).value for f in families]
    rng = np.random.default_rng(seed)
    state = CurriculumState.create(len(fams), step)
    rows = []
    for ep in range(episodes):
        for i, fam in enumerate(fams):
            s = float(state.levels[i])
            ok = bool(rng.random() < model.prob(fam, s))
            curriculum_update(state, i, ok)
            rows.append({"episode": ep, "family": fam, "difficulty": s, "success": int(ok),
                         "next_difficulty": float(state.levels[i])})
    return rows


def write_curriculum_csv(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "family", "difficulty", "success", "next_difficulty"])
    for r in rows:
        w.writerow([r["episode"], r["family"], repr(round(r["difficulty"], 10)), r["success"],
                    repr(round(r["next_difficulty"], 10))])
    Path(path).write_text(buf.getvalue())
