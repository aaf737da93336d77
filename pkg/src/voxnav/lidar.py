"""Simulated spinning LiDAR: scan patterns, scene scanning, noise and latency."""
from __future__ import annotations

import bisect
import configparser
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    DEFAULT_T_MAX,
    Bvh,
    RigidTransform,
    TriangleMesh,
    as_vec3,
    build_bvh,
    intersect_rays_world,
    rpy_matrix,
)


class ConfigError(ValueError):
    pass


class OrderingError(ValueError):
    """A scan was pushed with a timestamp older than the newest queued scan."""


@dataclass(frozen=True)
class LidarPattern:
    offsets: np.ndarray  # (n, 3) unit directions in the sensor frame
    channels: int
    azimuth_steps: int

    @property
    def n_rays(self) -> int:
        return len(self.offsets)


def make_spherical_pattern(channels: int, azimuth_steps: int, vertical_fov_deg: float,
                           elevation_offset_deg: float = 0.0) -> LidarPattern:
    """Evenly spaced elevations over +-fov/2 (shifted by the offset) crossed with evenly spaced azimuths.

    Offsets are ordered channel-major: all azimuths of the lowest channel come
    first.  A single channel sits at the offset elevation.
    """
    if channels < 1 or azimuth_steps < 1:
        raise ConfigError("channels and azimuth_steps must be >= 1")
    if not 0 <= vertical_fov_deg <= 180:
        raise ConfigError("vertical fov must lie in [0, 180] degrees")
    if channels > 1 and vertical_fov_deg == 0:
        raise ConfigError("multiple channels need a non-zero vertical fov")
    if abs(elevation_offset_deg) + vertical_fov_deg / 2 > 90 + 1e-9:
        raise ConfigError("elevations must stay within [-90, 90] degrees")
    half = np.deg2rad(vertical_fov_deg) / 2
    elev = np.zeros(1) if channels == 1 else np.linspace(-half, half, channels)
    elev = np.clip(elev + np.deg2rad(elevation_offset_deg), -np.pi / 2, np.pi / 2)
    azim = 2 * np.pi * np.arange(azimuth_steps) / azimuth_steps
    el, az = np.meshgrid(elev, azim, indexing="ij")
    ce = np.cos(el)
    offsets = np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)
    # exact zeros for axis-aligned directions (cos(pi/2) is not 0 in floating point)
    offsets[np.abs(offsets) < 1e-15] = 0.0
    offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    return LidarPattern(offsets, channels, azimuth_steps)


@dataclass(frozen=True)
class LidarPose:
    """Sensor origin and orientation in the world.

    ``ray_jitter`` optionally holds a fixed per-ray angular perturbation as
    ``(angle, roll)`` pairs: each ray is tilted by ``angle`` radians about an
    axis perpendicular to it, chosen by ``roll`` around the ray.
    """

    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    ray_jitter: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "position", as_vec3(self.position))
        R = RigidTransform(self.rotation).rotation  # validates orthonormality
        object.__setattr__(self, "rotation", R)

    @classmethod
    def from_transform(cls, T: RigidTransform) -> "LidarPose":
        return cls(T.translation, T.rotation)

    def transform(self) -> RigidTransform:
        return RigidTransform(self.rotation, self.position)


@dataclass(frozen=True, eq=False)
class SceneInstance:
    mesh: TriangleMesh
    bvh: Bvh
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    dynamic: bool = False
    name: str = ""
    overhead: bool = False

    @classmethod
    def from_mesh(cls, mesh: TriangleMesh, transform: Optional[RigidTransform] = None,
                  dynamic: bool = False, name: str = "", overhead: bool = False) -> "SceneInstance":
        return cls(mesh, build_bvh(mesh), transform or RigidTransform.identity(), dynamic, name, overhead)

    def posed(self, transform: RigidTransform) -> "SceneInstance":
        """Same mesh and BVH under a new pose; nothing is rebuilt."""
        return replace(self, transform=transform)


@dataclass(frozen=True)
class LidarScan:
    points: np.ndarray  # (n, 3) world-frame hits
    timestamp: float = 0.0
    sensor_id: int = 0
    ray_index: Optional[np.ndarray] = None
    mesh_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")

    def __len__(self) -> int:
        return len(self.points)


def merge_scans(scans: Sequence[LidarScan], sensor_id: int = -1) -> LidarScan:
    if not scans:
        return LidarScan(np.zeros((0, 3)))
    return LidarScan(np.concatenate([s.points for s in scans]), scans[0].timestamp, sensor_id)


@dataclass(frozen=True)
class NoiseConfig:
    pose_pos_sigma: float = 0.01
    ray_dir_sigma: float = np.pi / 180
    hit_sigma: float = 0.01
    voxel_dropout_frac: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if min(self.pose_pos_sigma, self.ray_dir_sigma, self.hit_sigma) < 0:
            raise ConfigError("noise sigmas must be non-negative")
        if not 0 <= self.voxel_dropout_frac <= 1:
            raise ConfigError("dropout fraction must lie in [0, 1]")

    @classmethod
    def disabled(cls, seed: int = 0) -> "NoiseConfig":
        return cls(0.0, 0.0, 0.0, 0.0, seed)


def _perpendicular_basis(d: np.ndarray):
    # two unit vectors orthogonal to each row of d
    helper = np.where(np.abs(d[:, [2]]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(d, e1)
    return e1, e2


def jitter_directions(dirs: np.ndarray, jitter: np.ndarray) -> np.ndarray:
    """Tilt each unit direction by ``jitter[:, 0]`` radians about a perpendicular axis."""
    angle, roll = jitter[:, 0], jitter[:, 1]
    e1, e2 = _perpendicular_basis(dirs)
    perp = np.cos(roll)[:, None] * e1 + np.sin(roll)[:, None] * e2
    out = np.cos(angle)[:, None] * dirs + np.sin(angle)[:, None] * perp
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def perturb_pose(pose: LidarPose, cfg: NoiseConfig, rng: np.random.Generator,
                 n_rays: Optional[int] = None) -> LidarPose:
    """Episode-start sensor perturbation.

    Position gets isotropic Gaussian noise.  When ``n_rays`` is given, each
    ray also receives a fixed Gaussian tilt (std ``ray_dir_sigma``) that is
    held for the whole episode.
    """
    pos = pose.position + rng.normal(0.0, cfg.pose_pos_sigma, size=3) if cfg.pose_pos_sigma > 0 else pose.position
    jitter = pose.ray_jitter
    if n_rays is not None and cfg.ray_dir_sigma > 0:
        jitter = np.column_stack([
            rng.normal(0.0, cfg.ray_dir_sigma, size=n_rays),
            rng.uniform(0.0, 2 * np.pi, size=n_rays),
        ])
    return LidarPose(pos, pose.rotation, jitter)


def perturb_hits(scan: LidarScan, cfg: NoiseConfig, rng: np.random.Generator) -> LidarScan:
    if cfg.hit_sigma == 0 or len(scan) == 0:
        return scan
    noisy = scan.points + rng.normal(0.0, cfg.hit_sigma, size=scan.points.shape)
    return replace(scan, points=noisy)


def ray_directions(pose: LidarPose, pattern: LidarPattern) -> np.ndarray:
    dirs = pattern.offsets
    if pose.ray_jitter is not None:
        if len(pose.ray_jitter) != pattern.n_rays:
            raise ConfigError("ray jitter length does not match the pattern")
        dirs = jitter_directions(dirs, pose.ray_jitter)
    return dirs @ pose.rotation.T


def cast_scene(instances: Sequence[SceneInstance], origins: np.ndarray, dirs: np.ndarray,
               t_max: float = DEFAULT_T_MAX):
    """Nearest hit over all instances; returns ``(t, instance_index)``, -1 for misses.

    Ties keep the earlier instance.
    """
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_inst = np.full(n, -1, dtype=np.int64)
    for k, inst in enumerate(instances):
        t, tri = intersect_rays_world(inst.bvh, inst.transform, origins, dirs, t_max)
        closer = (tri >= 0) & (t < best_t)
        best_t[closer] = t[closer]
        best_inst[closer] = k
    return best_t, best_inst


def scan_scene(instances: Sequence[SceneInstance], pose: LidarPose, pattern: LidarPattern,
               timestamp: float = 0.0, sensor_id: int = 0, t_max: float = DEFAULT_T_MAX) -> LidarScan:
    dirs = ray_directions(pose, pattern)
    origins = np.broadcast_to(pose.position, dirs.shape)
    t, inst = cast_scene(instances, origins, dirs, t_max)
    hit = inst >= 0
    pts = origins[hit] + t[hit, None] * dirs[hit]
    mesh_ids = np.array([instances[k].mesh.mesh_id for k in inst[hit]], dtype=np.int64)
    return LidarScan(pts, timestamp, sensor_id, np.nonzero(hit)[0], mesh_ids)


# ---------------------------------------------------------------------------
# latency


class LatencyBuffer:
    """Sensor publication queue with a per-episode delay.

    One writer (the simulation clock) pushes sweeps in time order; readers get
    the newest scan at least ``delay`` seconds old.  A lock makes each push and
    query atomic with respect to the other.
    """

    def __init__(self, rate_hz: float = 10.0, delay_range=(0.100, 0.200), max_len: int = 64,
                 delay: Optional[float] = None):
        if rate_hz <= 0:
            raise ConfigError("rate must be positive")
        lo, hi = delay_range
        if not 0 <= lo <= hi:
            raise ConfigError("delay range must satisfy 0 <= min <= max")
        self.rate_hz = rate_hz
        self.delay_range = (float(lo), float(hi))
        self.max_len = max_len
        self.delay = float(lo if delay is None else delay)
        self._times: list[float] = []
        self._items: list = []
        self._lock = threading.Lock()

    @property
    def period(self) -> float:
        return 1.0 / self.rate_hz

    def reset(self, rng: Optional[np.random.Generator] = None, delay: Optional[float] = None) -> float:
        """Clear the queue and draw this episode's delay."""
        with self._lock:
            self._times.clear()
            self._items.clear()
            if delay is not None:
                self.delay = float(delay)
            elif rng is not None:
                self.delay = float(rng.uniform(*self.delay_range))
        return self.delay

    def push(self, scan, timestamp: Optional[float] = None) -> None:
        t = float(scan.timestamp if timestamp is None else timestamp)
        with self._lock:
            if self._times and t < self._times[-1]:
                raise OrderingError(f"scan at t={t} pushed after t={self._times[-1]}")
            times = self._times + [t]
            items = self._items + [scan]
            if len(times) > self.max_len:
                times, items = times[-self.max_len:], items[-self.max_len:]
            self._times, self._items = times, items

    def query(self, query_time: float):
        with self._lock:
            times, items = self._times, self._items
        k = bisect.bisect_right(times, query_time - self.delay)
        return items[k - 1] if k > 0 else None

    def __len__(self) -> int:
        return len(self._times)


def latency_push(buffer: LatencyBuffer, scan, timestamp: Optional[float] = None) -> None:
    buffer.push(scan, timestamp)


def latency_query(buffer: LatencyBuffer, query_time: float):
    return buffer.query(query_time)


# ---------------------------------------------------------------------------
# configuration and point-cloud output

SENSOR_KEYS = {
    "channels": int,
    "azimuth_steps": int,
    "fov_deg": float,
    "elevation_offset_deg": float,
    "rate_hz": float,
    "delay_min_s": float,
    "delay_max_s": float,
    "pose_pos_sigma_m": float,
    "ray_dir_sigma_rad": float,
    "hit_sigma_m": float,
    "dropout_frac": float,
    "seed": int,
}


@dataclass(frozen=True)
class SensorConfig:
    channels: int = 32
    azimuth_steps: int = 90
    fov_deg: float = 95.0
    # dome sensor: elevations from -5 deg to the pole, measured from the mounting plane
    elevation_offset_deg: float = 42.5
    rate_hz: float = 10.0
    delay_min_s: float = 0.100
    delay_max_s: float = 0.200
    pose_pos_sigma_m: float = 0.01
    ray_dir_sigma_rad: float = np.pi / 180
    hit_sigma_m: float = 0.01
    dropout_frac: float = 0.02
    seed: int = 0
    # torso-frame mounts (x y z yaw); the dome axis points along the yawed +x, so the
    # back sensor faces backwards
    front_mount: tuple = (0.15, 0.0, 0.25, 0.0)
    back_mount: tuple = (-0.15, 0.0, 0.25, np.pi)

    def pattern(self) -> LidarPattern:
        return make_spherical_pattern(self.channels, self.azimuth_steps, self.fov_deg, self.elevation_offset_deg)

    def noise(self) -> NoiseConfig:
        return NoiseConfig(self.pose_pos_sigma_m, self.ray_dir_sigma_rad, self.hit_sigma_m,
                           self.dropout_frac, self.seed)

    def mounts(self) -> list[RigidTransform]:
        # pitch the sensor z axis (the dome pole) onto the outward direction
        outward = rpy_matrix(0.0, np.pi / 2, 0.0)
        return [RigidTransform(rpy_matrix(0.0, 0.0, m[3]) @ outward, m[:3])
                for m in (self.front_mount, self.back_mount)]


def _parse_mount(text: str) -> tuple:
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) != 4:
        raise ConfigError("mount must be 'x y z yaw'")
    return tuple(vals)


def parse_sensor_config(text: str) -> SensorConfig:
    """Parse ``key = value`` lines (``#`` comments allowed) into a SensorConfig."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string("[sensor]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    kwargs = {}
    for key, raw in cp["sensor"].items():
        if key in SENSOR_KEYS:
            try:
                kwargs[key] = SENSOR_KEYS[key](raw)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif key in ("front_mount", "back_mount"):
            kwargs[key] = _parse_mount(raw)
        else:
            raise ConfigError(f"unknown sensor config key {key!r}")
    cfg = SensorConfig(**kwargs)
    cfg.noise()  # validates ranges
    if not 0 <= cfg.delay_min_s <= cfg.delay_max_s:
        raise ConfigError("delay_min_s must be <= delay_max_s")
    return cfg


def load_sensor_config(path) -> SensorConfig:
    return parse_sensor_config(Path(path).read_text())


def format_sensor_config(cfg: SensorConfig) -> str:
    lines = [f"{k} = {getattr(cfg, k)!r}" for k in SENSOR_KEYS]
    lines += [f"{k} = {' '.join(repr(float(v)) for v in getattr(cfg, k))}" for k in ("front_mount", "back_mount")]
    return "\n".join(lines) + "\n"


def write_ply(points, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(pts)}",
        "property float x", "property float y", "property float z", "end_header",
    ]
    body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in pts.tolist()]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    n = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    return np.array([[float(v) for v in l.split()[:3]] for l in lines[end + 1 : end + 1 + n]]).reshape(-1, 3)


def write_points_csv(points, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    Path(path).write_text("".join(f"{x:.6f},{y:.6f},{z:.6f}\n" for x, y, z in pts.tolist()))
