"""Robot-centric binary occupancy grids and the privileged height map."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import RigidTransform, rpy_matrix
from .lidar import LidarScan, SceneInstance, cast_scene

GRID_MAGIC = b"VXGRID1"
HEIGHT_SENTINEL = -1.0


@dataclass(frozen=True)
class GridBounds:
    """Axis-aligned box in the torso frame, cut into cubes of side ``resolution``.

    Cells are half-open: ``[lo + i*res, lo + (i+1)*res)``.
    """

    x: tuple = (-0.8, 0.8)
    y: tuple = (-0.8, 0.8)
    z: tuple = (-1.0, 1.0)
    resolution: float = 0.05

    def __post_init__(self):
        for lo, hi in (self.x, self.y, self.z):
            n = (hi - lo) / self.resolution
            if hi <= lo or abs(n - round(n)) > 1e-9:
                raise ValueError("each axis extent must be a positive multiple of the resolution")

    @property
    def shape(self) -> tuple:
        """(C, H, W) = (z cells, y cells, x cells)."""
        return tuple(int(round((hi - lo) / self.resolution)) for lo, hi in (self.z, self.y, self.x))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])

    @classmethod
    def with_resolution(cls, resolution: float, cells=(40, 32, 32)) -> "GridBounds":
        """Keep the cell counts and rescale the extent (the resolution ablation)."""
        c, h, w = cells
        return cls((-w * resolution / 2, w * resolution / 2), (-h * resolution / 2, h * resolution / 2),
                   (-c * resolution / 2, c * resolution / 2), resolution)

    def edges(self, axis: int) -> np.ndarray:
        """Cell boundaries along x (0), y (1) or z (2)."""
        lo, hi = (self.x, self.y, self.z)[axis]
        n = int(round((hi - lo) / self.resolution))
        e = lo + np.arange(n + 1) * self.resolution
        e[-1] = hi
        return e


DEFAULT_BOUNDS = GridBounds()


@dataclass(frozen=True)
class VoxelGrid:
    occupancy: np.ndarray  # uint8, (C, H, W) = (z, y, x)
    bounds: GridBounds = DEFAULT_BOUNDS
    frame: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=np.uint8)
        if occ.shape != self.bounds.shape:
            raise ValueError(f"occupancy shape {occ.shape} != bounds shape {self.bounds.shape}")
        if occ.size and occ.max() > 1:
            raise ValueError("occupancy must be binary")
        object.__setattr__(self, "occupancy", occ)

    @classmethod
    def empty(cls, bounds: GridBounds = DEFAULT_BOUNDS, frame: Optional[RigidTransform] = None) -> "VoxelGrid":
        return cls(np.zeros(bounds.shape, dtype=np.uint8), bounds, frame or RigidTransform.identity())

    @property
    def n_occupied(self) -> int:
        return int(self.occupancy.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, VoxelGrid) and self.bounds == other.bounds
                and np.array_equal(self.occupancy, other.occupancy))


def _cell_index(coord: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # floor((p - lo)/res), then nudged so the result agrees with the explicit edges
    n = len(edges) - 1
    res = edges[1] - edges[0] if n > 0 else 1.0
    idx = np.floor((coord - edges[0]) / res).astype(np.int64)
    idx = np.clip(idx, 0, n - 1)
    idx = np.where(coord < edges[idx], idx - 1, idx)
    idx = np.clip(idx, 0, n - 1)
    idx = np.where(coord >= edges[idx + 1], idx + 1, idx)
    return np.clip(idx, 0, n - 1)


def points_to_cells(points: np.ndarray, bounds: GridBounds = DEFAULT_BOUNDS):
    """Vectorised binning; returns ``(cells (n, 3) as (c, v, u), inside mask)``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.all((p >= bounds.lower) & (p < bounds.upper), axis=1)
    u = _cell_index(p[:, 0], bounds.edges(0))
    v = _cell_index(p[:, 1], bounds.edges(1))
    c = _cell_index(p[:, 2], bounds.edges(2))
    return np.stack([c, v, u], axis=1), inside


def point_to_cell(p, bounds: GridBounds = DEFAULT_BOUNDS) -> Optional[tuple]:
    cells, inside = points_to_cells(np.asarray(p)[None], bounds)
    if not inside[0]:
        return None
    return tuple(int(i) for i in cells[0])


def voxelize_points(points_torso: np.ndarray, bounds: GridBounds = DEFAULT_BOUNDS,
                    frame: Optional[RigidTransform] = None) -> VoxelGrid:
    occ = np.zeros(bounds.shape, dtype=np.uint8)
    cells, inside = points_to_cells(points_torso, bounds)
    c = cells[inside]
    occ[c[:, 0], c[:, 1], c[:, 2]] = 1
    return VoxelGrid(occ, bounds, frame or RigidTransform.identity())


def voxelize(scans: Sequence[LidarScan], torso_pose: RigidTransform,
             bounds: GridBounds = DEFAULT_BOUNDS) -> VoxelGrid:
    """Merge world-frame scans into the torso frame and mark occupied cells."""
    pts = [s.points for s in scans if len(s)]
    if not pts:
        return VoxelGrid.empty(bounds, torso_pose)
    local = torso_pose.apply_inverse(np.concatenate(pts))
    return voxelize_points(local, bounds, torso_pose)


def apply_dropout(grid: VoxelGrid, frac: float, rng: np.random.Generator) -> VoxelGrid:
    """Zero each occupied cell independently with probability ``frac``."""
    if not 0 <= frac <= 1:
        raise ValueError("dropout fraction must lie in [0, 1]")
    if frac == 0:
        return grid
    occ = grid.occupancy.copy()
    idx = np.flatnonzero(occ)
    drop = rng.random(idx.size) < frac
    occ.flat[idx[drop]] = 0
    return replace(grid, occupancy=occ)


def flip_y(grid: VoxelGrid) -> VoxelGrid:
    """Mirror across the torso x-z plane (reverse the y rows)."""
    return replace(grid, occupancy=np.ascontiguousarray(grid.occupancy[:, ::-1, :]))


# ---------------------------------------------------------------------------
# height map


@dataclass(frozen=True)
class HeightMap:
    heights: np.ndarray  # (33, 33) indexed [y row, x col]
    spacing: float = 0.05
    extent: float = 0.8

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        n = int(round(2 * self.extent / self.spacing)) + 1
        if h.shape != (n, n):
            raise ValueError(f"height map must be {n}x{n}, got {h.shape}")
        object.__setattr__(self, "heights", h)

    def flat(self) -> np.ndarray:
        """Row-major, x fastest."""
        return self.heights.reshape(-1)

    def flipped_y(self) -> "HeightMap":
        return replace(self, heights=np.ascontiguousarray(self.heights[::-1, :]))


def height_map_offsets(spacing: float = 0.05, extent: float = 0.8) -> np.ndarray:
    """Base-frame (x, y) sample positions, shape (n*n, 2), x fastest."""
    n = int(round(2 * extent / spacing)) + 1
    ax = -extent + spacing * np.arange(n)
    gy, gx = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def sample_height_map(terrain: Sequence[SceneInstance], base_pose: RigidTransform,
                      spacing: float = 0.05, extent: float = 0.8, ray_height: float = 10.0,
                      sentinel: float = HEIGHT_SENTINEL) -> HeightMap:
    """Vertical drop rays on a grid that follows the base position and heading.

    Entries are terrain height minus base height; rays without a return give
    ``sentinel``.
    """
    fwd = base_pose.rotation[:, 0]
    yaw = np.arctan2(fwd[1], fwd[0])
    R = rpy_matrix(0.0, 0.0, yaw)[:2, :2]
    xy = height_map_offsets(spacing, extent) @ R.T + base_pose.translation[:2]
    base_z = base_pose.translation[2]
    origins = np.column_stack([xy, np.full(len(xy), base_z + ray_height)])
    dirs = np.broadcast_to([0.0, 0.0, -1.0], origins.shape)
    t, inst = cast_scene(terrain, origins, dirs, t_max=1e6)
    rel = np.where(inst >= 0, (origins[:, 2] - t) - base_z, sentinel)
    n = int(round(2 * extent / spacing)) + 1
    return HeightMap(rel.reshape(n, n), spacing, extent)


# ---------------------------------------------------------------------------
# file formats


def write_grid(grid: VoxelGrid, path) -> None:
    """Header, then the occupancy bits packed little-endian, c outermost and u innermost."""
    C, H, W = grid.occupancy.shape
    b = grid.bounds
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", C, H, W))
        fh.write(struct.pack("<6f", b.x[0], b.x[1], b.y[0], b.y[1], b.z[0], b.z[1]))
        fh.write(struct.pack("<f", b.resolution))
        fh.write(np.packbits(grid.occupancy.reshape(-1), bitorder="little").tobytes())


def read_grid(path) -> VoxelGrid:
    data = Path(path).read_bytes()
    if data[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise ValueError(f"{path}: bad grid magic")
    off = len(GRID_MAGIC)
    C, H, W = struct.unpack_from("<III", data, off)
    off += 12
    f = struct.unpack_from("<7f", data, off)
    off += 28
    # bounds are stored as f32; round back to the nearest millimetre fraction
    vals = [round(float(v), 6) for v in f]
    bounds = GridBounds((vals[0], vals[1]), (vals[2], vals[3]), (vals[4], vals[5]), vals[6])
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=off), bitorder="little")
    occ = bits[: C * H * W].reshape(C, H, W)
    return VoxelGrid(occ, bounds)


def write_height_map_csv(hm: HeightMap, path, flat: bool = False) -> None:
    rows = [hm.flat()] if flat else hm.heights
    Path(path).write_text("".join(",".join(f"{v:.6f}" for v in row) + "\n" for row in rows))


def read_height_map_csv(path, spacing: float = 0.05, extent: float = 0.8) -> HeightMap:
    vals = np.array([[float(v) for v in line.split(",")] for line in Path(path).read_text().split()])
    n = int(round(2 * extent / spacing)) + 1
    return HeightMap(vals.reshape(n, n), spacing, extent)
