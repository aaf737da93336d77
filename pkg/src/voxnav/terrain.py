"""Procedural 8 m x 8 m terrain blocks, difficulty interpolation and curriculum."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    TriangleMesh,
    box_mesh,
    cylinder_mesh,
    merge_meshes,
    quad_mesh,
    read_obj,
    write_mesh_binary,
    write_obj,
)
from .lidar import SceneInstance, cast_scene

BLOCK_SIZE = 8.0
HALF = BLOCK_SIZE / 2

TREE_RADIUS = 0.15
OBSTACLE_HEIGHT = 2.0
WALL_THICKNESS = 0.10
SLAB_THICKNESS = 0.10
SLAB_SIZE = (1.0, 2.0)
RING_WIDTH = 1.0
SPAWN_CLEARANCE = 0.6
PILE_RADIUS = 0.10
PILE_DEPTH = 0.5
PILE_PAD = 0.5
PILE_OVERLAY_THRESHOLD = 0.5
PILE_OVERLAY_OFFSET = 0.02
STAIR_LANDING = 0.5
MAX_STEPS = 10
CURRICULUM_STEP = 0.1


class TerrainError(ValueError):
    pass


class TerrainInfeasibleError(TerrainError):
    """Rejection sampling could not place the requested obstacles."""


class TerrainFamily(str, enum.Enum):
    PLANE = "plane"
    CEILING = "ceiling"
    FOREST = "forest"
    DOOR = "door"
    PLATFORM = "platform"
    PILE = "pile"
    UPSTAIR = "upstair"
    DOWNSTAIR = "downstair"

    @classmethod
    def parse(cls, name) -> "TerrainFamily":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise TerrainError(f"unknown terrain family {name!r}") from None


F = TerrainFamily

# (easiest, hardest) per term
PARAM_TABLE = MappingProxyType({
    F.PLANE: MappingProxyType({}),
    F.CEILING: MappingProxyType({"height": (1.30, 1.00), "count": (10, 40)}),
    F.FOREST: MappingProxyType({"min_spacing": (2.0, 1.0), "tree_count": (3, 32)}),
    F.DOOR: MappingProxyType({"wall_spacing": (2.00, 1.00), "door_width": (1.60, 0.80)}),
    F.PLATFORM: MappingProxyType({"height": (0.05, 0.35), "gap": (0.20, 0.50)}),
    F.PILE: MappingProxyType({"spacing": (0.35, 0.45)}),
    F.UPSTAIR: MappingProxyType({"step_height": (0.00, 0.20), "step_width": (0.50, 0.30)}),
    F.DOWNSTAIR: MappingProxyType({"step_height": (0.00, 0.20), "step_width": (0.50, 0.30)}),
})

INTEGER_TERMS = frozenset({"count", "tree_count"})


def interpolate_params(family, s: float) -> dict:
    """Linear blend ``(1 - s) * easiest + s * hardest`` for every term."""
    if not 0.0 <= s <= 1.0:
        raise TerrainError(f"difficulty {s} outside [0, 1]")
    fam = TerrainFamily.parse(family)
    return {k: (1.0 - s) * lo + s * hi for k, (lo, hi) in PARAM_TABLE[fam].items()}


def resolve_counts(params: dict) -> dict:
    return {k: int(round(v)) if k in INTEGER_TERMS else v for k, v in params.items()}


@dataclass(frozen=True, eq=False)
class TerrainBlock:
    family: TerrainFamily
    difficulty: float
    seed: int
    params: dict
    instances: tuple
    spawn: np.ndarray
    features: dict = field(default_factory=dict)

    def ground_instances(self) -> list:
        return [i for i in self.instances if not i.overhead]

    def overhead_instances(self) -> list:
        return [i for i in self.instances if i.overhead]

    def ground_height(self, xy, default: float = 0.0) -> np.ndarray:
        """Top surface under each (x, y), ignoring overhead structures."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return ground_heights(self.ground_instances(), xy, default)


def ground_heights(instances: Sequence[SceneInstance], xy, default: float = np.nan,
                   start_z: float = 50.0) -> np.ndarray:
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    origins = np.column_stack([xy, np.full(len(xy), start_z)])
    dirs = np.broadcast_to([0.0, 0.0, -1.0], origins.shape)
    t, inst = cast_scene(instances, origins, dirs, t_max=1e6)
    return np.where(inst >= 0, start_z - t, default)


# ---------------------------------------------------------------------------
# family builders; each returns (obstacle meshes, overhead meshes, features)


def _ground(z: float = 0.0) -> TriangleMesh:
    return quad_mesh(-HALF, HALF, -HALF, HALF, z)


def _build_ceiling(p: dict, rng: np.random.Generator):
    slabs, meshes = [], []
    h = p["height"]
    for _ in range(p["count"]):
        w, d = rng.uniform(*SLAB_SIZE, size=2)
        cx = rng.uniform(-HALF + w / 2, HALF - w / 2)
        cy = rng.uniform(-HALF + d / 2, HALF - d / 2)
        x0, x1, y0, y1 = cx - w / 2, cx + w / 2, cy - d / 2, cy + d / 2
        slabs.append([x0, x1, y0, y1, h])
        meshes.append(box_mesh([x0, y0, h], [x1, y1, h + SLAB_THICKNESS]))
    return [_ground()], meshes, {"slabs": slabs}


def _build_forest(p: dict, rng: np.random.Generator, attempts: int = 200, restarts: int = 50):
    n, spacing = p["tree_count"], p["min_spacing"]
    lim = HALF - TREE_RADIUS
    keep_out = SPAWN_CLEARANCE + TREE_RADIUS
    for _ in range(restarts):
        pts: list = []
        for _ in range(n):
            for _ in range(attempts):
                c = rng.uniform(-lim, lim, size=2)
                if np.hypot(*c) < keep_out:
                    continue
                if pts and np.min(np.linalg.norm(np.asarray(pts) - c, axis=1)) < spacing:
                    continue
                pts.append(c)
                break
            else:
                break
        if len(pts) == n:
            break
    else:
        raise TerrainInfeasibleError(f"could not place {n} trees at spacing {spacing} m")
    meshes = [cylinder_mesh(c, TREE_RADIUS, 0.0, OBSTACLE_HEIGHT, 16) for c in pts]
    feats = {"pillars": [[float(c[0]), float(c[1]), TREE_RADIUS] for c in pts]}
    return [_ground()] + meshes, [], feats


def _build_door(p: dict, rng: np.random.Generator):
    spacing, width = p["wall_spacing"], p["door_width"]
    margin = 0.5
    yc = rng.uniform(-HALF + width / 2 + margin, HALF - width / 2 - margin)
    xs = []
    k = 0
    while (k + 0.5) * spacing <= HALF - WALL_THICKNESS:
        xs += [(k + 0.5) * spacing, -(k + 0.5) * spacing]
        k += 1
    xs.sort()
    meshes, walls = [_ground()], []
    t = WALL_THICKNESS / 2
    for x in xs:
        for y0, y1 in ((-HALF, yc - width / 2), (yc + width / 2, HALF)):
            meshes.append(box_mesh([x - t, y0, 0.0], [x + t, y1, OBSTACLE_HEIGHT]))
            walls.append([x, y0, y1])
    return meshes, [], {"walls": walls, "door_center_y": yc, "wall_x": xs}


def _square_ring(a: float, b: float, z0: float, z1: float) -> list:
    """Boxes tiling the square annulus a <= max(|x|, |y|) <= b."""
    return [
        box_mesh([-b, -b, z0], [b, -a, z1]),
        box_mesh([-b, a, z0], [b, b, z1]),
        box_mesh([-b, -a, z0], [-a, a, z1]),
        box_mesh([a, -a, z0], [b, a, z1]),
    ]


def _build_platform(p: dict, rng: np.random.Generator):
    h, gap = p["height"], p["gap"]
    meshes, rings = [_ground()], []
    a = SPAWN_CLEARANCE
    while a < HALF - 1e-9:
        b = min(a + RING_WIDTH, HALF)
        meshes += _square_ring(a, b, 0.0, h)
        rings.append([a, b])
        a = b + gap
    return meshes, [], {"rings": rings, "height": h}


def _build_pile(p: dict, rng: np.random.Generator):
    d = p["spacing"]
    n = int(np.floor((HALF - PILE_RADIUS) / d + 1e-9))
    ax = d * np.arange(-n, n + 1)
    meshes = [_ground(-PILE_DEPTH), box_mesh([-PILE_PAD, -PILE_PAD, -PILE_DEPTH], [PILE_PAD, PILE_PAD, 0.0])]
    centers = []
    for cy in ax:
        for cx in ax:
            if abs(cx) < PILE_PAD + PILE_RADIUS and abs(cy) < PILE_PAD + PILE_RADIUS:
                continue
            centers.append([float(cx), float(cy)])
            meshes.append(cylinder_mesh((cx, cy), PILE_RADIUS, -PILE_DEPTH, 0.0, 12))
    return meshes, [], {"cylinders": centers, "radius": PILE_RADIUS, "top": 0.0}


def _n_steps(run: float) -> int:
    return min(MAX_STEPS, int(np.floor((HALF - STAIR_LANDING) / run + 1e-9)))


def _build_upstair(p: dict, rng: np.random.Generator):
    rise, run = p["step_height"], p["step_width"]
    meshes = [_ground()]
    n = _n_steps(run) if rise > 1e-4 else 0
    for i in range(1, n + 1):
        meshes += _square_ring(STAIR_LANDING + (i - 1) * run, HALF, 0.0, i * rise)
    edges = [STAIR_LANDING + i * run for i in range(n)]
    return meshes, [], {"steps": n, "rise": rise, "run": run, "landing": STAIR_LANDING, "edges": edges}


def _build_downstair(p: dict, rng: np.random.Generator):
    rise, run = p["step_height"], p["step_width"]
    meshes = [_ground()]
    n = _n_steps(run) if rise > 1e-4 else 0
    for k in range(n):
        r = STAIR_LANDING + k * run
        meshes.append(box_mesh([-r, -r, 0.0], [r, r, (n - k) * rise]))
    edges = [STAIR_LANDING + k * run for k in range(n)]
    return meshes, [], {"steps": n, "rise": rise, "run": run, "landing": STAIR_LANDING, "edges": edges}


_BUILDERS = {
    F.PLANE: lambda p, rng: ([_ground()], [], {}),
    F.CEILING: _build_ceiling,
    F.FOREST: _build_forest,
    F.DOOR: _build_door,
    F.PLATFORM: _build_platform,
    F.PILE: _build_pile,
    F.UPSTAIR: _build_upstair,
    F.DOWNSTAIR: _build_downstair,
}

MESH_ID_TERRAIN, MESH_ID_OVERHEAD, MESH_ID_PILE_PLANE = 0, 1, 2


def generate_block(family, s: float, seed: int) -> TerrainBlock:
    """Build one block; deterministic in ``(family, s, seed)``."""
    fam = TerrainFamily.parse(family)
    params = resolve_counts(interpolate_params(fam, s))
    rng = np.random.default_rng([seed, list(TerrainFamily).index(fam)])
    ground, overhead, feats = _BUILDERS[fam](params, rng)
    instances = [SceneInstance.from_mesh(merge_meshes(ground, MESH_ID_TERRAIN), name="terrain")]
    if overhead:
        instances.append(SceneInstance.from_mesh(merge_meshes(overhead, MESH_ID_OVERHEAD),
                                                 name="overhead", overhead=True))
    block = TerrainBlock(fam, float(s), int(seed), params, tuple(instances), np.zeros(3), feats)
    if fam is F.PILE:
        block = pile_overlay(block, s)
    spawn_z = float(block.ground_height([[0.0, 0.0]])[0])
    return replace(block, spawn=np.array([0.0, 0.0, spawn_z]))


def pile_overlay(block: TerrainBlock, s: float, threshold: float = PILE_OVERLAY_THRESHOLD) -> TerrainBlock:
    """Add (low ``s``) or remove (high ``s``) the support plane just under the cylinder tops."""
    if block.family is not F.PILE:
        raise TerrainError("pile overlay only applies to pile blocks")
    kept = tuple(i for i in block.instances if i.name != "pile_plane")
    feats = dict(block.features)
    feats["overlay"] = s < threshold
    if s < threshold:
        z = block.features.get("top", 0.0) - PILE_OVERLAY_OFFSET
        plane = SceneInstance.from_mesh(quad_mesh(-HALF, HALF, -HALF, HALF, z, MESH_ID_PILE_PLANE),
                                        name="pile_plane")
        kept = kept + (plane,)
    return replace(block, instances=kept, features=feats)


# ---------------------------------------------------------------------------
# goals and curriculum


def sample_goal(block: TerrainBlock, seed=None) -> np.ndarray:
    """Uniform point on the block boundary at local ground height."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.uniform(0.0, 4 * BLOCK_SIZE)
    side, along = int(u // BLOCK_SIZE), u % BLOCK_SIZE - HALF
    x, y = [(along, -HALF), (HALF, along), (-along, HALF), (-HALF, -along)][side]
    z = float(block.ground_height([[x, y]], default=0.0)[0])
    return np.array([x, y, z])


@dataclass
class CurriculumState:
    levels: np.ndarray
    step: float = CURRICULUM_STEP

    @classmethod
    def create(cls, n_envs: int, step: float = CURRICULUM_STEP, start: float = 0.0) -> "CurriculumState":
        return cls(np.full(n_envs, float(start)), step)


def curriculum_update(state: CurriculumState, env_index: int, success: bool) -> CurriculumState:
    """Promote on success, demote on failure, clamp to [0, 1]."""
    s = state.levels[env_index] + (state.step if success else -state.step)
    # rounding keeps repeated +-step exact (ten steps of 0.1 land on 1.0)
    state.levels[env_index] = min(1.0, max(0.0, round(s, 10)))
    return state


# ---------------------------------------------------------------------------
# export


def write_manifest(path, items: dict) -> None:
    lines = []
    for k, v in items.items():
        if isinstance(v, float):
            v = repr(v)
        elif not isinstance(v, str):
            v = json.dumps(v, sort_keys=True)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def export_block(block: TerrainBlock, out_dir, binary: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = {
        "family": block.family.value,
        "difficulty": float(block.difficulty),
        "seed": str(block.seed),
        "spawn": [float(v) for v in block.spawn],
    }
    for k, v in block.params.items():
        items[f"param.{k}"] = float(v) if isinstance(v, float) else str(v)
    files = []
    for k, inst in enumerate(block.instances):
        name = f"mesh_{k:02d}_{inst.name}.obj"
        write_obj(inst.mesh, out / name)
        if binary:
            write_mesh_binary(inst.mesh, out / name.replace(".obj", ".vxm"))
        files.append({"file": name, "name": inst.name, "overhead": inst.overhead})
    items["instances"] = files
    items["features"] = block.features
    write_manifest(out / "block.manifest", items)
    return out


def load_block(block_dir) -> TerrainBlock:
    d = Path(block_dir)
    m = read_manifest(d / "block.manifest")
    instances = []
    for spec in json.loads(m["instances"]):
        mesh = read_obj(d / spec["file"])
        instances.append(SceneInstance.from_mesh(mesh, name=spec["name"], overhead=spec["overhead"]))
    params = {k[6:]: (int(v) if k[6:] in INTEGER_TERMS else float(v)) for k, v in m.items() if k.startswith("param.")}
    return TerrainBlock(TerrainFamily.parse(m["family"]), float(m["difficulty"]), int(m["seed"]), params,
                        tuple(instances), np.array(json.loads(m["spawn"])), json.loads(m["features"]))
