"""Goal-reaching task: episode state, observations, rewards and termination.

Everything here evaluates *supplied* state.  There is no physics: a trace of
:class:`EpisodeState` frames (a scripted kinematic puppet, or a logged
rollout) goes in, and rewards, terminations and observation vectors come out.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import RigidTransform, rpy_matrix
from .lidar import SceneInstance, cast_scene
from .perception import RunningNormalizer
from .voxel import HeightMap, VoxelGrid, flip_y

N_JOINTS = 29
ACTION_HISTORY = 4
PROPRIO_HISTORY = 6
CONTROL_DT = 0.02

# Unitree G1 29-DoF joint order
G1_JOINT_NAMES = (
    "left_hip_pitch", "left_hip_roll", "left_hip_yaw", "left_knee", "left_ankle_pitch", "left_ankle_roll",
    "right_hip_pitch", "right_hip_roll", "right_hip_yaw", "right_knee", "right_ankle_pitch", "right_ankle_roll",
    "waist_yaw", "waist_roll", "waist_pitch",
    "left_shoulder_pitch", "left_shoulder_roll", "left_shoulder_yaw", "left_elbow",
    "left_wrist_roll", "left_wrist_pitch", "left_wrist_yaw",
    "right_shoulder_pitch", "right_shoulder_roll", "right_shoulder_yaw", "right_elbow",
    "right_wrist_roll", "right_wrist_pitch", "right_wrist_yaw",
)


def _joint_mirror():
    perm = np.arange(N_JOINTS)
    sign = np.ones(N_JOINTS)
    for i, name in enumerate(G1_JOINT_NAMES):
        if name.startswith("left_"):
            perm[i] = G1_JOINT_NAMES.index("right_" + name[5:])
        elif name.startswith("right_"):
            perm[i] = G1_JOINT_NAMES.index("left_" + name[6:])
        if name.endswith(("_roll", "_yaw")):
            sign[i] = -1.0
    return perm, sign


JOINT_MIRROR_PERM, JOINT_MIRROR_SIGN = _joint_mirror()


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RewardConfig:
    horizon: float = 10.0
    reach_window: float = 2.0
    kappa: float = 0.8
    influence_radius: float = 1.0
    standoff: float = 0.2
    floor: float = 0.02
    falloff: float = 0.8
    head_lookahead: float = 0.45
    patch: float = 0.5
    head_offset: float = 0.1
    foot_lookahead: float = 0.5
    foot_offset: float = 0.0
    sharpness: float = 4.0
    patch_samples: int = 5
    nominal_head_height: float = 1.2
    tangent_sign: float = 1.0


@dataclass(frozen=True)
class TerminationConfig:
    force_limit: float = 100.0
    pillar_sink: float = 0.10
    min_progress: float = 1.0
    progress_window: float = 4.0
    max_tilt_deg: float = 60.0
    min_feet_distance: float = 0.10
    horizon: float = 10.0
    pillar_families: tuple = ("pile",)


# ---------------------------------------------------------------------------
# episode state


@dataclass
class EpisodeState:
    """One control tick of robot state.

    Velocities are expressed in the base frame; feet and head are world
    positions (feet as rows ``[left, right]``).  ``contact_forces`` holds the
    largest external force magnitude on (torso, hip, knee) bodies.
    """

    t: float
    goal: np.ndarray
    base: RigidTransform = field(default_factory=RigidTransform.identity)
    lin_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ang_vel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_pos: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    joint_vel: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    action: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))
    feet: np.ndarray = field(default_factory=lambda: np.array([[0.0, 0.1, 0.0], [0.0, -0.1, 0.0]]))
    head_z: float = 1.2
    contact_forces: np.ndarray = field(default_factory=lambda: np.zeros(3))
    horizon: float = 10.0

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=np.float64).reshape(3)
        self.lin_vel = np.asarray(self.lin_vel, dtype=np.float64).reshape(3)
        self.ang_vel = np.asarray(self.ang_vel, dtype=np.float64).reshape(3)
        self.joint_pos = np.asarray(self.joint_pos, dtype=np.float64).reshape(N_JOINTS)
        self.joint_vel = np.asarray(self.joint_vel, dtype=np.float64).reshape(N_JOINTS)
        self.action = np.asarray(self.action, dtype=np.float64).reshape(N_JOINTS)
        self.feet = np.asarray(self.feet, dtype=np.float64).reshape(2, 3)
        self.contact_forces = np.asarray(self.contact_forces, dtype=np.float64).reshape(3)

    @property
    def position(self) -> np.ndarray:
        return self.base.translation

    @property
    def t_elapse(self) -> float:
        return self.t

    @property
    def t_left(self) -> float:
        return self.horizon - self.t

    @property
    def projected_gravity(self) -> np.ndarray:
        return self.base.apply_inverse_direction([0.0, 0.0, -1.0])

    @property
    def heading(self) -> float:
        fwd = self.base.rotation[:, 0]
        return float(np.arctan2(fwd[1], fwd[0]))

    def world_velocity(self) -> np.ndarray:
        return self.base.apply_direction(self.lin_vel)

    def goal_command(self) -> np.ndarray:
        """(dx, dy, distance, bearing) of the goal in the heading frame."""
        d = self.goal[:2] - self.position[:2]
        c, s = np.cos(self.heading), np.sin(self.heading)
        dx, dy = c * d[0] + s * d[1], -s * d[0] + c * d[1]
        return np.array([dx, dy, np.hypot(dx, dy), np.arctan2(dy, dx)])

    def goal_direction(self) -> np.ndarray:
        """Unit horizontal world direction from base to goal (zero at the goal)."""
        d = np.array([*(self.goal[:2] - self.position[:2]), 0.0])
        n = np.linalg.norm(d)
        return d / n if n > 1e-12 else np.zeros(3)


class ObservationHistory:
    """Fixed-length histories for one environment, zero-padded at reset."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.actions = np.zeros((ACTION_HISTORY, N_JOINTS))
        self.ang_vel = np.zeros((PROPRIO_HISTORY, 3))
        self.gravity = np.zeros((PROPRIO_HISTORY, 3))
        self.q = np.zeros((PROPRIO_HISTORY, N_JOINTS))
        self.dq = np.zeros((PROPRIO_HISTORY, N_JOINTS))

    def observe(self, state: EpisodeState) -> None:
        """Append proprioception at t (oldest frame drops out)."""
        for buf, val in ((self.ang_vel, state.ang_vel), (self.gravity, state.projected_gravity),
                         (self.q, state.joint_pos), (self.dq, state.joint_vel)):
            buf[:-1] = buf[1:]
            buf[-1] = val

    def record_action(self, action) -> None:
        self.actions[:-1] = self.actions[1:]
        self.actions[-1] = action


# ---------------------------------------------------------------------------
# observation assembly


@dataclass(frozen=True)
class ObservationLayout:
    """Which perception terms go to the actor and critic.

    Defaults: voxels for both, height map and base velocity critic-only.
    ``voxel_only`` drops the critic height map; ``height_only`` feeds the
    height map to both networks and no voxels.
    """

    voxels: bool = True
    actor_height_map: bool = False
    critic_height_map: bool = True

    @classmethod
    def variant(cls, name: str) -> "ObservationLayout":
        return {
            "voxel+height": cls(),
            "voxel_only": cls(critic_height_map=False),
            "height_only": cls(voxels=False, actor_height_map=True, critic_height_map=True),
        }[name]

    def actor_terms(self) -> list[tuple[str, int]]:
        terms = [
            ("goal", 4), ("t_elapse", 1), ("t_left", 1),
            ("actions", ACTION_HISTORY * N_JOINTS),
            ("ang_vel", PROPRIO_HISTORY * 3), ("gravity", PROPRIO_HISTORY * 3),
            ("q", PROPRIO_HISTORY * N_JOINTS), ("dq", PROPRIO_HISTORY * N_JOINTS),
        ]
        if self.actor_height_map:
            terms.append(("height_map", 1089))
        return terms

    def critic_terms(self) -> list[tuple[str, int]]:
        terms = self.actor_terms() + [("lin_vel", 3)]
        if self.critic_height_map and not self.actor_height_map:
            terms.append(("height_map", 1089))
        return terms

    @property
    def actor_dim(self) -> int:
        return sum(n for _, n in self.actor_terms())

    @property
    def critic_dim(self) -> int:
        return sum(n for _, n in self.critic_terms())


DEFAULT_LAYOUT = ObservationLayout()
ACTOR_DIM = DEFAULT_LAYOUT.actor_dim  # 506
CRITIC_DIM = DEFAULT_LAYOUT.critic_dim  # 1598


@dataclass(frozen=True)
class ObservationVector:
    actor_scalars: np.ndarray
    critic_scalars: Optional[np.ndarray]
    grid: Optional[VoxelGrid]
    layout: ObservationLayout = DEFAULT_LAYOUT

    @property
    def privileged(self) -> bool:
        return self.critic_scalars is not None

    def term(self, name: str, critic: bool = False) -> np.ndarray:
        vec = self.critic_scalars if critic else self.actor_scalars
        terms = self.layout.critic_terms() if critic else self.layout.actor_terms()
        off = 0
        for n, size in terms:
            if n == name:
                return vec[off : off + size]
            off += size
        raise KeyError(name)


def _raw_terms(state: EpisodeState, history: Optional[ObservationHistory],
               height_map: Optional[HeightMap]) -> dict:
    if history is None:
        history = ObservationHistory()
        history.observe(state)
        history.actions[-1] = state.action
    hm = np.zeros(1089) if height_map is None else height_map.flat()
    return {
        "goal": state.goal_command(),
        "t_elapse": [state.t_elapse],
        "t_left": [state.t_left],
        "actions": history.actions.ravel(),
        "ang_vel": history.ang_vel.ravel(),
        "gravity": history.gravity.ravel(),
        "q": history.q.ravel(),
        "dq": history.dq.ravel(),
        "lin_vel": state.lin_vel,
        "height_map": hm,
    }


def assemble_observation(state: EpisodeState, grid: Optional[VoxelGrid], privileged: bool,
                         normalizer: Optional[RunningNormalizer] = None,
                         history: Optional[ObservationHistory] = None,
                         height_map: Optional[HeightMap] = None,
                         critic_normalizer: Optional[RunningNormalizer] = None,
                         layout: ObservationLayout = DEFAULT_LAYOUT) -> ObservationVector:
    """Concatenate the scalar terms in layout order and normalize them.

    Histories are ordered oldest first.  Without a ``history`` only the
    current frame is filled and older slots are zero.  The voxel grid is
    passed through untouched (it is binary and never normalized).
    """
    raw = _raw_terms(state, history, height_map)

    def build(terms, norm):
        vec = np.concatenate([np.asarray(raw[name], dtype=np.float64).reshape(-1) for name, _ in terms])
        expected = sum(n for _, n in terms)
        if vec.size != expected:
            raise ValueError(f"observation length {vec.size} != {expected}")
        if norm is not None:
            if norm.dim != vec.size:
                raise ValueError(f"normalizer dim {norm.dim} != observation dim {vec.size}")
            vec = norm.apply(vec)
        return vec

    if privileged and layout.critic_height_map and height_map is None:
        raise ValueError("privileged observation needs a height map")
    actor = build(layout.actor_terms(), normalizer)
    critic = build(layout.critic_terms(), critic_normalizer) if privileged else None
    if layout.voxels and grid is None:
        raise ValueError("layout requires a voxel grid")
    return ObservationVector(actor, critic, grid if layout.voxels else None, layout)


def _term_mirror(name: str, size: int):
    if name == "goal":
        return np.arange(4), np.array([1.0, -1.0, 1.0, -1.0])
    if name in ("t_elapse", "t_left"):
        return np.arange(1), np.ones(1)
    if name in ("actions", "q", "dq"):
        frames = size // N_JOINTS
        perm = np.concatenate([JOINT_MIRROR_PERM + k * N_JOINTS for k in range(frames)])
        return perm, np.tile(JOINT_MIRROR_SIGN, frames)
    if name in ("gravity", "lin_vel"):
        return np.arange(size), np.tile([1.0, -1.0, 1.0], size // 3)
    if name == "ang_vel":
        # angular velocity is a pseudovector: mirroring y flips its x and z parts
        return np.arange(size), np.tile([-1.0, 1.0, -1.0], size // 3)
    if name == "height_map":
        return np.arange(1089).reshape(33, 33)[::-1].ravel(), np.ones(1089)
    raise KeyError(name)


def mirror_map(terms: Sequence[tuple[str, int]]):
    """Permutation and sign so that ``mirrored = sign * x[perm]``."""
    perms, signs, off = [], [], 0
    for name, size in terms:
        p, s = _term_mirror(name, size)
        perms.append(p + off)
        signs.append(s)
        off += size
    return np.concatenate(perms), np.concatenate(signs)


def flip_observation(obs: ObservationVector, grid: Optional[VoxelGrid] = None):
    """Mirror an observation across the base x-z plane.

    Returns ``(obs', grid')``; ``grid`` defaults to ``obs.grid``.
    """
    grid = obs.grid if grid is None else grid
    perm, sign = mirror_map(obs.layout.actor_terms())
    actor = sign * obs.actor_scalars[perm]
    critic = None
    if obs.critic_scalars is not None:
        cperm, csign = mirror_map(obs.layout.critic_terms())
        critic = csign * obs.critic_scalars[cperm]
    g2 = flip_y(grid) if grid is not None else None
    return ObservationVector(actor, critic, g2, obs.layout), g2


# ---------------------------------------------------------------------------
# rewards


def r_reach(P, t: float, cfg: RewardConfig = RewardConfig()) -> float:
    """Terminal-window goal reward ``1/(1+|P|^2) * 1{t > T - T_r} / T_r``."""
    dist2 = float(np.dot(P, P)) if np.ndim(P) else float(P) ** 2
    if not t > cfg.horizon - cfg.reach_window:
        return 0.0
    return 1.0 / (1.0 + dist2) / cfg.reach_window


def weight_w(d, cfg: RewardConfig = RewardConfig()):
    """Distance weight: quadratic falloff over ``m = max(d - standoff, floor)``, divided by m."""
    m = np.maximum(np.asarray(d, dtype=np.float64) - cfg.standoff, cfg.floor)
    w = np.maximum(1.0 - m / cfg.falloff, 0.0) ** 2 / m
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class ObstacleSet:
    """Obstacle sample points with horizontal unit tangents."""

    points: np.ndarray
    tangents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "tangents", np.asarray(self.tangents, dtype=np.float64).reshape(-1, 3))
        if len(self.points) != len(self.tangents):
            raise ValueError("one tangent per obstacle point")

    @classmethod
    def empty(cls) -> "ObstacleSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def around(cls, points, p, sign: float = 1.0) -> "ObstacleSet":
        """Tangents ``sign * (up x u)`` with ``u`` the unit push from each point toward ``p``.

        ``sign = +1`` circulates counter-clockwise around each obstacle.
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        u = np.asarray(p, dtype=np.float64)[None, :2] - pts[:, :2]
        n = np.linalg.norm(u, axis=1, keepdims=True)
        u = np.divide(u, n, out=np.zeros_like(u), where=n > 0)
        tang = sign * np.column_stack([-u[:, 1], u[:, 0], np.zeros(len(u))])
        return cls(pts, tang)


def obstacle_points(features: dict, p) -> np.ndarray:
    """Nearest surface point of each pillar; nearest point and endpoints of each wall."""
    p = np.asarray(p, dtype=np.float64)
    pts = []
    for cx, cy, r in features.get("pillars", []):
        d = p[:2] - [cx, cy]
        n = np.linalg.norm(d)
        q = np.array([cx, cy]) + (r * d / n if n > 0 else 0.0)
        pts.append([q[0], q[1], 0.0])
    for x, y0, y1 in features.get("walls", []):
        yn = min(max(p[1], y0), y1)
        pts.append([x, yn, 0.0])
        pts += [[x, y0, 0.0], [x, y1, 0.0]]
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


def block_obstacles(features: dict, p, sign: float = 1.0) -> ObstacleSet:
    return ObstacleSet.around(obstacle_points(features, p), p, sign)


def direction_field(p, g, obstacles: ObstacleSet, cfg: RewardConfig = RewardConfig()) -> np.ndarray:
    """Weighted repulsion plus goal-gated tangential circulation from obstacles within the radius."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    a = np.zeros(3)
    if len(obstacles.points) == 0:
        return a
    diff = p[None, :2] - obstacles.points[:, :2]
    dist = np.linalg.norm(diff, axis=1)
    near = (dist <= cfg.influence_radius) & (dist > 0)
    if not near.any():
        return a
    dist = dist[near]
    u = np.column_stack([diff[near] / dist[:, None], np.zeros(near.sum())])  # obstacle -> robot
    w = weight_w(dist, cfg)
    gamma = np.maximum(-(u @ g), 0.0)  # g . (robot -> obstacle)
    a += (w[:, None] * u).sum(axis=0)
    a += cfg.kappa * ((w * gamma)[:, None] * obstacles.tangents[near]).sum(axis=0)
    return a


def r_velocity_direction(v, a) -> float:
    """Cosine between velocity and the direction field; 0 when either is ~zero."""
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    nv, na = np.linalg.norm(v), np.linalg.norm(a)
    if nv < 1e-8 or na < 1e-8:
        return 0.0
    return float(np.clip(np.dot(a, v) / (na * nv), -1.0, 1.0))


def _patch_points(center_xy, direction, patch: float, samples: int) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)[:2]
    n = np.linalg.norm(d)
    d = d / n if n > 1e-12 else np.array([1.0, 0.0])
    side = np.array([-d[1], d[0]])
    ax = np.linspace(-patch / 2, patch / 2, samples) if samples > 1 else np.zeros(1)
    a, b = np.meshgrid(ax, ax, indexing="ij")
    return center_xy[None, :] + a.reshape(-1, 1) * d + b.reshape(-1, 1) * side


def lookahead_height(terrain: Sequence[SceneInstance], origin_xy, direction, lookahead: float,
                     patch: float, offset: float, samples: int = 5, default: float = 0.0) -> float:
    """Mean top-surface height over a square patch ``lookahead`` ahead, minus ``offset``."""
    d = np.asarray(direction, dtype=np.float64)[:2]
    n = np.linalg.norm(d)
    d = d / n if n > 1e-12 else np.zeros(2)
    center = np.asarray(origin_xy, dtype=np.float64)[:2] + lookahead * d
    pts = _patch_points(center, direction, patch, samples)
    start = 50.0
    origins = np.column_stack([pts, np.full(len(pts), start)])
    t, inst = cast_scene(terrain, origins, np.broadcast_to([0.0, 0.0, -1.0], origins.shape), 1e6)
    h = np.where(inst >= 0, start - t, default)
    return float(h.mean() - offset)


def head_height_target(ground: Sequence[SceneInstance], overhead: Sequence[SceneInstance], origin_xy,
                       direction, base_z: float, cfg: RewardConfig = RewardConfig()) -> float:
    """Head height the robot should have ``head_lookahead`` ahead.

    Each patch sample takes the lower of the nominal head height over the
    ground and the underside of any overhead structure; the patch mean minus
    the head offset is returned.  Open ground gives exactly the nominal height.
    """
    d = np.asarray(direction, dtype=np.float64)[:2]
    n = np.linalg.norm(d)
    d = d / n if n > 1e-12 else np.zeros(2)
    center = np.asarray(origin_xy, dtype=np.float64)[:2] + cfg.head_lookahead * d
    pts = _patch_points(center, direction, cfg.patch, cfg.patch_samples)
    start = 50.0
    down = np.broadcast_to([0.0, 0.0, -1.0], (len(pts), 3))
    t, inst = cast_scene(ground, np.column_stack([pts, np.full(len(pts), start)]), down, 1e6)
    ground_z = np.where(inst >= 0, start - t, 0.0)
    cap = ground_z + cfg.nominal_head_height + cfg.head_offset
    if overhead:
        up = np.broadcast_to([0.0, 0.0, 1.0], (len(pts), 3))
        tu, iu = cast_scene(overhead, np.column_stack([pts, np.full(len(pts), base_z)]), up, 1e6)
        cap = np.minimum(cap, np.where(iu >= 0, base_z + tu, np.inf))
    return float(cap.mean() - cfg.head_offset)


def r_head_height(h_est: float, h_head: float, sharpness: float = 4.0) -> float:
    return float(np.exp(-sharpness * (h_est - h_head) ** 2))


def r_feet_clearance(h_est: float, h_feet: float, sharpness: float = 4.0) -> float:
    return float(np.exp(-sharpness * (h_est - h_feet) ** 2))


# ---------------------------------------------------------------------------
# termination


@dataclass(frozen=True)
class Termination:
    reason: str
    time: float
    index: int


REASONS = ("force_contact", "pillar_fall", "fall_over", "feet_too_close", "no_movement", "timeout")


def _frame_reason(i: int, state: EpisodeState, trace: Sequence[EpisodeState], family: Optional[str],
                  ground_z: float, cfg: TerminationConfig) -> Optional[str]:
    if np.any(state.contact_forces > cfg.force_limit):
        return "force_contact"
    if family in cfg.pillar_families and np.any(state.feet[:, 2] < ground_z - cfg.pillar_sink):
        return "pillar_fall"
    g = state.projected_gravity
    tilt = np.degrees(np.arccos(np.clip(-g[2], -1.0, 1.0)))
    if tilt > cfg.max_tilt_deg:
        return "fall_over"
    if np.linalg.norm(state.feet[0, :2] - state.feet[1, :2]) < cfg.min_feet_distance:
        return "feet_too_close"
    t0 = trace[0].t
    if state.t - t0 >= cfg.progress_window - 1e-9:
        start = trace[0].position[:2]
        best = max(np.linalg.norm(s.position[:2] - start) for s in trace[: i + 1]
                   if s.t - t0 <= cfg.progress_window + 1e-9)
        if best < cfg.min_progress:
            return "no_movement"
    if state.t >= cfg.horizon - 1e-9:
        return "timeout"
    return None


def check_termination(trace: Sequence[EpisodeState], block=None,
                      cfg: TerminationConfig = TerminationConfig()) -> Optional[Termination]:
    """Earliest frame at which any termination predicate fires.

    Movement is judged once, from the start position over the first
    ``progress_window`` seconds.  Ties within a frame follow ``REASONS`` order.
    """
    if not trace:
        raise ValueError("empty trace")
    family = getattr(getattr(block, "family", None), "value", None)
    ground_z = float(getattr(block, "features", {}).get("top", 0.0)) if block is not None else 0.0
    for i, state in enumerate(trace):
        reason = _frame_reason(i, state, trace, family, ground_z, cfg)
        if reason is not None:
            return Termination(reason, state.t, i)
    return None


def episode_success(trace: Sequence[EpisodeState], block=None, radius: float = 0.5,
                    cfg: TerminationConfig = TerminationConfig()) -> bool:
    """Goal within ``radius`` at the horizon without an early termination."""
    term = check_termination(trace, block, cfg)
    if term is not None and term.reason != "timeout":
        return False
    last = trace[-1] if term is None else trace[term.index]
    return bool(np.linalg.norm(last.goal[:2] - last.position[:2]) < radius)


# ---------------------------------------------------------------------------
# reward replay


REWARD_COLUMNS = ("tick", "t", "r_reach", "r_velocity_direction", "r_head_height", "r_feet_clearance",
                  "termination")


def reward_breakdown(state: EpisodeState, block=None, cfg: RewardConfig = RewardConfig()) -> dict:
    P = state.goal[:2] - state.position[:2]
    g = state.goal_direction()
    ground = list(block.ground_instances()) if block is not None else []
    overhead = list(block.overhead_instances()) if block is not None else []
    feats = block.features if block is not None else {}
    p = state.position
    a = direction_field(p, g, block_obstacles(feats, p, cfg.tangent_sign), cfg)
    v = state.world_velocity()
    v[2] = 0.0
    head_est = head_height_target(ground, overhead, p, g, p[2], cfg) if ground else cfg.nominal_head_height
    feet_r = []
    for foot in state.feet:
        h_est = (lookahead_height(ground, foot, g, cfg.foot_lookahead, cfg.patch, cfg.foot_offset,
                                  cfg.patch_samples) if ground else 0.0)
        feet_r.append(r_feet_clearance(h_est, foot[2], cfg.sharpness))
    return {
        "r_reach": r_reach(P, state.t, cfg),
        "r_velocity_direction": r_velocity_direction(v, a),
        "r_head_height": r_head_height(head_est, state.head_z, cfg.sharpness),
        "r_feet_clearance": float(np.mean(feet_r)),
        "head_target": head_est,
    }


def replay_rewards(trace: Sequence[EpisodeState], block=None, cfg: RewardConfig = RewardConfig(),
                   term_cfg: TerminationConfig = TerminationConfig()) -> list[dict]:
    """Per-tick reward terms (unweighted) until and including the terminating tick."""
    term = check_termination(trace, block, term_cfg)
    last = len(trace) - 1 if term is None else term.index
    rows = []
    for i, state in enumerate(trace[: last + 1]):
        r = reward_breakdown(state, block, cfg)
        rows.append({
            "tick": i, "t": state.t,
            **{k: r[k] for k in REWARD_COLUMNS[2:6]},
            "termination": term.reason if term is not None and i == term.index else "",
        })
    return rows


# ---------------------------------------------------------------------------
# trace files


def trace_columns() -> list[str]:
    cols = ["t", "goal_x", "goal_y", "goal_z", "base_x", "base_y", "base_z",
            "base_qw", "base_qx", "base_qy", "base_qz",
            "vx", "vy", "vz", "wx", "wy", "wz", "head_z",
            "lfoot_x", "lfoot_y", "lfoot_z", "rfoot_x", "rfoot_y", "rfoot_z",
            "f_torso", "f_hip", "f_knee"]
    for prefix in ("q", "dq", "a"):
        cols += [f"{prefix}_{j}" for j in range(N_JOINTS)]
    return cols


def state_to_row(s: EpisodeState) -> list[float]:
    q = s.base.quaternion
    row = [s.t, *s.goal, *s.position, *q, *s.lin_vel, *s.ang_vel, s.head_z,
           *s.feet[0], *s.feet[1], *s.contact_forces]
    row += list(s.joint_pos) + list(s.joint_vel) + list(s.action)
    return [float(v) for v in row]


def write_trace(trace: Sequence[EpisodeState], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(trace_columns())
    for s in trace:
        w.writerow([repr(v) for v in state_to_row(s)])
    Path(path).write_text(buf.getvalue())


class TraceFormatError(ValueError):
    pass


def read_trace(path, horizon: float = 10.0, dt: float = CONTROL_DT) -> list[EpisodeState]:
    """Read a trace CSV.  Missing columns default to zero; missing base
    velocities are finite-differenced from positions.  Timestamps must advance
    by ``dt``.
    """
    text = Path(path).read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise TraceFormatError(f"{path}: no rows")
    required = {"t", "goal_x", "goal_y", "base_x", "base_y", "base_z"}
    missing = required - set(rows[0])
    if missing:
        raise TraceFormatError(f"{path}: missing columns {sorted(missing)}")

    def col(r, name, default=0.0):
        v = r.get(name)
        if v is None or v == "":
            return default
        try:
            return float(v)
        except ValueError:
            raise TraceFormatError(f"{path}: bad value {v!r} in column {name}") from None

    ts = np.array([col(r, "t") for r in rows])
    if len(ts) > 1 and np.any(np.abs(np.diff(ts) - dt) > 1e-6):
        raise TraceFormatError(f"{path}: timestamps must advance by {dt} s")
    has_vel = "vx" in rows[0]
    states = []
    for r in rows:
        quat = [col(r, "base_qw", 1.0), col(r, "base_qx"), col(r, "base_qy"), col(r, "base_qz")]
        base = RigidTransform.from_quaternion(quat, [col(r, "base_x"), col(r, "base_y"), col(r, "base_z")])
        feet = [[col(r, "lfoot_x", base.translation[0]), col(r, "lfoot_y", base.translation[1] + 0.1), col(r, "lfoot_z")],
                [col(r, "rfoot_x", base.translation[0]), col(r, "rfoot_y", base.translation[1] - 0.1), col(r, "rfoot_z")]]
        states.append(EpisodeState(
            t=col(r, "t"), goal=[col(r, "goal_x"), col(r, "goal_y"), col(r, "goal_z")], base=base,
            lin_vel=[col(r, "vx"), col(r, "vy"), col(r, "vz")],
            ang_vel=[col(r, "wx"), col(r, "wy"), col(r, "wz")],
            joint_pos=[col(r, f"q_{j}") for j in range(N_JOINTS)],
            joint_vel=[col(r, f"dq_{j}") for j in range(N_JOINTS)],
            action=[col(r, f"a_{j}") for j in range(N_JOINTS)],
            feet=feet, head_z=col(r, "head_z", 1.2),
            contact_forces=[col(r, "f_torso"), col(r, "f_hip"), col(r, "f_knee")],
            horizon=horizon,
        ))
    if not has_vel and len(states) > 1:
        pos = np.array([s.position for s in states])
        vel = np.gradient(pos, ts, axis=0)
        for s, v in zip(states, vel):
            s.lin_vel = s.base.apply_inverse_direction(v)
    return states


def write_reward_csv(rows: Sequence[dict], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REWARD_COLUMNS)
    for r in rows:
        w.writerow([r["tick"], f"{r['t']:.2f}"] + [f"{r[k]:.9f}" for k in REWARD_COLUMNS[2:6]] + [r["termination"]])
    Path(path).write_text(buf.getvalue())


def straight_line_trace(start, goal, duration: float = 10.0, speed: float = 0.6, dt: float = CONTROL_DT,
                        base_height: float = 0.75, head_height: float = 1.2, stop_at_goal: bool = True,
                        ground_fn=None, torso_pitch: float = 0.0) -> list[EpisodeState]:
    """Scripted puppet walking from ``start`` toward ``goal`` at constant speed.

    ``ground_fn(xy) -> z`` lifts the base, head and feet over terrain.  A lower
    ``base_height`` with a forward ``torso_pitch`` (radians) gives a crouch.
    """
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    d = goal[:2] - start[:2]
    dist = np.linalg.norm(d)
    u = d / dist if dist > 0 else np.array([1.0, 0.0])
    yaw = float(np.arctan2(u[1], u[0]))
    side = np.array([-u[1], u[0]])
    R = rpy_matrix(0.0, torso_pitch, yaw)
    n = int(round(duration / dt)) + 1
    out = []
    for k in range(n):
        t = round(k * dt, 10)
        s = min(speed * t, dist) if stop_at_goal else speed * t
        xy = start[:2] + s * u
        gz = float(ground_fn(xy)) if ground_fn is not None else 0.0
        moving = speed > 0 and (not stop_at_goal or speed * t < dist)
        v_world = np.array([*(speed * u), 0.0]) if moving else np.zeros(3)
        feet = np.array([[*(xy + 0.1 * side), gz], [*(xy - 0.1 * side), gz]])
        out.append(EpisodeState(
            t=t, goal=goal, base=RigidTransform(R, [xy[0], xy[1], gz + base_height]),
            lin_vel=R.T @ v_world, feet=feet, head_z=gz + head_height, horizon=duration,
        ))
    return out
