"""Triangle meshes, rigid transforms, BVH construction and ray casting.

Meshes live in their own body frame and carry a BVH built once.  Moving a mesh
never rebuilds the hierarchy: a world-space ray is mapped into the body frame
(inverse transform on the origin, inverse rotation on the direction), cast
against the static BVH, and the hit is mapped back with the forward transform.
The ray parameter ``t`` survives the round trip unchanged because rotations
preserve length.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

DEFAULT_T_MAX = 100.0
BARY_EPS = 1e-9
LEAF_SIZE = 4
# absolute slack on node boxes so that barycentric slack never loses a hit
_BOX_PAD = 1e-7

MESH_MAGIC = b"VXMESH1"


class GeometryError(ValueError):
    """Invalid geometric input (bad mesh, non-orthonormal rotation, ...)."""


def as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise GeometryError(f"non-finite vector {a}")
    return a


def normalize(v) -> np.ndarray:
    a = as_vec3(v)
    n = np.linalg.norm(a)
    if n == 0.0:
        raise GeometryError("cannot normalize a zero vector")
    return a / n


# ---------------------------------------------------------------------------
# transforms


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion; the input is normalized."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) with w >= 0."""
    m = np.asarray(R, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    k = normalize(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def rotvec_matrix(rotvec) -> np.ndarray:
    rv = as_vec3(rotvec)
    angle = float(np.linalg.norm(rv))
    if angle == 0.0:
        return np.eye(3)
    return axis_angle_matrix(rv / angle, angle)


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic z-y-x (yaw, then pitch, then roll) rotation."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class RigidTransform:
    """``x_world = rotation @ x_body + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = as_vec3(self.translation)
        if not np.all(np.isfinite(R)):
            raise GeometryError("non-finite rotation")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), t)

    @classmethod
    def from_quaternion(cls, q, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(quat_to_matrix(q), t)

    @classmethod
    def from_yaw(cls, yaw: float, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rpy_matrix(0.0, 0.0, yaw), t)

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0) -> "RigidTransform":
        q = rng.normal(size=4)
        return cls(quat_to_matrix(q), rng.uniform(-scale, scale, size=3))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_direction(self, dirs) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply_inverse(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def apply_inverse_direction(self, dirs) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def quaternion(self) -> np.ndarray:
        return matrix_to_quat(self.rotation)


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    mesh_id: int = 0

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite vertex")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        if f.size:
            a = v[f[:, 1]] - v[f[:, 0]]
            b = v[f[:, 2]] - v[f[:, 0]]
            area = 0.5 * np.linalg.norm(np.cross(a, b), axis=1)
            bad = np.nonzero(area <= 1e-12)[0]
            if bad.size:
                raise GeometryError(f"degenerate triangle(s) {bad[:5].tolist()}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def transformed(self, transform: RigidTransform, mesh_id: Optional[int] = None) -> "TriangleMesh":
        return TriangleMesh(
            transform.apply(self.vertices), self.triangles, self.mesh_id if mesh_id is None else mesh_id
        )

    def bounds(self) -> "Aabb":
        return Aabb(self.vertices.min(axis=0), self.vertices.max(axis=0))


def merge_meshes(meshes: Sequence[TriangleMesh], mesh_id: int = 0) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), mesh_id)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris), mesh_id)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo, hi = as_vec3(self.min), as_vec3(self.max)
        if np.any(lo > hi):
            raise GeometryError("Aabb min must be <= max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, other: "Aabb", tol: float = 0.0) -> bool:
        return bool(np.all(other.min >= self.min - tol) and np.all(other.max <= self.max + tol))


# ---------------------------------------------------------------------------
# BVH


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flat BVH; node ``i`` is a leaf iff ``left[i] < 0``.

    Leaves reference ``tri_index[start:start + count]``.  Triangle data is
    stored pre-gathered in leaf order (``v0``, ``e1``, ``e2``) so traversal
    touches contiguous memory.
    """

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    tri_index: np.ndarray
    v0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    mesh_id: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    @property
    def root_bounds(self) -> Aabb:
        return Aabb(self.node_min[0], self.node_max[0])

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def leaf_triangles(self, node: int) -> np.ndarray:
        s = self.start[node]
        return self.tri_index[s : s + self.count[node]]


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the longest centroid axis until leaves hold <= ``leaf_size``."""
    n = mesh.n_triangles
    if n == 0:
        raise GeometryError("cannot build a BVH over an empty mesh")
    tv = mesh.vertices[mesh.triangles]  # (n, 3, 3)
    tmin = tv.min(axis=1)
    tmax = tv.max(axis=1)
    cent = tv.mean(axis=1)

    order = np.arange(n, dtype=np.int64)
    node_min, node_max, left, right, start, count = [], [], [], [], [], []

    def new_node() -> int:
        node_min.append(None)
        node_max.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(left) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        node_min[node] = tmin[idx].min(axis=0)
        node_max[node] = tmax[idx].max(axis=0)
        if hi - lo <= leaf_size:
            start[node] = lo
            count[node] = hi - lo
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (hi - lo) // 2
        # stable tie order keeps the build deterministic
        part = np.argsort(c[:, axis], kind="stable")
        order[lo:hi] = idx[part]
        lchild = new_node()
        rchild = new_node()
        left[node] = lchild
        right[node] = rchild
        stack.append((rchild, lo + mid, hi))
        stack.append((lchild, lo, lo + mid))

    tri = mesh.triangles[order]
    v = mesh.vertices
    v0 = v[tri[:, 0]]
    return Bvh(
        node_min=np.ascontiguousarray(node_min, dtype=np.float64),
        node_max=np.ascontiguousarray(node_max, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        start=np.asarray(start, dtype=np.int64),
        count=np.asarray(count, dtype=np.int64),
        tri_index=order,
        v0=np.ascontiguousarray(v0),
        e1=np.ascontiguousarray(v[tri[:, 1]] - v0),
        e2=np.ascontiguousarray(v[tri[:, 2]] - v0),
        mesh_id=mesh.mesh_id,
    )


@numba.njit(cache=True, nogil=True)
def _slab(lo, hi, o, inv, d):
    # returns (tnear, tfar) of ray vs padded box
    tnear = -np.inf
    tfar = np.inf
    for a in range(3):
        l = lo[a] - _BOX_PAD
        h = hi[a] + _BOX_PAD
        if d[a] == 0.0:
            if o[a] < l or o[a] > h:
                return np.inf, -np.inf
        else:
            t0 = (l - o[a]) * inv[a]
            t1 = (h - o[a]) * inv[a]
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > tnear:
                tnear = t0
            if t1 < tfar:
                tfar = t1
    return tnear, tfar


@numba.njit(cache=True, nogil=True)
def _trace_kernel(node_min, node_max, left, right, start, count, tri_index, v0, e1, e2,
                  origins, dirs, t_max, out_t, out_tri):
    stack = np.empty(128, dtype=np.int64)
    inv = np.empty(3)
    pvec = np.empty(3)
    qvec = np.empty(3)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        for a in range(3):
            inv[a] = 1.0 / d[a] if d[a] != 0.0 else 0.0
        best_t = t_max[r]
        best_tri = -1
        sp = 0
        tn, tf = _slab(node_min[0], node_max[0], o, inv, d)
        if tn <= tf and tf >= 0.0 and tn <= best_t:
            stack[0] = 0
            sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if left[node] < 0:
                s = start[node]
                for k in range(s, s + count[node]):
                    a0 = e1[k]
                    a1 = e2[k]
                    pvec[0] = d[1] * a1[2] - d[2] * a1[1]
                    pvec[1] = d[2] * a1[0] - d[0] * a1[2]
                    pvec[2] = d[0] * a1[1] - d[1] * a1[0]
                    det = a0[0] * pvec[0] + a0[1] * pvec[1] + a0[2] * pvec[2]
                    nx = a0[1] * a1[2] - a0[2] * a1[1]
                    ny = a0[2] * a1[0] - a0[0] * a1[2]
                    nz = a0[0] * a1[1] - a0[1] * a1[0]
                    nn = np.sqrt(nx * nx + ny * ny + nz * nz)
                    if abs(det) <= 1e-12 * nn:
                        continue
                    idet = 1.0 / det
                    tx = o[0] - v0[k, 0]
                    ty = o[1] - v0[k, 1]
                    tz = o[2] - v0[k, 2]
                    u = (tx * pvec[0] + ty * pvec[1] + tz * pvec[2]) * idet
                    if u < -BARY_EPS or u > 1.0 + BARY_EPS:
                        continue
                    qvec[0] = ty * a0[2] - tz * a0[1]
                    qvec[1] = tz * a0[0] - tx * a0[2]
                    qvec[2] = tx * a0[1] - ty * a0[0]
                    v = (d[0] * qvec[0] + d[1] * qvec[1] + d[2] * qvec[2]) * idet
                    if v < -BARY_EPS or u + v > 1.0 + BARY_EPS:
                        continue
                    t = (a1[0] * qvec[0] + a1[1] * qvec[1] + a1[2] * qvec[2]) * idet
                    if t < 0.0 or t > t_max[r]:
                        continue
                    ti = tri_index[k]
                    if t < best_t or (t == best_t and (best_tri < 0 or ti < best_tri)):
                        best_t = t
                        best_tri = ti
            else:
                c0 = left[node]
                c1 = right[node]
                n0, f0 = _slab(node_min[c0], node_max[c0], o, inv, d)
                n1, f1 = _slab(node_min[c1], node_max[c1], o, inv, d)
                hit0 = n0 <= f0 and f0 >= 0.0 and n0 <= best_t + 1e-9
                hit1 = n1 <= f1 and f1 >= 0.0 and n1 <= best_t + 1e-9
                # push far child first so the near one pops next
                if hit0 and hit1:
                    if n0 <= n1:
                        stack[sp] = c1
                        stack[sp + 1] = c0
                    else:
                        stack[sp] = c0
                        stack[sp + 1] = c1
                    sp += 2
                elif hit0:
                    stack[sp] = c0
                    sp += 1
                elif hit1:
                    stack[sp] = c1
                    sp += 1
        if best_tri >= 0:
            out_t[r] = best_t
        else:
            out_t[r] = np.inf
        out_tri[r] = best_tri


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("VOXNAV_THREADS", "1")))
    except ValueError:
        return 1


def intersect_rays(bvh: Bvh, origins, directions, t_max=DEFAULT_T_MAX):
    """Nearest hit for a batch of body-frame rays.

    Returns ``(t, tri)`` arrays; misses have ``t = inf`` and ``tri = -1``.
    Directions are used as given (callers normalize).
    """
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    n = len(o)
    tm = np.ascontiguousarray(np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,)))
    out_t = np.empty(n)
    out_tri = np.empty(n, dtype=np.int64)
    args = (bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count,
            bvh.tri_index, bvh.v0, bvh.e1, bvh.e2)
    threads = _thread_count()
    if threads == 1 or n < 4096:
        _trace_kernel(*args, o, d, tm, out_t, out_tri)
    else:
        # rays are independent, so any partition gives identical results
        bounds = np.linspace(0, n, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(
                lambda ab: _trace_kernel(*args, o[ab[0]:ab[1]], d[ab[0]:ab[1]], tm[ab[0]:ab[1]],
                                         out_t[ab[0]:ab[1]], out_tri[ab[0]:ab[1]]),
                zip(bounds[:-1], bounds[1:]),
            ))
    return out_t, out_tri


def intersect_rays_world(bvh: Bvh, transform: RigidTransform, origins, directions, t_max=DEFAULT_T_MAX):
    """Batch cast against a posed mesh through its body-frame BVH."""
    lo = transform.apply_inverse(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    ld = transform.apply_inverse_direction(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    return intersect_rays(bvh, lo, ld, t_max)


# ---------------------------------------------------------------------------
# single-ray API


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_max: float = DEFAULT_T_MAX

    def __post_init__(self):
        object.__setattr__(self, "origin", as_vec3(self.origin))
        object.__setattr__(self, "direction", normalize(self.direction))
        if not self.t_max > 0:
            raise GeometryError("t_max must be positive")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class RayHit:
    t: float
    point: np.ndarray
    mesh_id: int
    triangle_index: int


def raycast_local(bvh: Bvh, mesh: TriangleMesh, ray: Ray) -> Optional[RayHit]:
    t, tri = intersect_rays(bvh, ray.origin[None], ray.direction[None], ray.t_max)
    if tri[0] < 0:
        return None
    return RayHit(float(t[0]), ray.at(t[0]), mesh.mesh_id, int(tri[0]))


def raycast_world(bvh: Bvh, mesh: TriangleMesh, transform: RigidTransform, ray: Ray) -> Optional[RayHit]:
    """Cast a world ray against ``mesh`` posed by ``transform``.

    The local hit is mapped back with the forward transform, so the identity
    transform reduces exactly to :func:`raycast_local`.
    """
    local = Ray(
        transform.apply_inverse(ray.origin),
        transform.apply_inverse_direction(ray.direction),
        ray.t_max,
    )
    hit = raycast_local(bvh, mesh, local)
    if hit is None:
        return None
    return RayHit(hit.t, transform.apply(hit.point), hit.mesh_id, hit.triangle_index)


# ---------------------------------------------------------------------------
# mesh file formats


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"# mesh_id {mesh.mesh_id}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path, mesh_id: Optional[int] = None) -> TriangleMesh:
    verts, faces, mid = [], [], 0
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            # accept "i", "i/t", "i/t/n"; polygons are fanned
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])
        elif parts[:2] == ["#", "mesh_id"] and len(parts) > 2:
            mid = int(parts[2])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3),
                        mid if mesh_id is None else mesh_id)


def write_mesh_binary(mesh: TriangleMesh, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MESH_MAGIC)
        fh.write(struct.pack("<II", len(mesh.vertices), len(mesh.triangles)))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        fh.write(mesh.triangles.astype("<u4").tobytes())


def read_mesh_binary(path, mesh_id: int = 0) -> TriangleMesh:
    data = Path(path).read_bytes()
    if data[: len(MESH_MAGIC)] != MESH_MAGIC:
        raise GeometryError(f"{path}: bad mesh magic")
    off = len(MESH_MAGIC)
    nv, nt = struct.unpack_from("<II", data, off)
    off += 8
    v = np.frombuffer(data, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3)
    off += 12 * nv
    f = np.frombuffer(data, dtype="<u4", count=3 * nt, offset=off).reshape(nt, 3)
    return TriangleMesh(v.astype(np.float64), f.astype(np.int64), mesh_id)


# ---------------------------------------------------------------------------
# primitive builders used by terrain and tests


def box_mesh(lo, hi, mesh_id: int = 0) -> TriangleMesh:
    """Axis-aligned box between corners ``lo`` and ``hi`` (12 triangles)."""
    x0, y0, z0 = as_vec3(lo)
    x1, y1, z1 = as_vec3(hi)
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    f = np.array([
        [0, 2, 1], [0, 3, 2],  # bottom
        [4, 5, 6], [4, 6, 7],  # top
        [0, 1, 5], [0, 5, 4],
        [1, 2, 6], [1, 6, 5],
        [2, 3, 7], [2, 7, 6],
        [3, 0, 4], [3, 4, 7],
    ])
    return TriangleMesh(v, f, mesh_id)


def quad_mesh(x0: float, x1: float, y0: float, y1: float, z: float = 0.0, mesh_id: int = 0) -> TriangleMesh:
    """Horizontal rectangle at height ``z`` (2 triangles, normal +z)."""
    v = np.array([[x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z]])
    return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]), mesh_id)


def cylinder_mesh(center_xy, radius: float, z0: float, z1: float, segments: int = 12,
                  mesh_id: int = 0) -> TriangleMesh:
    """Capped vertical prism approximating a cylinder."""
    cx, cy = float(center_xy[0]), float(center_xy[1])
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, z0)])
    top = np.column_stack([ring, np.full(segments, z1)])
    v = np.vstack([bottom, top, [[cx, cy, z0], [cx, cy, z1]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + j], [i, segments + j, segments + i]]
        faces += [[cb, j, i], [ct, segments + i, segments + j]]
    return TriangleMesh(v, np.array(faces), mesh_id)
