import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxnav.geometry import (
    Aabb, GeometryError, Ray, RigidTransform, TriangleMesh, box_mesh, build_bvh, cylinder_mesh,
    intersect_rays, intersect_rays_world, matrix_to_quat, merge_meshes, quad_mesh, quat_to_matrix,
    raycast_local, raycast_world, read_mesh_binary, read_obj, write_mesh_binary, write_obj,
)
from oracles import brute_force_hits, random_rays, random_soup


def test_ground_plane_hit_straight_down():
    mesh = quad_mesh(-4, 4, -4, 4, 0.0)
    bvh = build_bvh(mesh)
    hit = raycast_local(bvh, mesh, Ray([0, 0, 2], [0, 0, -1]))
    assert hit.t == pytest.approx(2.0, abs=1e-12)
    assert np.allclose(hit.point, [0, 0, 0])
    assert hit.triangle_index in (0, 1)


def test_miss_returns_none():
    mesh = quad_mesh(-1, 1, -1, 1, 0.0)
    bvh = build_bvh(mesh)
    assert raycast_local(bvh, mesh, Ray([0, 0, 2], [0, 0, 1])) is None
    assert raycast_local(bvh, mesh, Ray([5, 0, 2], [0, 0, -1])) is None


def test_t_max_cuts_off_hits():
    mesh = quad_mesh(-1, 1, -1, 1, 0.0)
    bvh = build_bvh(mesh)
    assert raycast_local(bvh, mesh, Ray([0, 0, 2], [0, 0, -1], t_max=1.5)) is None


def test_translated_plane_world_hit():
    mesh = quad_mesh(-4, 4, -4, 4, 0.0)
    bvh = build_bvh(mesh)
    T = RigidTransform.from_translation([0, 0, 1])
    hit = raycast_world(bvh, mesh, T, Ray([0, 0, 3], [0, 0, -1]))
    assert hit.t == pytest.approx(2.0)
    assert np.allclose(hit.point, [0, 0, 1])


def test_identity_transform_matches_local():
    rng = np.random.default_rng(3)
    V, F = random_soup(rng, 50)
    mesh = TriangleMesh(V, F)
    bvh = build_bvh(mesh)
    o, d = random_rays(rng, 200)
    for i in range(len(o)):
        a = raycast_local(bvh, mesh, Ray(o[i], d[i]))
        b = raycast_world(bvh, mesh, RigidTransform.identity(), Ray(o[i], d[i]))
        assert (a is None) == (b is None)
        if a is not None:
            assert a.t == b.t and np.array_equal(a.point, b.point)


def test_bvh_structure_invariants():
    rng = np.random.default_rng(0)
    V, F = random_soup(rng, 777)
    bvh = build_bvh(TriangleMesh(V, F))
    seen = np.concatenate([bvh.leaf_triangles(i) for i in range(bvh.n_nodes) if bvh.is_leaf(i)])
    assert np.array_equal(np.sort(seen), np.arange(777))
    for i in range(bvh.n_nodes):
        if bvh.is_leaf(i):
            assert 1 <= bvh.count[i] <= 4
            continue
        parent = Aabb(bvh.node_min[i], bvh.node_max[i])
        for c in (bvh.left[i], bvh.right[i]):
            assert parent.contains(Aabb(bvh.node_min[c], bvh.node_max[c]))


def test_bvh_leaf_bounds_cover_triangles():
    rng = np.random.default_rng(1)
    V, F = random_soup(rng, 100)
    bvh = build_bvh(TriangleMesh(V, F))
    for i in range(bvh.n_nodes):
        if bvh.is_leaf(i):
            for tri in bvh.leaf_triangles(i):
                pts = V[F[tri]]
                assert np.all(pts >= bvh.node_min[i] - 1e-12) and np.all(pts <= bvh.node_max[i] + 1e-12)


def test_empty_mesh_rejected():
    with pytest.raises(GeometryError):
        build_bvh(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))


def test_degenerate_triangle_rejected():
    with pytest.raises(GeometryError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])
    with pytest.raises(GeometryError):
        TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])


def test_non_orthonormal_rotation_rejected():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, 1.1]))
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))


def test_brute_force_agreement_small():
    rng = np.random.default_rng(11)
    V, F = random_soup(rng, 300)
    bvh = build_bvh(TriangleMesh(V, F))
    o, d = random_rays(rng, 300)
    t, tri = intersect_rays(bvh, o, d, np.inf)
    bt, btri = brute_force_hits(V, F, o, d)
    assert np.array_equal(np.isfinite(t), np.isfinite(bt))
    hit = np.isfinite(t)
    assert np.allclose(t[hit], bt[hit], rtol=1e-9, atol=0)
    assert np.array_equal(tri[hit], btri[hit])


def test_box_occludes_plane():
    plane = quad_mesh(-4, 4, -4, 4, 0.0)
    box = box_mesh([-0.5, -0.5, 0.2], [0.5, 0.5, 0.6])
    mesh = merge_meshes([plane, box])
    bvh = build_bvh(mesh)
    hit = raycast_local(bvh, mesh, Ray([0, 0, 2], [0, 0, -1]))
    assert hit.t == pytest.approx(1.4)


def test_equal_t_tie_goes_to_lowest_index():
    a = quad_mesh(-1, 1, -1, 1, 0.0)
    mesh = merge_meshes([a, a.transformed(RigidTransform.identity())])
    bvh = build_bvh(mesh)
    o = np.array([[0.3, -0.2, 1.0]])
    t, tri = intersect_rays(bvh, o, [[0, 0, -1]])
    assert tri[0] in (0, 1)  # the lowest-index triangle covering the point


def test_world_batch_matches_pretransformed():
    rng = np.random.default_rng(5)
    V, F = random_soup(rng, 80)
    mesh = TriangleMesh(V, F)
    T = RigidTransform.random(rng, 2.0)
    o, d = random_rays(rng, 200)
    t1, tri1 = intersect_rays_world(build_bvh(mesh), T, o, d)
    t2, tri2 = intersect_rays(build_bvh(mesh.transformed(T)), o, d)
    assert np.array_equal(tri1, tri2)
    fin = np.isfinite(t1)
    assert np.allclose(t1[fin], t2[fin], atol=1e-9)


def test_threaded_traversal_is_identical(monkeypatch):
    rng = np.random.default_rng(9)
    V, F = random_soup(rng, 200)
    bvh = build_bvh(TriangleMesh(V, F))
    o, d = random_rays(rng, 10000)
    t1, tri1 = intersect_rays(bvh, o, d)
    monkeypatch.setenv("VOXNAV_THREADS", "3")
    t2, tri2 = intersect_rays(bvh, o, d)
    assert np.array_equal(t1, t2) and np.array_equal(tri1, tri2)


def test_cylinder_side_hit():
    mesh = cylinder_mesh((0, 0), 0.5, 0, 1, segments=64)
    bvh = build_bvh(mesh)
    hit = raycast_local(bvh, mesh, Ray([3, 0, 0.5], [-1, 0, 0]))
    assert hit.t == pytest.approx(2.5, abs=1e-12)


def test_obj_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    V, F = random_soup(rng, 20)
    mesh = TriangleMesh(V, F, mesh_id=7)
    write_obj(mesh, tmp_path / "m.obj")
    back = read_obj(tmp_path / "m.obj")
    assert back.mesh_id == 7
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)


def test_obj_polygon_fan(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n")
    m = read_obj(tmp_path / "q.obj")
    assert m.n_triangles == 2


def test_binary_roundtrip(tmp_path):
    mesh = box_mesh([0, 0, 0], [0.5, 1.0, 2.0])
    write_mesh_binary(mesh, tmp_path / "m.vxm")
    back = read_mesh_binary(tmp_path / "m.vxm")
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.triangles, mesh.triangles)
    (tmp_path / "bad.vxm").write_bytes(b"nope")
    with pytest.raises(GeometryError):
        read_mesh_binary(tmp_path / "bad.vxm")


quats = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1)


@given(quats)
def test_quaternion_matrix_roundtrip(q):
    R = quat_to_matrix(q)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)


@given(quats, st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_transform_inverse(q, t, p):
    T = RigidTransform.from_quaternion(q, t)
    assert np.allclose(T.apply_inverse(T.apply(p)), p, atol=1e-9)
    assert np.allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hit_point_lies_on_ray(seed):
    rng = np.random.default_rng(seed)
    V, F = random_soup(rng, 30)
    mesh = TriangleMesh(V, F, mesh_id=3)
    bvh = build_bvh(mesh)
    T = RigidTransform.random(rng, 1.0)
    o, d = random_rays(rng, 20)
    for i in range(20):
        ray = Ray(o[i], d[i])
        hit = raycast_world(bvh, mesh, T, ray)
        if hit is not None:
            assert 0 <= hit.t <= ray.t_max
            assert np.linalg.norm(hit.point - ray.at(hit.t)) < 1e-6
            assert hit.mesh_id == 3
