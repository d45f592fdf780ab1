import collections

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from crowngen.errors import NoSurface, TooFewPoints
from crowngen.meshops import (
    CurvatureField,
    Mesh,
    estimate_curvature,
    estimate_normals,
    extract_margin_line,
    load_obj,
    load_ply_mesh,
    marching_cubes,
    mesh_vertex_normals,
    save_obj,
    save_ply_mesh,
)
from crowngen.voxelgrid import GridSpec, PointCloud, VoxelVolume


def sphere_cloud(n, radius, seed=0, center=(0.0, 0.0, 0.0)):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    return PointCloud(np.asarray(center) + radius * v), v


def sphere_field(dims, spacing, center, radius):
    spec = GridSpec(dims, spacing, (0.0, 0.0, 0.0))
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    pos = (idx + 0.5) * spacing
    r = np.linalg.norm(pos - np.asarray(center), axis=-1)
    return VoxelVolume(spec, r - radius, kind="indicator")


class TestMesh:
    def test_face_index_validation(self):
        with pytest.raises(ValueError):
            Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 3]])

    def test_degenerate_face_rejected(self):
        with pytest.raises(ValueError):
            Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 1]])


class TestMarchingCubes:
    def test_constant_field_no_surface(self):
        spec = GridSpec((4, 4, 4), 1.0)
        with pytest.raises(NoSurface):
            marching_cubes(VoxelVolume(spec, np.ones((4, 4, 4)), kind="indicator"), 0.0)

    def test_sphere_vertices_on_surface(self):
        s = 0.15
        center = (4.8, 4.8, 4.8)
        vol = sphere_field((64, 64, 64), s, center, 3.0)
        mesh = marching_cubes(vol, 0.0)
        rad = np.linalg.norm(mesh.vertices - np.asarray(center), axis=1)
        assert np.abs(rad - 3.0).max() <= s

    def test_single_node_octahedron_euler(self):
        spec = GridSpec((5, 5, 5), 1.0)
        field = np.ones((5, 5, 5))
        field[2, 2, 2] = -1.0
        mesh = marching_cubes(VoxelVolume(spec, field, kind="indicator"), 0.0)
        edges, counts = mesh.edges_unique()
        assert (counts == 2).all()  # closed
        euler = mesh.n_vertices - edges.shape[0] + mesh.n_faces
        assert euler == 2
        assert (mesh.n_vertices, mesh.n_faces) == (6, 8)

    def test_negated_field_same_vertices(self):
        vol = sphere_field((24, 24, 24), 0.4, (4.8, 4.8, 4.8), 3.0)
        mesh_a = marching_cubes(vol, 0.0)
        neg = VoxelVolume(vol.spec, -vol.data, kind="indicator")
        mesh_b = marching_cubes(neg, -0.0)
        va = np.asarray(sorted(map(tuple, np.round(mesh_a.vertices, 9))))
        vb = np.asarray(sorted(map(tuple, np.round(mesh_b.vertices, 9))))
        assert va.shape == vb.shape
        assert np.abs(va - vb).max() <= 1e-6

    def test_orientation_outward_is_decreasing_field(self):
        # inside of the solid has field above iso; normals point to lower values
        center = np.array([4.8, 4.8, 4.8])
        vol = sphere_field((32, 32, 32), 0.3, center, 3.0)
        inside_high = VoxelVolume(vol.spec, -vol.data, kind="indicator")
        mesh = marching_cubes(inside_high, 0.0)
        normals = mesh_vertex_normals(mesh)
        radial = mesh.vertices - center
        radial /= np.linalg.norm(radial, axis=1)[:, None]
        dots = np.einsum("ij,ij->i", normals, radial)
        assert dots.mean() > 0.9

    def test_requires_indicator(self):
        spec = GridSpec((3, 3, 3), 1.0)
        with pytest.raises(ValueError):
            marching_cubes(VoxelVolume(spec, np.zeros((3, 3, 3)), kind="occupancy"), 0.0)


def brute_force_boundary_vertices(mesh: Mesh) -> np.ndarray:
    counter = collections.Counter()
    for a, b, c in mesh.faces:
        for e in ((a, b), (b, c), (c, a)):
            counter[tuple(sorted(e))] += 1
    ids = sorted({v for e, n in counter.items() if n == 1 for v in e})
    return np.asarray(ids, dtype=int)


def open_cylinder(n_seg=12, n_rows=4):
    verts, faces = [], []
    for i in range(n_rows):
        for j in range(n_seg):
            a = 2 * np.pi * j / n_seg
            verts.append((np.cos(a), np.sin(a), float(i)))
    for i in range(n_rows - 1):
        for j in range(n_seg):
            jn = (j + 1) % n_seg
            r0, r1 = i * n_seg, (i + 1) * n_seg
            faces.append((r0 + j, r0 + jn, r1 + jn))
            faces.append((r0 + j, r1 + jn, r1 + j))
    return Mesh(np.asarray(verts), np.asarray(faces))


def closed_cube():
    verts = np.array([
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ], dtype=float)
    faces = np.array([
        (0, 2, 1), (0, 3, 2), (4, 5, 6), (4, 6, 7),
        (0, 1, 5), (0, 5, 4), (1, 2, 6), (1, 6, 5),
        (2, 3, 7), (2, 7, 6), (3, 0, 4), (3, 4, 7),
    ])
    return Mesh(verts, faces)


class TestMarginLine:
    def test_closed_cube_empty(self):
        assert len(extract_margin_line(closed_cube())) == 0

    def test_single_triangle_three_points(self):
        mesh = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert len(extract_margin_line(mesh)) == 3

    def test_open_cylinder_two_rims(self):
        n_seg, n_rows = 12, 4
        mesh = open_cylinder(n_seg, n_rows)
        margin = extract_margin_line(mesh)
        assert len(margin) == 2 * n_seg
        zs = np.sort(np.unique(np.round(margin.points[:, 2], 9)))
        assert zs.tolist() == [0.0, float(n_rows - 1)]

    def test_invariant_under_face_and_vertex_permutation(self):
        mesh = open_cylinder()
        rng = np.random.default_rng(0)
        fperm = rng.permutation(mesh.n_faces)
        vperm = rng.permutation(mesh.n_vertices)
        inv = np.empty_like(vperm)
        inv[vperm] = np.arange(mesh.n_vertices)
        shuffled = Mesh(mesh.vertices[vperm], inv[mesh.faces[fperm]])
        a = np.asarray(sorted(map(tuple, extract_margin_line(mesh).points)))
        b = np.asarray(sorted(map(tuple, extract_margin_line(shuffled).points)))
        assert np.allclose(a, b)

    def test_matches_brute_force_on_random_meshes(self):
        rng = np.random.default_rng(7)
        for trial in range(10):
            n_v = int(rng.integers(8, 30))
            verts = rng.normal(size=(n_v, 3))
            faces = []
            for _ in range(int(rng.integers(6, 40))):
                f = rng.choice(n_v, 3, replace=False)
                faces.append(f)
            mesh = Mesh(verts, np.asarray(faces))
            expected = brute_force_boundary_vertices(mesh)
            got = extract_margin_line(mesh).points
            assert np.array_equal(got, verts[expected])


class TestCurvature:
    def test_plane_flat(self):
        rng = np.random.default_rng(0)
        xy = rng.uniform(-5, 5, (2000, 2))
        cloud = PointCloud(np.column_stack([xy, np.zeros(2000)]))
        field = estimate_curvature(cloud, 16)
        assert field.kappa.max() <= 0.05

    def test_sphere_analytic(self):
        cloud, _ = sphere_cloud(3000, 2.0, seed=1)
        field = estimate_curvature(cloud, 16)
        frac = np.mean(np.abs(field.kappa - 0.5) <= 0.1)
        assert frac >= 0.9

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            estimate_curvature(PointCloud(np.random.default_rng(0).normal(size=(10, 3))), 16)

    def test_rigid_invariance(self):
        cloud, _ = sphere_cloud(800, 2.0, seed=2)
        rot = Rotation.from_euler("xyz", [0.4, -1.0, 2.2]).as_matrix()
        moved = cloud.transformed(rot, [3.0, -1.0, 7.0])
        a = estimate_curvature(cloud, 12).kappa
        b = estimate_curvature(moved, 12).kappa
        assert np.abs(a - b).max() <= 1e-3

    def test_clamped_to_kappa_max(self):
        # needle-sharp corner: raw curvature far above the clamp
        rng = np.random.default_rng(3)
        t = rng.uniform(-1, 1, 400)
        pts = np.column_stack([t, np.abs(t) * 5.0, rng.uniform(-1, 1, 400)])
        field = estimate_curvature(PointCloud(pts), 16, kappa_max=3.0)
        assert field.kappa.max() <= 3.0

    def test_field_validation(self):
        with pytest.raises(ValueError):
            CurvatureField(np.array([-0.1]), 16)
        with pytest.raises(ValueError):
            CurvatureField(np.array([3.5]), 16, kappa_max=3.0)


class TestNormals:
    def test_plane_normals(self):
        rng = np.random.default_rng(0)
        xy = rng.uniform(-5, 5, (1500, 2))
        cloud = PointCloud(np.column_stack([xy, np.zeros(1500)]))
        out = estimate_normals(cloud, 16)
        cos = np.abs(out.normals[:, 2])
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))).max() <= 5.0

    def test_sphere_radial(self):
        cloud, radial = sphere_cloud(2500, 2.0, seed=4)
        out = estimate_normals(cloud, 16)
        ang = np.degrees(np.arccos(np.clip(np.einsum("ij,ij->i", out.normals, radial), -1, 1)))
        assert np.mean(ang <= 15.0) >= 0.95

    def test_colinear_points_never_nan(self):
        t = np.linspace(0, 1, 40)
        cloud = PointCloud(np.column_stack([t, 2 * t, -t]))
        out = estimate_normals(cloud, 8)
        assert np.all(np.isfinite(out.normals))
        assert np.allclose(np.linalg.norm(out.normals, axis=1), 1.0)


class TestMeshIO:
    def test_obj_round_trip(self, tmp_path):
        mesh = open_cylinder()
        path = tmp_path / "m.obj"
        save_obj(path, mesh)
        back = load_obj(path)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.faces, mesh.faces)

    def test_ply_round_trip(self, tmp_path):
        mesh = closed_cube()
        path = tmp_path / "m.ply"
        save_ply_mesh(path, mesh)
        back = load_ply_mesh(path)
        assert np.array_equal(back.vertices, mesh.vertices.astype(np.float32))
        assert np.array_equal(back.faces, mesh.faces)
