import numpy as np
import pytest
from errors import MeshError
from mesh_core import (
    Mesh,
    UVDisplacementMap,
    apply_displacement,
    compute_vertex_normals,
    mesh_edges,
    read_obj,
    read_uv_map,
    sample_uv_map,
    vertex_adjacency,
    write_obj,
    write_uv_map,
)

from tests.test_data.meshes import plane_grid, random_rotation, unit_triangle


@pytest.mark.unit
class TestMesh:
    """Mesh construction checks"""

    def test_rejects_out_of_range_index(self):
        """A triangle pointing past the vertex list names the triangle"""
        with pytest.raises(MeshError, match="triangle 1"):
            Mesh(vertices=np.zeros((3, 3)), triangles=[[0, 1, 2], [0, 1, 3]])

    def test_rejects_uv_of_wrong_length(self):
        with pytest.raises(MeshError, match="uv"):
            Mesh(vertices=np.zeros((3, 3)), triangles=[[0, 1, 2]], uv=np.zeros((2, 2)))

    def test_arrays_are_read_only(self, triangle):
        """Meshes are immutable after construction"""
        with pytest.raises(ValueError):
            triangle.vertices[0, 0] = 5.0

    def test_with_vertices_keeps_topology(self, triangle):
        moved = triangle.with_vertices(triangle.vertices + 1.0)
        assert moved.same_topology(triangle)
        assert np.array_equal(moved.triangles, triangle.triangles)


@pytest.mark.unit
class TestComputeVertexNormals:
    """Area-weighted vertex normals"""

    def test_planar_triangle(self):
        """Counter-clockwise triangle in the xy plane points to +z"""
        normals = compute_vertex_normals(unit_triangle()).normals
        assert np.allclose(normals, [[0.0, 0.0, 1.0]] * 3)

    def test_reversed_winding(self):
        normals = compute_vertex_normals(unit_triangle(reverse=True)).normals
        assert np.allclose(normals, [[0.0, 0.0, -1.0]] * 3)

    def test_sphere_normals_are_radial(self, sphere):
        """Icosphere normals lie within 2 degrees of the radial direction"""
        normals = compute_vertex_normals(sphere).normals
        radial = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
        cosines = np.clip(np.sum(normals * radial, axis=1), -1.0, 1.0)
        assert np.degrees(np.arccos(cosines)).max() < 2.0

    def test_unit_length(self, sphere):
        normals = compute_vertex_normals(sphere).normals
        assert np.allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9)
        assert len(normals) == sphere.vertex_count

    def test_rotation_equivariance(self, sphere, rng):
        """normals(R mesh) = R normals(mesh)"""
        for _ in range(5):
            R = random_rotation(rng)
            rotated = sphere.with_vertices(sphere.vertices @ R.T)
            expected = compute_vertex_normals(sphere).normals @ R.T
            assert np.allclose(compute_vertex_normals(rotated).normals, expected, atol=1e-9)

    def test_isolated_vertex_raises_with_index(self):
        mesh = Mesh(vertices=np.vstack([unit_triangle().vertices, [5.0, 5.0, 5.0]]), triangles=[[0, 1, 2]])
        with pytest.raises(MeshError, match="vertex 3"):
            compute_vertex_normals(mesh)

    def test_isolated_vertex_allowed_for_scans(self):
        mesh = Mesh(vertices=np.vstack([unit_triangle().vertices, [5.0, 5.0, 5.0]]), triangles=[[0, 1, 2]])
        normals = compute_vertex_normals(mesh, allow_isolated=True).normals
        assert np.array_equal(normals[3], np.zeros(3))

    def test_degenerate_triangle_is_skipped(self):
        """A zero-area sliver does not disturb its neighbours"""
        vertices = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [2.0, 0.0, 0.0]]
        mesh = Mesh(vertices=vertices, triangles=[[0, 1, 2], [0, 1, 3], [1, 3, 2]])
        normals = compute_vertex_normals(mesh).normals
        assert np.allclose(normals[0], [0.0, 0.0, 1.0])

    def test_no_triangles(self):
        with pytest.raises(MeshError, match="no triangles"):
            compute_vertex_normals(Mesh(vertices=np.zeros((3, 3)), triangles=np.zeros((0, 3))))


@pytest.mark.unit
class TestSampleUvMap:
    """Bilinear UV lookup"""

    def test_zero_map(self, rng):
        uv_map = UVDisplacementMap.zeros(4, 5)
        assert np.array_equal(sample_uv_map(uv_map, rng.uniform(size=(10, 2))), np.zeros((10, 3)))

    def test_constant_map(self, rng):
        uv_map = UVDisplacementMap(np.tile([1.5, -2.0, 3.0], (6, 7, 1)))
        assert np.allclose(sample_uv_map(uv_map, rng.uniform(size=(10, 2))), [1.5, -2.0, 3.0])

    def test_hand_computed_bilinear(self):
        grid = np.array([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]])
        assert np.allclose(sample_uv_map(UVDisplacementMap(grid), [0.5, 0.5]), [0.5, 0.5, 0.0])

    def test_upper_bound_clamps_to_last_cell(self):
        grid = np.arange(2 * 3 * 3, dtype=np.float64).reshape(2, 3, 3)
        assert np.allclose(sample_uv_map(UVDisplacementMap(grid), [1.0, 1.0]), grid[1, 2])

    @pytest.mark.parametrize("uv", [[-0.01, 0.5], [0.5, 1.01], [np.nan, 0.2]])
    def test_outside_unit_square(self, uv):
        with pytest.raises(MeshError):
            sample_uv_map(UVDisplacementMap.zeros(3, 3), uv)

    def test_lipschitz_continuity(self, rng):
        """Moving uv by eps moves the output by at most L eps"""
        height, width = 8, 9
        grid = rng.normal(size=(height, width, 3))
        uv_map = UVDisplacementMap(grid)
        slope_y = np.abs(np.diff(grid, axis=0)).max() * (height - 1)
        slope = max(slope_y, np.abs(np.diff(grid, axis=1)).max() * (width - 1))
        lipschitz = float(np.sqrt(3.0) * np.sqrt(2.0) * slope)
        uv = rng.uniform(0.05, 0.95, size=(50, 2))
        delta = rng.normal(size=(50, 2))
        delta *= 1e-4 / np.linalg.norm(delta, axis=1, keepdims=True)
        moved = np.linalg.norm(sample_uv_map(uv_map, uv + delta) - sample_uv_map(uv_map, uv), axis=1)
        assert np.all(moved <= lipschitz * 1e-4 + 1e-12)


@pytest.mark.unit
class TestApplyDisplacement:
    def test_zero_map_is_identity(self, template_mesh):
        out = apply_displacement(template_mesh, UVDisplacementMap.zeros(8, 8))
        assert np.array_equal(out.vertices, template_mesh.vertices)

    def test_constant_z_shift(self, template_mesh):
        out = apply_displacement(template_mesh, UVDisplacementMap(np.tile([0.0, 0.0, 5.0], (4, 4, 1))))
        assert np.allclose(out.vertices - template_mesh.vertices, [0.0, 0.0, 5.0])

    def test_recovers_sampled_displacements(self, template_mesh, rng):
        uv_map = UVDisplacementMap(rng.normal(size=(16, 16, 3)))
        out = apply_displacement(template_mesh, uv_map)
        assert np.allclose(out.vertices - template_mesh.vertices, sample_uv_map(uv_map, template_mesh.uv))

    def test_triangles_preserved_bit_exactly(self, template_mesh, rng):
        out = apply_displacement(template_mesh, UVDisplacementMap(rng.normal(size=(5, 5, 3))))
        assert np.array_equal(out.triangles, template_mesh.triangles)

    def test_missing_uv(self, triangle):
        with pytest.raises(MeshError, match="UV"):
            apply_displacement(triangle, UVDisplacementMap.zeros(2, 2))


@pytest.mark.unit
class TestTopologyHelpers:
    def test_grid_edges(self):
        """A 2x2 quad split once has 5 unique edges"""
        edges = mesh_edges(plane_grid(2, 2).triangles)
        assert len(edges) == 5
        assert np.all(edges[:, 0] < edges[:, 1])

    def test_adjacency_is_symmetric(self, sphere):
        adjacency = vertex_adjacency(sphere)
        assert (adjacency != adjacency.T).nnz == 0
        assert np.all(np.asarray(adjacency.sum(axis=1)).ravel() >= 5)


@pytest.mark.unit
class TestMeshFiles:
    """OBJ and UVDM containers"""

    def test_obj_keeps_positions_uv_and_colors(self, template_mesh, tmp_path):
        path = tmp_path / "template.obj"
        write_obj(template_mesh, path)
        loaded = read_obj(path)
        assert np.array_equal(loaded.vertices, template_mesh.vertices)
        assert np.array_equal(loaded.triangles, template_mesh.triangles)
        assert np.allclose(loaded.uv, template_mesh.uv)
        assert np.allclose(loaded.colors, template_mesh.colors, atol=1e-8)

    def test_obj_face_forms_and_polygons(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\nvn 0 0 1\n"
            "f 1/1/1 2/2/1 3/3/1 4/4/1\n",
            encoding="utf-8",
        )
        mesh = read_obj(path)
        assert mesh.triangle_count == 2
        assert np.allclose(mesh.uv, [[0, 0], [1, 0], [1, 1], [0, 1]])

    def test_obj_bad_record(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 zero\n", encoding="utf-8")
        with pytest.raises(MeshError, match=":1:"):
            read_obj(path)

    def test_uv_map_container(self, tmp_path, rng):
        uv_map = UVDisplacementMap(rng.normal(size=(3, 4, 3)).astype(np.float32))
        path = tmp_path / "delta.uvdm"
        write_uv_map(uv_map, path)
        payload = path.read_bytes()
        assert payload[:4] == b"UVDM"
        assert len(payload) == 12 + 3 * 4 * 3 * 4
        assert np.array_equal(read_uv_map(path).grid, uv_map.grid)

    def test_uv_map_bad_magic(self, tmp_path):
        path = tmp_path / "bad.uvdm"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(MeshError, match="magic"):
            read_uv_map(path)
