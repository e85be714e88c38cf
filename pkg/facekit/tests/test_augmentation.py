import numpy as np
import pytest
from augmentation import (
    AnchorGraph,
    TextureParams,
    adjust_shading,
    anchor_depth_energy,
    anchor_depths,
    anchor_warp_energy,
    build_anchor_graph,
    complete_depth,
    deshade_colors,
    fit_texture,
    fit_texture_colors,
    fuse_target_shape,
    pose_schedule,
    poisson_blend,
    rotate_and_render,
    solve_anchor_depths,
    transform_shape,
    warp_background_anchors,
)
from errors import AugmentationError
from mesh_core import compute_vertex_normals, mesh_edges, vertex_adjacency
from morphable_model import (
    REGION_NAMES,
    CameraPose,
    ShapeParams,
    evaluate_shape,
    evaluate_texture,
    pose_about,
    rigid_project,
    view_rotation,
)
from rasterizer import PhongParams, phong_shade, phong_shade_normals, rasterize
from registration import RGBDFrame
from scipy.ndimage import binary_erosion
from scipy.sparse.csgraph import dijkstra

from tests.test_data.meshes import plane_grid


def _grid_graph(n: int, depth=None, valid=None, contour: int = 0, spacing: float = 16.0) -> AnchorGraph:
    grid = plane_grid(n, n, spacing)
    count = n * n
    return AnchorGraph(
        positions=grid.vertices[:, :2],
        depth=np.full(count, 50.0) if depth is None else depth,
        valid=np.ones(count, dtype=bool) if valid is None else valid,
        edges=mesh_edges(grid.triangles),
        triangles=grid.triangles,
        contour_vertices=np.arange(contour),
    )


def _incidence(graph: AnchorGraph) -> np.ndarray:
    incidence = np.zeros((len(graph.edges), len(graph)))
    rows = np.arange(len(graph.edges))
    incidence[rows, graph.edges[:, 0]] = 1.0
    incidence[rows, graph.edges[:, 1]] = -1.0
    return incidence


def _dense_depths(graph: AnchorGraph, data_weight: float, smooth_weight: float) -> np.ndarray:
    """Least squares over the stacked data and edge rows"""
    data = np.eye(len(graph))[graph.valid]
    design = np.vstack([np.sqrt(data_weight) * data, np.sqrt(smooth_weight) * _incidence(graph)])
    rhs = np.concatenate([np.sqrt(data_weight) * graph.depth[graph.valid], np.zeros(len(graph.edges))])
    return np.linalg.lstsq(design, rhs, rcond=None)[0]


def _dense_poisson(target: np.ndarray, source: np.ndarray, mask: np.ndarray) -> np.ndarray:
    pixels = list(zip(*np.nonzero(mask)))
    index = {p: k for k, p in enumerate(pixels)}
    system = np.zeros((len(pixels), len(pixels)))
    rhs = np.zeros((len(pixels), target.shape[2]))
    for k, (r, c) in enumerate(pixels):
        system[k, k] = 4.0
        for q in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            rhs[k] += source[r, c] - source[q]
            if q in index:
                system[k, index[q]] -= 1.0
            else:
                rhs[k] += target[q]
    out = target.copy()
    out[mask] = np.linalg.solve(system, rhs)
    return out


@pytest.fixture(scope="module")
def fitted(posed_face):
    shape, pose = posed_face
    return rigid_project(shape, pose)


@pytest.fixture(scope="module")
def dense_depth(face_frame, fitted):
    return complete_depth(face_frame, fitted)


@pytest.fixture(scope="module")
def mean_texture_fit(small_model):
    """What a perfect texture fit of face_frame returns"""
    return TextureParams(np.zeros(small_model.tex_dims), PhongParams.frontal())


@pytest.mark.unit
class TestPoseSchedule:
    def test_default_schedule(self):
        assert pose_schedule() == [(0.0, 15.0), (0.0, 30.0), (0.0, 45.0), (0.0, 50.0), (15.0, 0.0), (-25.0, 0.0)]

    def test_custom_angles(self):
        assert pose_schedule([20], []) == [(0.0, 20.0)]


@pytest.mark.unit
class TestAnchorGraph:
    def test_edge_out_of_range(self):
        with pytest.raises(AugmentationError, match="reference node"):
            AnchorGraph(positions=np.zeros((3, 2)), depth=np.zeros(3), valid=np.ones(3), edges=[[0, 3]], triangles=[])

    def test_length_mismatch(self):
        with pytest.raises(AugmentationError, match="3 positions"):
            AnchorGraph(positions=np.zeros((3, 2)), depth=np.zeros(2), valid=np.ones(3), edges=[], triangles=[])

    def test_empty_graph(self):
        graph = AnchorGraph(positions=np.zeros((0, 2)), depth=[], valid=[], edges=[], triangles=[])
        with pytest.raises(AugmentationError, match="empty"):
            graph.check_connected()

    def test_disconnected(self):
        graph = AnchorGraph(positions=np.zeros((4, 2)), depth=np.ones(4), valid=np.ones(4), edges=[[0, 1], [2, 3]],
                            triangles=[])  # fmt: skip
        with pytest.raises(AugmentationError, match="2 disconnected components"):
            graph.check_connected()

    def test_contour_mask_marks_leading_nodes(self):
        graph = _grid_graph(3, contour=2)
        assert graph.contour.tolist() == [True, True] + [False] * 7

    def test_built_from_frame(self, face_frame, fitted):
        """Hull nodes sit on their face vertices; anchors in the hollow corner carry no depth"""
        graph = build_anchor_graph(face_frame, fitted, 16)
        count = len(graph.contour_vertices)
        assert count > 0
        assert np.allclose(graph.positions[:count], fitted.vertices[graph.contour_vertices, :2])
        assert np.allclose(graph.depth[:count], fitted.vertices[graph.contour_vertices, 2])
        anchors = graph.positions[count:]
        corner = (anchors[:, 0] < 32) & (anchors[:, 1] < 32)
        assert corner.any()
        assert not graph.valid[count:][corner].any()
        assert np.all(graph.depth[count:][~corner & graph.valid[count:]] == 40.0)


@pytest.mark.unit
class TestSolveAnchorDepths:
    """Depth completion energy on anchor graphs"""

    def test_constant_depth_is_reproduced(self):
        depths = solve_anchor_depths(_grid_graph(5, depth=np.full(25, 37.5)))
        assert np.allclose(depths, 37.5, atol=1e-9)

    def test_hollow_anchor_takes_neighbour_depth(self):
        valid = np.ones(9, dtype=bool)
        valid[4] = False
        depth = np.where(valid, 10.0, 0.0)
        depths = solve_anchor_depths(_grid_graph(3, depth=depth, valid=valid))
        assert depths[4] == pytest.approx(10.0, abs=1e-9)

    @pytest.mark.parametrize("smooth_weight", [0.3, 1.0, 4.0])
    def test_matches_dense_solve(self, rng, smooth_weight):
        """Random 8 x 8 grid with 30% hollow anchors"""
        valid = rng.uniform(size=64) >= 0.3
        valid[0] = True
        graph = _grid_graph(8, depth=np.where(valid, rng.uniform(50.0, 150.0, size=64), 0.0), valid=valid)
        depths = solve_anchor_depths(graph, 1.0, smooth_weight)
        assert np.allclose(depths, _dense_depths(graph, 1.0, smooth_weight), atol=1e-8)

    def test_first_order_optimality(self, rng):
        valid = rng.uniform(size=100) >= 0.3
        valid[0] = True
        graph = _grid_graph(10, depth=np.where(valid, rng.uniform(50.0, 150.0, size=100), 0.0), valid=valid)
        depths = solve_anchor_depths(graph, 2.0, 0.5)
        gradient = 4.0 * graph.valid * (depths - graph.depth) + 1.0 * (graph.laplacian() @ depths)
        assert np.abs(gradient).max() < 1e-6

    def test_solution_minimizes_energy(self, rng):
        graph = _grid_graph(6, depth=rng.uniform(50.0, 60.0, size=36))
        depths = solve_anchor_depths(graph)
        best = anchor_depth_energy(graph, depths)
        for _ in range(5):
            assert anchor_depth_energy(graph, depths + 0.01 * rng.normal(size=36)) > best

    def test_no_observed_depth(self):
        with pytest.raises(AugmentationError, match="no anchor carries observed depth"):
            solve_anchor_depths(_grid_graph(3, valid=np.zeros(9, dtype=bool)))

    def test_disconnected_graph(self):
        graph = AnchorGraph(positions=np.zeros((4, 2)), depth=np.ones(4), valid=np.ones(4), edges=[[0, 1], [2, 3]],
                            triangles=[])  # fmt: skip
        with pytest.raises(AugmentationError, match="disconnected"):
            solve_anchor_depths(graph)


@pytest.mark.integration
class TestCompleteDepth:
    def test_covers_every_pixel(self, dense_depth):
        assert dense_depth.shape == (128, 128)
        assert np.all(np.isfinite(dense_depth))

    def test_face_region_keeps_face_depth(self, dense_depth, fitted):
        face = rasterize(fitted, CameraPose.identity(), np.zeros((fitted.vertex_count, 3)), 128, 128)
        assert np.array_equal(dense_depth[face.foreground], face.depth[face.foreground])

    def test_background_between_wall_and_face(self, dense_depth, fitted):
        """Every completed depth lies between the wall and the nearest face point"""
        assert dense_depth.min() >= 40.0 - 1e-6
        assert dense_depth.max() <= fitted.vertices[:, 2].max() + 1e-6
        assert dense_depth[2, 2] < fitted.vertices[:, 2].mean()

    def test_profiling_mode(self, face_frame, fitted):
        graph = build_anchor_graph(face_frame, fitted, 16)
        depths = anchor_depths(graph, fitted, "profiling")
        assert np.array_equal(depths[graph.contour], graph.depth[graph.contour])
        assert np.allclose(depths[~graph.contour], fitted.vertices[:, 2].mean())
        dense = complete_depth(face_frame, fitted, mode="profiling", graph=graph)
        assert np.all(np.isfinite(dense))

    def test_unknown_mode(self, face_frame, fitted):
        with pytest.raises(AugmentationError, match="unknown depth completion mode"):
            complete_depth(face_frame, fitted, mode="inpaint")


@pytest.mark.unit
class TestWarpBackgroundAnchors:
    """Contour pinning with preserved neighbour offsets"""

    def test_unchanged_contour_leaves_anchors(self):
        graph = _grid_graph(10, contour=10)
        contour = graph.positions[:10]
        warped = warp_background_anchors(graph, contour, contour)
        assert np.allclose(warped.positions, graph.positions, atol=1e-9)

    def test_translation_moves_every_anchor(self):
        graph = _grid_graph(10, contour=10)
        contour = graph.positions[:10]
        warped = warp_background_anchors(graph, contour, contour + [5.0, 0.0])
        assert np.allclose(warped.positions - graph.positions, [5.0, 0.0], atol=1e-9)

    def test_matches_dense_solve(self, rng):
        weight = 2.5
        graph = _grid_graph(10, contour=10)
        source = graph.positions[:10]
        target = source + rng.normal(scale=3.0, size=(10, 2))
        warped = warp_background_anchors(graph, source, target, weight)

        incidence = _incidence(graph)
        design = np.vstack([np.sqrt(weight) * np.eye(100)[:10], incidence])
        rhs = np.vstack([np.sqrt(weight) * target, incidence @ graph.positions])
        expected = np.linalg.lstsq(design, rhs, rcond=None)[0]
        assert np.allclose(warped.positions, expected, atol=1e-8)

    def test_first_order_optimality(self, rng):
        graph = _grid_graph(10, contour=10)
        source = graph.positions[:10]
        target = source + rng.normal(scale=3.0, size=(10, 2))
        positions = warp_background_anchors(graph, source, target).positions
        gradient = 2.0 * (graph.laplacian() @ (positions - graph.positions))
        gradient[:10] += 2.0 * (positions[:10] - target)
        assert np.abs(gradient).max() < 1e-6
        energy = anchor_warp_energy(graph, positions, source, target)
        assert energy < anchor_warp_energy(graph, positions + 0.01 * rng.normal(size=positions.shape), source, target)

    def test_depth_and_topology_carried_over(self):
        graph = _grid_graph(4, contour=4)
        warped = warp_background_anchors(graph, graph.positions[:4], graph.positions[:4] + 1.0)
        assert np.array_equal(warped.edges, graph.edges)
        assert np.array_equal(warped.depth, graph.depth)

    def test_mismatched_contours(self):
        graph = _grid_graph(4, contour=4)
        with pytest.raises(AugmentationError, match="4 source and 3 target"):
            warp_background_anchors(graph, np.zeros((4, 2)), np.zeros((3, 2)))
        with pytest.raises(AugmentationError, match="contour nodes"):
            warp_background_anchors(graph, np.zeros((3, 2)), np.zeros((3, 2)))

    def test_no_contour_nodes(self):
        with pytest.raises(AugmentationError, match="no contour nodes"):
            warp_background_anchors(_grid_graph(4), np.zeros((0, 2)), np.zeros((0, 2)))


@pytest.mark.unit
class TestFitTextureColors:
    """Analysis-by-synthesis texture fit on vertex colors"""

    @pytest.fixture(scope="class")
    def front(self, small_model):
        normals = compute_vertex_normals(small_model.template()).normals
        ids = np.flatnonzero(normals[:, 2] > 0.3)
        return ids, normals[ids]

    def test_recovers_synthesized_texture(self, small_model, front):
        ids, normals = front
        beta = 0.5 * np.random.default_rng(3).normal(size=small_model.tex_dims)
        lighting = PhongParams(0.3 * np.eye(3), 0.7 * np.eye(3), [0.0, 0.0, 1.0], 0.0, [0.0, 0.0, 1.0], 8.0)
        albedo = evaluate_texture(small_model, beta)[ids]
        colors = phong_shade_normals(normals, albedo, lighting)
        fit = fit_texture_colors(colors, normals, small_model, ids, iters=60)
        assert np.linalg.norm(fit.beta - beta) <= 1e-3 * np.linalg.norm(beta)
        assert fit.residual < 1e-4

    def test_mean_texture_under_ambient_light(self, small_model, front):
        """Dir = 0 and the mean texture: nothing for beta to explain"""
        ids, normals = front
        colors = small_model.mean_texture.reshape(-1, 3)[ids]
        fit = fit_texture_colors(colors, normals, small_model, ids)
        assert np.linalg.norm(fit.beta) < 1e-2
        assert fit.residual < 1e-6

    def test_residual_trace_non_increasing(self, small_model, front):
        ids, normals = front
        rng = np.random.default_rng(5)
        colors = np.clip(small_model.mean_texture.reshape(-1, 3)[ids] + 0.02 * rng.normal(size=(len(ids), 3)), 0, 1)
        fit = fit_texture_colors(colors, normals, small_model, ids, iters=10)
        assert np.all(np.diff(fit.residual_trace) <= 0.0)
        assert fit.residual == fit.residual_trace[-1]

    def test_too_few_vertices(self, small_model):
        with pytest.raises(AugmentationError, match="cannot determine"):
            fit_texture_colors(np.zeros((2, 3)), np.tile([0.0, 0.0, 1.0], (2, 1)), small_model, [0, 1])

    def test_length_mismatch(self, small_model):
        with pytest.raises(AugmentationError, match="colors"):
            fit_texture_colors(np.zeros((5, 3)), np.zeros((4, 3)), small_model, np.arange(5))


@pytest.mark.integration
class TestFitTexture:
    def test_fits_rendered_frame(self, face_frame, fitted, small_model):
        """face_frame shows the mean texture under a frontal light"""
        fit = fit_texture(face_frame.color, fitted, small_model, iters=10)
        assert fit.residual < 5e-3
        assert np.all(np.diff(fit.residual_trace) <= 0.0)
        assert np.all(np.isfinite(fit.beta))

    def test_mesh_outside_image(self, face_frame, fitted, small_model):
        shifted = fitted.with_vertices(fitted.vertices + [200.0, 0.0, 0.0])
        with pytest.raises(AugmentationError, match="does not project inside"):
            fit_texture(face_frame.color, shifted, small_model)

    def test_wrong_vertex_count(self, face_frame, small_model):
        with pytest.raises(AugmentationError, match="vertices"):
            fit_texture(face_frame.color, plane_grid(3, 3), small_model)


@pytest.mark.unit
class TestAdjustShading:
    """Re-lighting vertex colors for a new shape"""

    @pytest.fixture
    def setup(self, small_model):
        shape = small_model.template()
        albedo = np.clip(small_model.mean_texture.reshape(-1, 3), 0.0, 1.0)
        return shape, albedo

    def test_deshade_inverts_phong(self, rng):
        normals = rng.normal(size=(20, 3))
        normals[:, 2] = np.abs(normals[:, 2]) + 0.5
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        albedo = rng.uniform(0.1, 0.9, size=(20, 3))
        lighting = PhongParams.frontal()
        colors = phong_shade_normals(normals, albedo, lighting)
        assert np.allclose(deshade_colors(colors, normals, lighting), albedo, atol=1e-12)

    def test_same_shape_reproduces_source_shading(self, setup, small_model):
        shape, albedo = setup
        tex = TextureParams(np.zeros(small_model.tex_dims), PhongParams.frontal())
        colors = phong_shade(shape, albedo, tex.phong)
        assert np.allclose(adjust_shading(colors, shape, shape, tex), colors, atol=1e-12)

    def test_ambient_light_ignores_target_shape(self, setup, small_model, rng):
        shape, albedo = setup
        ambient = PhongParams(0.7 * np.eye(3), np.zeros((3, 3)), [0.0, 0.0, 1.0], 0.0, [0.0, 0.0, 1.0], 8.0)
        tex = TextureParams(np.zeros(small_model.tex_dims), ambient)
        colors = phong_shade(shape, albedo, ambient)
        other = shape.with_vertices(shape.vertices + rng.normal(scale=2.0, size=shape.vertices.shape))
        assert np.allclose(adjust_shading(colors, shape, other, tex), colors, atol=1e-12)

    def test_tilting_away_from_light_darkens(self):
        flat = plane_grid(4, 4, 10.0)
        R = view_rotation(0.0, 30.0)
        tilted = flat.with_vertices(flat.vertices @ R.T)
        lighting = PhongParams(0.2 * np.eye(3), np.eye(3), [0.0, 0.0, 1.0], 0.0, [0.0, 0.0, 1.0], 8.0)
        tex = TextureParams(np.zeros(1), lighting)
        colors = phong_shade(flat, np.full((16, 3), 0.5), lighting)
        adjusted = adjust_shading(colors, flat, tilted, tex)
        assert np.all(adjusted < colors)
        assert np.allclose(adjusted, 0.5 * (0.2 + np.cos(np.radians(30.0))))

    @pytest.mark.parametrize("yaw", [30.0, 120.0])
    def test_unlit_source_keeps_image_colors(self, yaw):
        """No ambient light and a light behind the plane: nothing to deshade, so the colors stay"""
        flat = plane_grid(4, 4, 10.0)
        R = view_rotation(0.0, yaw)
        tilted = flat.with_vertices(flat.vertices @ R.T)
        behind = PhongParams(np.zeros((3, 3)), np.eye(3), [0.0, 0.0, -1.0], 0.0, [0.0, 0.0, 1.0], 8.0)
        colors = np.tile([0.6, 0.4, 0.3], (16, 1))
        adjusted = adjust_shading(colors, flat, tilted, TextureParams(np.zeros(1), behind))
        assert np.array_equal(adjusted, colors)

    def test_linear_in_texture_without_specular(self, setup, small_model, rng):
        shape, albedo = setup
        tex = TextureParams(np.zeros(small_model.tex_dims), PhongParams.frontal())
        colors = phong_shade(shape, albedo, tex.phong)
        other = shape.with_vertices(shape.vertices + rng.normal(scale=1.0, size=shape.vertices.shape))
        full = adjust_shading(colors, shape, other, tex)
        assert np.allclose(adjust_shading(0.5 * colors, shape, other, tex), 0.5 * full, atol=1e-12)

    def test_topology_mismatch(self, setup, small_model):
        shape, albedo = setup
        tex = TextureParams(np.zeros(small_model.tex_dims), PhongParams.frontal())
        with pytest.raises(AugmentationError, match="do not share a topology"):
            adjust_shading(albedo, shape, plane_grid(3, 3), tex)


@pytest.mark.unit
class TestPoissonBlend:
    """Seamless cloning inside a mask"""

    @pytest.fixture
    def images(self, rng):
        rows, cols = np.mgrid[0:20, 0:20] / 19.0
        noise = 0.01 * rng.normal(size=(2, 20, 20, 3))
        target = np.stack([np.sin(2 * rows), np.cos(3 * cols), rows * cols], axis=2) + noise[0]
        source = np.stack([cols**2, np.sin(rows + cols), 1 - rows], axis=2) + noise[1]
        mask = np.zeros((20, 20), dtype=bool)
        mask[2:18, 2:18] = True
        return target, source, mask

    def test_source_equal_to_target(self, images):
        target, _, mask = images
        assert np.allclose(poisson_blend(target, target, mask), target, atol=1e-10)

    def test_constant_images(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[3:7, 2:8] = True
        out = poisson_blend(np.full((10, 10, 3), 0.25), np.full((10, 10, 3), 0.9), mask)
        assert np.allclose(out, 0.25, atol=1e-12)

    def test_matches_dense_solve(self, images):
        target, source, mask = images
        assert np.allclose(poisson_blend(target, source, mask), _dense_poisson(target, source, mask), atol=1e-6)

    def test_outside_mask_untouched(self, images):
        target, source, mask = images
        out = poisson_blend(target, source, mask)
        assert np.array_equal(out[~mask], target[~mask])

    def test_gray_images(self, images):
        target, source, mask = images
        out = poisson_blend(target[..., 0], source[..., 0], mask)
        assert out.shape == (20, 20)
        assert np.allclose(out, poisson_blend(target, source, mask)[..., 0])

    def test_empty_mask_returns_copy(self, images):
        target, source, _ = images
        out = poisson_blend(target, source, np.zeros((20, 20), dtype=bool))
        assert np.array_equal(out, target)
        assert out is not target

    def test_mask_on_border(self, images):
        target, source, mask = images
        mask = mask.copy()
        mask[0, 5] = True
        with pytest.raises(AugmentationError, match="border"):
            poisson_blend(target, source, mask)

    def test_shape_mismatch(self, images):
        target, source, mask = images
        with pytest.raises(AugmentationError, match="disagree"):
            poisson_blend(target, source[:10], mask)


@pytest.mark.integration
class TestRotateAndRender:
    """Lifting a frame with its completed depth and rendering it from a new pose"""

    def test_identity_pose_reproduces_frame(self, face_frame, fitted, dense_depth, mean_texture_fit, small_model):
        view = rotate_and_render(face_frame, fitted, dense_depth, CameraPose.identity(), mean_texture_fit, small_model)
        assert np.mean(np.abs(view.image - face_frame.color)) < 2.0 / 255.0
        kept = ~view.filled
        assert np.allclose(view.depth[kept], dense_depth[kept], atol=1e-6)

    def test_yaw_round_trip(self, face_frame, fitted, dense_depth, mean_texture_fit, small_model):
        center = fitted.vertices.mean(axis=0)
        pose = pose_about(center, view_rotation(0.0, 15.0))
        there = rotate_and_render(face_frame, fitted, dense_depth, pose, mean_texture_fit, small_model)
        rotated = RGBDFrame(color=there.image, depth=there.depth, valid=np.ones((128, 128), dtype=bool))
        back = rotate_and_render(
            rotated, rigid_project(fitted, pose), there.depth, pose.inverse(), mean_texture_fit, small_model
        )

        normals = compute_vertex_normals(fitted).normals
        buffer = rasterize(fitted, CameraPose.identity(), np.zeros((fitted.vertex_count, 3)), 128, 128)
        front = binary_erosion(buffer.foreground & (buffer.interpolate(normals[:, 2]) > 0.5), iterations=2)
        assert front.sum() > 500
        assert np.mean(np.abs(back.image - face_frame.color)[front]) < 6.0 / 255.0

    def test_large_yaw_is_inpainted(self, face_frame, fitted, dense_depth, mean_texture_fit, small_model):
        pose = pose_about(fitted.vertices.mean(axis=0), view_rotation(0.0, 50.0))
        view = rotate_and_render(face_frame, fitted, dense_depth, pose, mean_texture_fit, small_model)
        assert view.occlusion.any()
        assert np.all(np.isfinite(view.image))
        assert view.image.min() >= 0.0 and view.image.max() <= 1.0
        assert np.all(np.isfinite(view.depth))

    def test_incomplete_depth(self, face_frame, fitted, dense_depth, mean_texture_fit, small_model):
        holed = dense_depth.copy()
        holed[5, 5] = np.nan
        with pytest.raises(AugmentationError, match="dense depth must cover"):
            rotate_and_render(face_frame, fitted, holed, CameraPose.identity(), mean_texture_fit, small_model)


@pytest.mark.unit
class TestFuseTargetShape:
    """Region-wise target shapes from four donors"""

    @pytest.fixture(scope="class")
    def donors(self, synthetic_model):
        rng = np.random.default_rng(21)
        parts = {}
        for name in REGION_NAMES:
            params = ShapeParams(rng.normal(size=synthetic_model.id_dims), np.zeros(synthetic_model.exp_dims))
            parts[name] = evaluate_shape(synthetic_model, params)
        return parts, synthetic_model.annotations.regions

    def test_identical_donors(self, synthetic_model):
        mesh = synthetic_model.template()
        parts = {name: mesh for name in REGION_NAMES}
        fused = fuse_target_shape(parts, synthetic_model.annotations.regions)
        assert np.array_equal(fused.vertices, mesh.vertices)
        assert np.array_equal(fused.triangles, mesh.triangles)

    def test_region_interior_comes_from_its_donor(self, donors):
        parts, labels = donors
        nose = labels == REGION_NAMES.index("nose")
        reference = parts["nose"]
        edges = mesh_edges(reference.triangles)
        edge_length = np.linalg.norm(reference.vertices[edges[:, 0]] - reference.vertices[edges[:, 1]], axis=1).mean()
        hops = dijkstra(vertex_adjacency(reference), directed=False, indices=np.flatnonzero(~nose), unweighted=True,
                        min_only=True)  # fmt: skip
        interior = nose & (hops >= 8.0 / edge_length + 0.5)
        assert interior.any()
        fused = fuse_target_shape(parts, labels, blend_band=8.0)
        assert np.array_equal(fused.vertices[interior], parts["nose"].vertices[interior])

    def test_narrow_band_selects_own_donor(self, donors):
        parts, labels = donors
        fused = fuse_target_shape(parts, labels, blend_band=0.0)
        for k, name in enumerate(REGION_NAMES):
            own = labels == k
            assert np.array_equal(fused.vertices[own], parts[name].vertices[own])

    def test_band_vertices_are_convex_combinations(self, donors):
        """Each vertex lies between its own donor and one other, at least half its own"""
        parts, labels = donors
        fused = fuse_target_shape(parts, labels, blend_band=8.0).vertices
        stacked = np.stack([parts[name].vertices for name in REGION_NAMES])
        own = stacked[labels, np.arange(len(labels))]
        blended = 0
        for v in range(len(labels)):
            offset = fused[v] - own[v]
            if np.linalg.norm(offset) < 1e-12:
                continue
            blended += 1
            on_segment = False
            for k in range(len(REGION_NAMES)):
                direction = stacked[k, v] - own[v]
                length2 = direction @ direction
                if length2 == 0:
                    continue
                t = offset @ direction / length2
                if 0.0 <= t <= 0.5 + 1e-12 and np.linalg.norm(offset - t * direction) < 1e-9:
                    on_segment = True
            assert on_segment, f"vertex {v}"
        assert blended > 0

    def test_within_donor_bounding_box(self, donors):
        parts, labels = donors
        fused = fuse_target_shape(parts, labels).vertices
        stacked = np.stack([parts[name].vertices for name in REGION_NAMES])
        assert np.all(fused >= stacked.min(axis=0) - 1e-9)
        assert np.all(fused <= stacked.max(axis=0) + 1e-9)

    def test_unknown_region(self, donors):
        parts, labels = donors
        with pytest.raises(AugmentationError, match="unknown face regions"):
            fuse_target_shape({**parts, "ears": parts["nose"]}, labels)

    def test_missing_donor(self, donors):
        parts, labels = donors
        with pytest.raises(AugmentationError, match="no donor for regions"):
            fuse_target_shape({k: v for k, v in parts.items() if k != "mouth"}, labels)

    def test_topology_mismatch(self, donors):
        parts, labels = donors
        with pytest.raises(AugmentationError, match="does not share the template topology"):
            fuse_target_shape({**parts, "cheek": plane_grid(3, 3)}, labels)


@pytest.mark.integration
class TestTransformShape:
    @pytest.fixture(scope="class")
    def graph(self, face_frame, fitted):
        return build_anchor_graph(face_frame, fitted, 16)

    def test_same_shape_keeps_image(self, face_frame, fitted, graph, mean_texture_fit):
        depths = solve_anchor_depths(graph)
        out = transform_shape(face_frame, fitted, fitted, graph, depths, mean_texture_fit)
        buffer = rasterize(fitted, CameraPose.identity(), np.zeros((fitted.vertex_count, 3)), 128, 128)
        face = binary_erosion(buffer.foreground, iterations=2)
        assert np.mean(np.abs(out.image - face_frame.color)[face]) < 5.0 / 255.0
        assert out.shape is fitted
        assert np.all(np.isfinite(out.depth))
        assert out.coverage.shape == (128, 128)
        assert np.all(out.coverage[buffer.foreground])

    def test_new_shape_is_rendered(self, face_frame, fitted, graph, mean_texture_fit, small_model, posed_face):
        _, pose = posed_face
        params = ShapeParams(np.random.default_rng(2).normal(size=small_model.id_dims), np.zeros(small_model.exp_dims))
        target = rigid_project(evaluate_shape(small_model, params), pose)
        out = transform_shape(face_frame, fitted, target, graph, solve_anchor_depths(graph), mean_texture_fit)
        assert out.image.shape == (128, 128, 3)
        assert np.all(np.isfinite(out.image))
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0
        assert np.all(np.isfinite(out.depth))

    def test_topology_mismatch(self, face_frame, fitted, graph, mean_texture_fit):
        with pytest.raises(AugmentationError, match="does not share the registered topology"):
            transform_shape(face_frame, fitted, plane_grid(3, 3), graph, solve_anchor_depths(graph), mean_texture_fit)
