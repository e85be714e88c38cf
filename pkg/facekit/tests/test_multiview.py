import numpy as np
import pytest
from errors import MultiviewError
from mesh_core import Mesh
from morphable_model import CameraPose, rigid_project, view_rotation
from multiview import (
    STANDARD_VIEWS,
    STUDY_VIEWS,
    ImageMesh,
    build_image_mesh,
    mirror_register,
    synthesize_view,
    synthesize_views,
    template_symmetry,
    unwarp_uv_to_image,
    view_pose_for,
    visibility_scores,
    warp_image_to_uv,
)
from rasterizer import rasterize
from scipy.spatial import ConvexHull

from tests.test_data.meshes import plane_grid


def _gradient_image(width: int, height: int) -> np.ndarray:
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols / (width - 1), rows / (height - 1), np.full(cols.shape, 0.5)], axis=2)


@pytest.fixture(scope="module")
def fitted(posed_face):
    shape, pose = posed_face
    return rigid_project(shape, pose)


@pytest.fixture(scope="module")
def image_mesh(face_frame, fitted, small_model):
    return build_image_mesh(face_frame.color, fitted, 16, symmetry=small_model.annotations.symmetry)


@pytest.fixture(scope="module")
def symmetric_face(small_model):
    """The mean template placed frontally on the image's vertical midline"""
    return rigid_project(small_model.template(), CameraPose(0.5, np.eye(3), [63.5, 63.5, 100.0]))


@pytest.mark.unit
class TestBuildImageMesh:
    """Lifting an image onto the fitted face plus background anchors"""

    def test_face_vertices_come_first(self, image_mesh, fitted):
        assert image_mesh.face_count == fitted.vertex_count
        assert np.array_equal(image_mesh.face_vertices, fitted.vertices)
        assert image_mesh.region[: image_mesh.face_count].all()
        assert not image_mesh.region[image_mesh.face_count :].any()

    def test_anchors_at_mean_face_depth(self, image_mesh, fitted):
        anchors = image_mesh.anchor_vertices
        assert len(anchors) > 0
        assert np.all(anchors[:, 2] == fitted.vertices[:, 2].mean())
        assert np.all(np.isfinite(anchors))

    def test_anchors_lie_outside_face_hull(self, image_mesh, fitted):
        hull = ConvexHull(fitted.vertices[:, :2])
        signed = image_mesh.anchor_vertices[:, :2] @ hull.equations[:, :2].T + hull.equations[:, 2]
        assert np.all(signed.max(axis=1) > 0)

    def test_constant_image_gives_constant_colors(self, fitted):
        image = np.tile([0.2, 0.4, 0.6], (128, 128, 1))
        mesh = build_image_mesh(image, fitted, 16)
        assert np.allclose(mesh.colors, [0.2, 0.4, 0.6])

    def test_identity_render_reproduces_source(self, fitted):
        """Rendering the image mesh back in place reproduces a smooth image on 99% of pixels"""
        image = _gradient_image(128, 128)
        mesh = build_image_mesh(image, fitted, 16)
        buffer = rasterize(mesh.mesh, CameraPose.identity(), mesh.colors, 128, 128)
        close = np.all(np.abs(buffer.color - image) <= 2.0 / 255.0, axis=2) & buffer.foreground
        # the outermost rows and columns sit exactly on the anchor grid's border edges
        assert close[1:-1, 1:-1].mean() >= 0.99

    def test_background_triangles_face_the_viewer(self, image_mesh):
        vertices = image_mesh.mesh.vertices
        tri = image_mesh.background_triangles
        a, b, c = vertices[tri[:, 0]], vertices[tri[:, 1]], vertices[tri[:, 2]]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        assert np.all(area > 0)

    def test_face_covering_image(self):
        face = plane_grid(16, 16, spacing=1.0, z=10.0)
        with pytest.raises(MultiviewError, match="no background anchors"):
            build_image_mesh(np.zeros((16, 16, 3)), face, 4)

    def test_face_outside_image(self, fitted):
        shifted = fitted.with_vertices(fitted.vertices + [200.0, 0.0, 0.0])
        with pytest.raises(MultiviewError, match="inside"):
            build_image_mesh(np.zeros((128, 128, 3)), shifted, 16)


def _two_triangle_mesh(face_normal_axis: str = "z") -> ImageMesh:
    if face_normal_axis == "z":
        face = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    else:
        face = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    background = [[5.0, 5.0, 0.0], [6.0, 5.0, 0.0], [5.0, 6.0, 0.0]]
    mesh = Mesh(vertices=face + background, triangles=[[0, 1, 2], [3, 4, 5]], colors=np.zeros((6, 3)))
    region = np.array([True, True, True, False, False, False])
    return ImageMesh(mesh=mesh, region=region, face_count=3, face_triangle_count=1, width=8, height=8)


@pytest.mark.unit
class TestVisibilityScores:
    def test_frontal_face_and_background(self):
        """Face normal (0,0,1) scores 3, background normal (0,0,1) scores 1"""
        assert np.allclose(visibility_scores(_two_triangle_mesh("z")), [3.0, 3.0, 3.0, 1.0, 1.0, 1.0])

    def test_sideways_face(self):
        """Face normal (1,0,0) scores 2"""
        assert np.allclose(visibility_scores(_two_triangle_mesh("x"))[:3], 2.0)

    def test_face_offset_over_background(self, image_mesh):
        scores = visibility_scores(image_mesh)
        face = scores[: image_mesh.face_count]
        background = scores[image_mesh.face_count :]
        assert face.min() >= 1.0 - 1e-9
        assert background.max() <= 1.0 + 1e-9


@pytest.mark.unit
class TestSynthesizeView:
    """Visibility-weighted blending of the original and mirrored meshes"""

    def test_weights_take_only_two_values(self, image_mesh):
        flipped = mirror_register(image_mesh)
        for view in synthesize_views(image_mesh, flipped).values():
            original = (view.lam == 1.0) & (view.lam_flip == 0.0)
            mirrored = (view.lam == 0.0) & (view.lam_flip == 0.5)
            assert np.all(original ^ mirrored)

    def test_weights_switch_where_visibility_crosses(self, image_mesh):
        flipped = mirror_register(image_mesh)
        view = synthesize_view(image_mesh, flipped, view_pose_for(image_mesh, 0.0, 50.0))
        use_original = view.visibility.grid >= view.visibility_flip.grid
        assert np.array_equal(view.lam == 1.0, use_original)

    def test_ties_keep_the_original(self, image_mesh):
        view = synthesize_view(image_mesh, image_mesh, view_pose_for(image_mesh, 0.0, 25.0))
        covered = view.rgba[..., 3] > 0
        assert covered.any()
        assert np.all(view.lam[covered] == 1.0)

    def test_frontal_self_synthesis(self, image_mesh, face_frame, fitted):
        """The source's own view reproduces the face within 2/255 mean where the original wins"""
        view = synthesize_view(image_mesh, mirror_register(image_mesh), view_pose_for(image_mesh, 0.0, 0.0))
        face = rasterize(fitted, CameraPose.identity(), None, 128, 128).foreground
        mask = (view.lam == 1.0) & (view.rgba[..., 3] > 0) & face
        assert mask.sum() > 0.3 * face.sum()
        error = np.abs(view.rgba[..., :3] - face_frame.color)[mask]
        assert error.mean() < 2.0 / 255.0

    def test_side_view_fills_from_mirror_at_half_alpha(self, image_mesh):
        view = synthesize_view(image_mesh, mirror_register(image_mesh), view_pose_for(image_mesh, 0.0, 50.0))
        filled = view.lam_flip == 0.5
        assert filled.any()
        assert np.allclose(view.rgba[..., 3][filled], 0.5)
        assert np.allclose(view.premultiplied()[filled], 0.5 * view.rgba[..., :3][filled])

    def test_uncovered_pixels_are_transparent(self, image_mesh):
        flipped = mirror_register(image_mesh)
        pose = CameraPose(0.25, view_rotation(0.0, 0.0), [0.0, 0.0, 0.0])
        view = synthesize_view(image_mesh, flipped, pose)
        assert view.rgba[100:, 100:, 3].max() == 0.0

    def test_topology_mismatch(self, image_mesh, face_frame, fitted):
        other = build_image_mesh(face_frame.color, fitted, 8)
        with pytest.raises(MultiviewError, match="does not match"):
            synthesize_view(image_mesh, other, view_pose_for(image_mesh, 0.0, 0.0))

    def test_view_batteries(self):
        assert STANDARD_VIEWS == [(0.0, 0.0), (0.0, 25.0), (0.0, 50.0), (15.0, 0.0), (-25.0, 0.0)]
        assert len(STUDY_VIEWS) == 7
        assert set(STANDARD_VIEWS) <= set(STUDY_VIEWS)


@pytest.mark.unit
class TestMirrorRegister:
    def test_symmetric_face_is_a_fixed_point(self, symmetric_face, small_model):
        mesh = build_image_mesh(np.zeros((128, 128, 3)), symmetric_face, 16, symmetry=small_model.annotations.symmetry)
        flipped = mirror_register(mesh)
        assert np.abs(flipped.face_vertices - mesh.face_vertices).max() < 1e-6

    def test_bump_moves_to_the_other_side(self, symmetric_face, small_model):
        symmetry = small_model.annotations.symmetry
        vertices = symmetric_face.vertices.copy()
        front = vertices[:, 2] > 120.0
        left = int(np.argmin(np.where(front, np.abs(vertices[:, 0] - 46.0) + np.abs(vertices[:, 1] - 63.5), np.inf)))
        assert symmetry[left] != left
        vertices[left, 2] += 5.0
        mesh = build_image_mesh(np.zeros((128, 128, 3)), symmetric_face.with_vertices(vertices), 16, symmetry=symmetry)
        flipped = mirror_register(mesh)
        right = symmetry[left]
        assert flipped.face_vertices[right, 2] - mesh.face_vertices[right, 2] > 4.0
        assert mesh.face_vertices[left, 2] - flipped.face_vertices[left, 2] > 4.0

    def test_colors_follow_the_permutation(self, image_mesh):
        flipped = mirror_register(image_mesh)
        symmetry = image_mesh.symmetry
        assert np.array_equal(flipped.colors[: image_mesh.face_count], image_mesh.colors[symmetry])
        assert np.array_equal(flipped.colors[image_mesh.face_count :], image_mesh.colors[image_mesh.face_count :])

    def test_same_topology_as_original(self, image_mesh):
        flipped = mirror_register(image_mesh)
        assert flipped.mesh.vertex_count == image_mesh.mesh.vertex_count
        assert flipped.mesh.triangles.shape == image_mesh.mesh.triangles.shape

    def test_needs_symmetry(self, face_frame, fitted):
        mesh = build_image_mesh(face_frame.color, fitted, 16)
        with pytest.raises(MultiviewError, match="symmetry"):
            mirror_register(mesh)


@pytest.mark.unit
class TestTemplateSymmetry:
    def test_matches_template_annotations(self, small_model):
        symmetry = template_symmetry(small_model.template())
        assert np.array_equal(symmetry, small_model.annotations.symmetry)
        assert np.array_equal(symmetry[symmetry], np.arange(len(symmetry)))

    def test_asymmetric_mesh(self):
        mesh = plane_grid(3, 3).with_vertices(plane_grid(3, 3).vertices + [0.3, 0.0, 0.0])
        with pytest.raises(MultiviewError, match="mirror partner"):
            template_symmetry(mesh)


@pytest.mark.unit
class TestWarpImageToUV:
    """Image plane to UV plane resampling"""

    def test_constant_image(self, fitted):
        raster = warp_image_to_uv(np.tile([0.3, 0.6, 0.9], (128, 128, 1)), fitted, (64, 64))
        on_chart = np.any(raster != 0.0, axis=2)
        assert on_chart.any() and not on_chart.all()
        assert np.allclose(raster[on_chart], [0.3, 0.6, 0.9])
        assert np.all(raster[~on_chart] == 0.0)

    def test_joint_translation(self, fitted):
        image = _gradient_image(128, 128)
        shifted_image = np.zeros((138, 138, 3))
        shifted_image[10:, 10:] = image
        shifted = fitted.with_vertices(fitted.vertices + [10.0, 10.0, 0.0])
        a = warp_image_to_uv(image, fitted, (64, 64))
        b = warp_image_to_uv(shifted_image, shifted, (64, 64))
        assert np.allclose(a, b, atol=1e-9)

    def test_round_trip_over_face(self, fitted):
        """Warp then unwarp returns a smooth image within 4/255 mean over the visible face"""
        image = _gradient_image(128, 128)
        raster = warp_image_to_uv(image, fitted, (256, 256))
        back, mask = unwarp_uv_to_image(raster, fitted, 128, 128)
        assert mask.sum() > 1000
        assert np.abs(back[mask] - image[mask]).mean() < 4.0 / 255.0

    def test_gray_image(self, fitted):
        raster = warp_image_to_uv(np.full((128, 128), 0.5), fitted, (32, 32))
        assert raster.shape == (32, 32)

    def test_needs_uv(self, fitted):
        bare = Mesh(vertices=fitted.vertices, triangles=fitted.triangles)
        with pytest.raises(MultiviewError, match="UV"):
            warp_image_to_uv(np.zeros((128, 128, 3)), bare, (8, 8))
