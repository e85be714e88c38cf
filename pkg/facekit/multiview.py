import hashlib
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from errors import MultiviewError
from mesh_core import Mesh, compute_vertex_normals
from morphable_model import CameraPose, fit_rigid, pose_about, view_rotation
from rasterizer import RenderBuffer, rasterize, rasterize_points
from scipy.ndimage import map_coordinates
from scipy.spatial import ConvexHull, Delaunay, cKDTree

logger = logging.getLogger(__name__)

# (pitch, yaw) in degrees
STANDARD_VIEWS: List[Tuple[float, float]] = [(0.0, 0.0), (0.0, 25.0), (0.0, 50.0), (15.0, 0.0), (-25.0, 0.0)]
STUDY_VIEWS: List[Tuple[float, float]] = [
    (0.0, 0.0), (15.0, 0.0), (-25.0, 0.0), (0.0, 25.0), (0.0, 50.0), (0.0, -25.0), (0.0, -50.0)
]  # fmt: skip

FACE_OFFSET = 2.0
LIGHT = np.array([0.0, 0.0, 1.0])

_CHART_CACHE: Dict[Tuple[str, int, int], RenderBuffer] = {}


@dataclass(frozen=True)
class ImageMesh:
    """
    An image lifted to 3D: the fitted face followed by constant-depth background anchors.

    Vertices [0, face_count) are the template face; the rest are anchors.
    """

    mesh: Mesh
    region: np.ndarray  # (N,) True on face vertices
    face_count: int
    face_triangle_count: int
    width: int
    height: int
    symmetry: Optional[np.ndarray] = None  # mirror partner of each face vertex

    @property
    def face_vertices(self) -> np.ndarray:
        return self.mesh.vertices[: self.face_count]

    @property
    def anchor_vertices(self) -> np.ndarray:
        return self.mesh.vertices[self.face_count :]

    @property
    def face_triangles(self) -> np.ndarray:
        return self.mesh.triangles[: self.face_triangle_count]

    @property
    def background_triangles(self) -> np.ndarray:
        return self.mesh.triangles[self.face_triangle_count :]

    @property
    def colors(self) -> np.ndarray:
        return self.mesh.colors


@dataclass
class VisibilityMap:
    grid: np.ndarray  # (H, W), -inf where nothing renders


@dataclass
class SynthesizedView:
    """Straight (non-premultiplied) RGBA view plus the per-pixel blend weights"""

    rgba: np.ndarray  # (H, W, 4)
    lam: np.ndarray  # (H, W) weight of the original mesh
    lam_flip: np.ndarray  # (H, W) weight of the mirrored mesh
    visibility: VisibilityMap
    visibility_flip: VisibilityMap

    def premultiplied(self) -> np.ndarray:
        """lam * I + lam_flip * I_flip"""
        return self.rgba[..., :3] * self.rgba[..., 3:4]


def sample_image(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup at pixel coordinates (x = column, y = row), clamped to the border"""
    image = np.asarray(image, dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    coords = np.stack([xy[:, 1], xy[:, 0]])
    if image.ndim == 2:
        return map_coordinates(image, coords, order=1, mode="nearest")
    return np.stack(
        [map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])], axis=1
    )


def _anchor_grid(width: int, height: int, spacing: int) -> np.ndarray:
    xs = np.arange(0, width, spacing, dtype=np.float64)
    ys = np.arange(0, height, spacing, dtype=np.float64)
    if xs[-1] != width - 1:
        xs = np.append(xs, width - 1)
    if ys[-1] != height - 1:
        ys = np.append(ys, height - 1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _fix_winding(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Reorder so every triangle's normal has positive z (y-down image frame)"""
    a, b, c = points[triangles[:, 0]], points[triangles[:, 1]], points[triangles[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    fixed = triangles.copy()
    flip = area < 0
    fixed[flip] = fixed[flip][:, [0, 2, 1]]
    return fixed


def triangulate_background(
    xy: np.ndarray, width: int, height: int, anchor_spacing: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Anchor grid outside the face's convex hull, triangulated together with the hull vertices.

    Returns:
        (boundary, anchors, simplices): hull vertex ids into xy, (A, 2) anchor positions and
        triangles indexing the stacked points [xy[boundary], anchors]
    """
    hull = ConvexHull(xy)
    grid = _anchor_grid(width, height, anchor_spacing)
    # signed distance to the hull's supporting lines; positive outside
    outside = (grid @ hull.equations[:, :2].T + hull.equations[:, 2]).max(axis=1)
    anchors = grid[outside > 0.5 * anchor_spacing]
    if len(anchors) == 0:
        raise MultiviewError("face covers the whole image; no background anchors left")

    boundary = hull.vertices
    points = np.concatenate([xy[boundary], anchors])
    simplices = Delaunay(points).simplices
    centroids = points[simplices].mean(axis=1)
    centroid_outside = (centroids @ hull.equations[:, :2].T + hull.equations[:, 2]).max(axis=1) > 0
    keep = (simplices >= len(boundary)).any(axis=1) & centroid_outside
    return boundary, anchors, simplices[keep]


def build_image_mesh(
    image: np.ndarray, fitted: Mesh, anchor_spacing: int = 16, symmetry: Optional[np.ndarray] = None
) -> ImageMesh:
    """
    Lift an image to a textured mesh using the fitted face and a background anchor grid.

    Args:
        image: (H, W, 3) RGB in [0, 1]
        fitted: fitted face mesh in the image frame (x, y pixels, z depth)
        anchor_spacing: background grid step in pixels
        symmetry: mirror permutation of the face vertices, kept for mirror_register

    Returns:
        ImageMesh with anchors at the mean face depth
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    face = fitted.vertices
    xy = face[:, :2]
    if (xy[:, 0].min() < -0.5 or xy[:, 0].max() >= width - 0.5 or xy[:, 1].min() < -0.5
            or xy[:, 1].max() >= height - 0.5):  # fmt: skip
        raise MultiviewError(f"fitted face does not project inside the {width}x{height} image")
    if anchor_spacing < 1:
        raise MultiviewError(f"anchor spacing must be >= 1 pixel, got {anchor_spacing}")

    boundary, anchors, simplices = triangulate_background(xy, width, height, anchor_spacing)

    face_count = fitted.vertex_count
    lookup = np.concatenate([boundary, face_count + np.arange(len(anchors))])
    background = lookup[simplices]

    depth = float(face[:, 2].mean())
    vertices = np.concatenate([face, np.column_stack([anchors, np.full(len(anchors), depth)])])
    background = _fix_winding(vertices, background)
    triangles = np.concatenate([fitted.triangles, background])
    colors = np.clip(sample_image(image, vertices[:, :2]), 0.0, 1.0)

    region = np.zeros(len(vertices), dtype=bool)
    region[:face_count] = True
    logger.debug("image mesh: %d face vertices, %d anchors, %d background triangles",
                 face_count, len(anchors), len(background))  # fmt: skip
    return ImageMesh(
        mesh=Mesh(vertices=vertices, triangles=triangles, colors=colors),
        region=region,
        face_count=face_count,
        face_triangle_count=fitted.triangle_count,
        width=width,
        height=height,
        symmetry=None if symmetry is None else np.asarray(symmetry, dtype=np.int64),
    )


def visibility_scores(mesh: ImageMesh) -> np.ndarray:
    """l^T n + 2 on face vertices, l^T n on background, l = (0, 0, 1), in the image frame"""
    vertices = mesh.mesh.vertices
    face = Mesh(vertices=vertices, triangles=mesh.face_triangles)
    normals = compute_vertex_normals(face, allow_isolated=True).normals
    if len(mesh.background_triangles):
        background = Mesh(vertices=vertices, triangles=mesh.background_triangles)
        anchor_normals = compute_vertex_normals(background, allow_isolated=True).normals
        normals[mesh.face_count :] = anchor_normals[mesh.face_count :]
    return normals @ LIGHT + FACE_OFFSET * mesh.region


def _check_pair(mesh: ImageMesh, flipped: ImageMesh):
    if mesh.mesh.vertex_count != flipped.mesh.vertex_count or not np.array_equal(
        mesh.mesh.triangles.shape, flipped.mesh.triangles.shape
    ):
        raise MultiviewError(
            f"mirrored mesh topology ({flipped.mesh.vertex_count} vertices, {flipped.mesh.triangle_count} "
            f"triangles) does not match ({mesh.mesh.vertex_count}, {mesh.mesh.triangle_count})"
        )
    if mesh.face_count != flipped.face_count:
        raise MultiviewError(f"face vertex counts differ: {mesh.face_count} vs {flipped.face_count}")


def synthesize_view(mesh: ImageMesh, flipped: ImageMesh, view_pose: CameraPose) -> SynthesizedView:
    """
    Render both meshes to a view and blend them by rendered visibility.

    Where the original's visibility is at least the mirrored one's, the original is used
    (lam = 1, lam_flip = 0); elsewhere the mirrored colors are used with lam_flip = 0.5,
    which is also the pixel's alpha. Pixels neither mesh covers are transparent.
    """
    _check_pair(mesh, flipped)
    width, height = mesh.width, mesh.height

    original = rasterize(mesh.mesh, view_pose, mesh.colors, width, height)
    mirrored = rasterize(flipped.mesh, view_pose, flipped.colors, width, height)
    vis = original.interpolate(visibility_scores(mesh), background=-np.inf)
    vis_flip = mirrored.interpolate(visibility_scores(flipped), background=-np.inf)

    use_original = vis >= vis_flip
    lam = np.where(use_original, 1.0, 0.0)
    lam_flip = np.where(use_original, 0.0, 0.5)

    rgb = np.where(use_original[..., None], original.color, mirrored.color)
    alpha = lam + lam_flip
    covered = original.foreground | mirrored.foreground
    alpha = np.where(covered, alpha, 0.0)
    rgb = np.where(covered[..., None], rgb, 0.0)
    return SynthesizedView(
        rgba=np.concatenate([rgb, alpha[..., None]], axis=2),
        lam=lam,
        lam_flip=lam_flip,
        visibility=VisibilityMap(vis),
        visibility_flip=VisibilityMap(vis_flip),
    )


def view_pose_for(mesh: ImageMesh, pitch: float, yaw: float) -> CameraPose:
    """Rotation about the face centroid"""
    return pose_about(mesh.face_vertices.mean(axis=0), view_rotation(pitch, yaw))


def synthesize_views(
    mesh: ImageMesh, flipped: ImageMesh, views: Sequence[Tuple[float, float]] = STANDARD_VIEWS
) -> Dict[Tuple[float, float], SynthesizedView]:
    return {(pitch, yaw): synthesize_view(mesh, flipped, view_pose_for(mesh, pitch, yaw)) for pitch, yaw in views}


def mirror_register(mesh: ImageMesh, symmetry: Optional[np.ndarray] = None) -> ImageMesh:
    """
    Mesh of the horizontally mirrored image, rigidly aligned back onto the original face.

    Face vertex k of the result takes the mirrored position and color of vertex symmetry[k],
    so the face keeps template semantics; anchors keep their order.
    """
    symmetry = mesh.symmetry if symmetry is None else np.asarray(symmetry, dtype=np.int64)
    if symmetry is None or len(symmetry) != mesh.face_count:
        raise MultiviewError("mirror registration needs the face symmetry permutation")

    vertices = mesh.mesh.vertices.copy()
    colors = mesh.colors.copy()
    vertices[:, 0] = (mesh.width - 1) - vertices[:, 0]
    order = np.concatenate([symmetry, np.arange(mesh.face_count, mesh.mesh.vertex_count)])
    vertices = vertices[order]
    colors = colors[order]

    # background triangles: face references follow the permutation, winding flips with the mirror
    background = mesh.background_triangles.copy()
    on_face = background < mesh.face_count
    background[on_face] = symmetry[background[on_face]]
    background = background[:, [0, 2, 1]]
    triangles = np.concatenate([mesh.face_triangles, background])

    pose = fit_rigid(vertices[: mesh.face_count], mesh.face_vertices)
    aligned = pose.apply(vertices)
    return ImageMesh(
        mesh=Mesh(vertices=aligned, triangles=triangles, colors=colors),
        region=mesh.region.copy(),
        face_count=mesh.face_count,
        face_triangle_count=mesh.face_triangle_count,
        width=mesh.width,
        height=mesh.height,
        symmetry=symmetry,
    )


def template_symmetry(mesh: Mesh, tol: float = 1e-6) -> np.ndarray:
    """Mirror permutation (x -> -x) of a template in its canonical frame"""
    mirrored = mesh.vertices * np.array([-1.0, 1.0, 1.0])
    distances, partner = cKDTree(mesh.vertices).query(mirrored)
    if distances.max() > tol:
        worst = int(np.argmax(distances))
        raise MultiviewError(f"vertex {worst} has no mirror partner within {tol} (nearest {distances[worst]:.3g})")
    return partner.astype(np.int64)


def _uv_chart(mesh: Mesh, height: int, width: int) -> RenderBuffer:
    key = (hashlib.sha1(mesh.triangles.tobytes() + mesh.uv.tobytes()).hexdigest(), height, width)
    chart = _CHART_CACHE.get(key)
    if chart is None:
        points = np.column_stack([mesh.uv[:, 0] * (width - 1), mesh.uv[:, 1] * (height - 1), np.zeros(len(mesh.uv))])
        chart = rasterize_points(points, mesh.triangles, None, width, height)
        _CHART_CACHE[key] = chart
    return chart


def warp_image_to_uv(image: np.ndarray, fitted: Mesh, resolution: Tuple[int, int] = (128, 128)) -> np.ndarray:
    """
    Resample an image onto the template's UV plane through the fitted mesh.

    UV raster pixel (i, j) sits at uv = (j / (W-1), i / (H-1)). Cells off the UV chart are zero.
    """
    if fitted.uv is None:
        raise MultiviewError("fitted mesh has no UV coordinates")
    image = np.asarray(image, dtype=np.float64)
    height, width = resolution
    chart = _uv_chart(fitted, height, width)
    channels = image.shape[2] if image.ndim == 3 else 1
    out = np.zeros((height, width, channels))
    trace = chart.trace()
    if len(trace):
        positions = np.einsum("pk,pkc->pc", trace.weights, fitted.vertices[trace.vertices][:, :, :2])
        values = sample_image(image, positions).reshape(len(trace), channels)
        out[trace.pixels[:, 0], trace.pixels[:, 1]] = values
    return out if image.ndim == 3 else out[..., 0]


def unwarp_uv_to_image(uv_raster: np.ndarray, fitted: Mesh, width: int, height: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of warp_image_to_uv over the visible face region; returns (image, face mask)"""
    if fitted.uv is None:
        raise MultiviewError("fitted mesh has no UV coordinates")
    uv_raster = np.asarray(uv_raster, dtype=np.float64)
    uv_height, uv_width = uv_raster.shape[:2]
    buffer = rasterize(fitted, CameraPose.identity(), np.zeros((fitted.vertex_count, 3)), width, height)
    channels = uv_raster.shape[2] if uv_raster.ndim == 3 else 1
    out = np.zeros((height, width, channels))
    trace = buffer.trace()
    if len(trace):
        uv = np.einsum("pk,pkc->pc", trace.weights, fitted.uv[trace.vertices])
        xy = np.column_stack([uv[:, 0] * (uv_width - 1), uv[:, 1] * (uv_height - 1)])
        out[trace.pixels[:, 0], trace.pixels[:, 1]] = sample_image(uv_raster, xy).reshape(len(trace), channels)
    return (out if uv_raster.ndim == 3 else out[..., 0]), buffer.foreground
