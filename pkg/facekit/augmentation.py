import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from errors import AugmentationError, MultiviewError
from mesh_core import Mesh, compute_vertex_normals, mesh_edges, vertex_adjacency
from morphable_model import REGION_NAMES, CameraPose, MorphableModel, evaluate_texture
from multiview import sample_image, triangulate_background
from rasterizer import PhongParams, phong_shade_normals, rasterize, rasterize_points
from registration import RGBDFrame
from scipy.ndimage import distance_transform_edt
from scipy.optimize import nnls
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.sparse.linalg import splu

logger = logging.getLogger(__name__)

POSE_YAWS: Tuple[float, ...] = (15.0, 30.0, 45.0, 50.0)
POSE_PITCHES: Tuple[float, ...] = (15.0, -25.0)
SHAPE_TRANSFORM_COUNT = 4
DEPTH_MODES = ("anchors", "profiling")

DIVERGENCE_PATIENCE = 5  # consecutive residual increases before a texture fit is abandoned
ALS_SWEEPS = 3
BACKTRACK_STEPS = 8
FD_STEP = 1e-6
CONVERGED_RESIDUAL = 1e-14
MIN_GAIN = 1e-6
DEPTH_TOLERANCE = 1.0  # mm, z-buffer slack when deciding vertex visibility


def pose_schedule(
    yaws: Sequence[float] = POSE_YAWS, pitches: Sequence[float] = POSE_PITCHES
) -> List[Tuple[float, float]]:
    """(pitch, yaw) targets: yaw-only rotations first, then pitch-only"""
    return [(0.0, float(y)) for y in yaws] + [(float(p), 0.0) for p in pitches]


# ---- anchor graph ----


def _incidence(edges: np.ndarray, count: int) -> sp.csr_matrix:
    rows = np.repeat(np.arange(len(edges)), 2)
    data = np.tile([1.0, -1.0], len(edges))
    return sp.csr_matrix((data, (rows, edges.ravel())), shape=(len(edges), count))


@dataclass
class AnchorGraph:
    """
    Background anchors of one image and the triangulation that connects them.

    The first len(contour_vertices) nodes sit on the face's convex hull and remember the
    template vertex they were taken from; the remaining nodes are grid anchors.
    """

    positions: np.ndarray  # (A, 2) x, y in pixels
    depth: np.ndarray  # (A,) observed depth, 0 where hollow
    valid: np.ndarray  # (A,) True where depth was observed
    edges: np.ndarray  # (E, 2)
    triangles: np.ndarray  # (T, 3) node triangles
    contour_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.depth = np.asarray(self.depth, dtype=np.float64).ravel()
        self.valid = np.asarray(self.valid, dtype=bool).ravel()
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.contour_vertices = np.asarray(self.contour_vertices, dtype=np.int64).ravel()
        count = len(self.positions)
        if len(self.depth) != count or len(self.valid) != count:
            raise AugmentationError(
                f"anchor graph has {count} positions, {len(self.depth)} depths and {len(self.valid)} flags"
            )
        for name in ("edges", "triangles"):
            indices = getattr(self, name)
            if indices.size and (indices.min() < 0 or indices.max() >= count):
                raise AugmentationError(f"anchor {name} reference node {int(indices.max())} of {count}")
        if len(self.contour_vertices) > count:
            raise AugmentationError(f"{len(self.contour_vertices)} contour nodes in a graph of {count}")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def contour(self) -> np.ndarray:
        mask = np.zeros(len(self), dtype=bool)
        mask[: len(self.contour_vertices)] = True
        return mask

    def laplacian(self) -> sp.csr_matrix:
        incidence = _incidence(self.edges, len(self))
        return (incidence.T @ incidence).tocsr()

    def check_connected(self):
        if len(self) == 0:
            raise AugmentationError("anchor graph is empty")
        components, _ = connected_components(self.laplacian(), directed=False)
        if components > 1:
            raise AugmentationError(f"anchor graph has {components} disconnected components")


def build_anchor_graph(frame: RGBDFrame, registered_face: Mesh, anchor_spacing: int = 16) -> AnchorGraph:
    """
    Anchor graph of a frame around its registered face.

    Hull nodes take the face depth; grid anchors take the frame depth at their pixel and
    are hollow where the depth channel is invalid.
    """
    xy = registered_face.vertices[:, :2]
    try:
        boundary, anchors, simplices = triangulate_background(xy, frame.width, frame.height, anchor_spacing)
    except MultiviewError as e:
        raise AugmentationError(str(e))

    # drop hull vertices that ended up in no background triangle
    used = np.unique(simplices)
    remap = np.full(len(boundary) + len(anchors), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    simplices = remap[simplices]
    boundary_used = used[used < len(boundary)]
    anchors = anchors[used[used >= len(boundary)] - len(boundary)]

    contour_vertices = boundary[boundary_used]
    cols = anchors[:, 0].astype(np.int64)
    rows = anchors[:, 1].astype(np.int64)
    anchor_valid = frame.valid[rows, cols]
    graph = AnchorGraph(
        positions=np.concatenate([xy[contour_vertices], anchors]),
        depth=np.concatenate(
            [registered_face.vertices[contour_vertices, 2], np.where(anchor_valid, frame.depth[rows, cols], 0.0)]
        ),
        valid=np.concatenate([np.ones(len(contour_vertices), dtype=bool), anchor_valid]),
        edges=mesh_edges(simplices),
        triangles=simplices,
        contour_vertices=contour_vertices,
    )
    graph.check_connected()
    logger.debug(
        "anchor graph: %d contour nodes, %d anchors (%d hollow), %d edges",
        len(contour_vertices), len(anchors), int((~anchor_valid).sum()), len(graph.edges),
    )  # fmt: skip
    return graph


def anchor_depth_energy(
    graph: AnchorGraph, depths: np.ndarray, data_weight: float = 1.0, smooth_weight: float = 1.0
) -> float:
    """sum over observed anchors of w_d (d_i - D_i)^2 plus sum over edges of w_s (d_i - d_j)^2"""
    depths = np.asarray(depths, dtype=np.float64)
    data = np.sum((depths - graph.depth)[graph.valid] ** 2)
    smooth = np.sum((depths[graph.edges[:, 0]] - depths[graph.edges[:, 1]]) ** 2)
    return float(data_weight * data + smooth_weight * smooth)


def solve_anchor_depths(graph: AnchorGraph, data_weight: float = 1.0, smooth_weight: float = 1.0) -> np.ndarray:
    """
    Anchor depths minimizing anchor_depth_energy.

    Observed anchors are pulled to the depth channel; hollow ones get their depth from
    neighbours only. One sparse solve of the normal equations.
    """
    graph.check_connected()
    if data_weight <= 0 or not graph.valid.any():
        raise AugmentationError("no anchor carries observed depth; the anchor depth system is singular")
    system = sp.diags(data_weight * graph.valid.astype(np.float64)) + smooth_weight * graph.laplacian()
    rhs = data_weight * np.where(graph.valid, graph.depth, 0.0)
    try:
        depths = splu(sp.csc_matrix(system)).solve(rhs)
    except RuntimeError as e:
        raise AugmentationError(f"anchor depth system is singular: {e}")
    logger.debug("anchor depths solved, energy=%.6g", anchor_depth_energy(graph, depths, data_weight, smooth_weight))
    return depths


def _fill_nearest(values: np.ndarray, holes: np.ndarray) -> np.ndarray:
    """Copy every hole pixel from its nearest non-hole pixel"""
    if not holes.any():
        return values
    if holes.all():
        raise AugmentationError("nothing rendered; cannot fill holes")
    rows, cols = distance_transform_edt(holes, return_distances=False, return_indices=True)
    return values[rows, cols]


def densify_depth(
    graph: AnchorGraph, anchor_depths: np.ndarray, registered_face: Mesh, width: int, height: int
) -> np.ndarray:
    """Face z over the face, anchor triangles elsewhere, nearest fill for what neither covers"""
    points = np.column_stack([graph.positions, np.zeros(len(graph))])
    background = rasterize_points(points, graph.triangles, None, width, height)
    dense = background.interpolate(np.asarray(anchor_depths, dtype=np.float64), background=np.nan)
    face = rasterize(registered_face, CameraPose.identity(), np.zeros((registered_face.vertex_count, 3)), width, height)
    dense = np.where(face.foreground, face.depth, dense)
    return _fill_nearest(dense, np.isnan(dense))


def anchor_depths(
    graph: AnchorGraph,
    registered_face: Mesh,
    mode: str = "anchors",
    data_weight: float = 1.0,
    smooth_weight: float = 1.0,
) -> np.ndarray:
    """Depth of every anchor graph node; "profiling" puts every grid anchor at the mean face depth"""
    if mode not in DEPTH_MODES:
        raise AugmentationError(f"unknown depth completion mode '{mode}'")
    if mode == "profiling":
        return np.where(graph.contour, graph.depth, registered_face.vertices[:, 2].mean())
    return solve_anchor_depths(graph, data_weight, smooth_weight)


def complete_depth(
    frame: RGBDFrame,
    registered_face: Mesh,
    anchor_spacing: int = 16,
    smooth_weight: float = 1.0,
    data_weight: float = 1.0,
    mode: str = "anchors",
    graph: Optional[AnchorGraph] = None,
) -> np.ndarray:
    """
    Dense depth for every pixel of a frame.

    Args:
        frame: RGBDFrame whose depth channel has holes
        registered_face: registered template in the frame's coordinates
        anchor_spacing: background anchor grid step in pixels
        smooth_weight, data_weight: weights of the anchor depth energy
        mode: "anchors" solves the anchor depths; "profiling" puts every grid anchor
              at the mean face depth
        graph: prebuilt anchor graph, built from the frame when None

    Returns:
        (H, W) depth raster without holes
    """
    if mode not in DEPTH_MODES:
        raise AugmentationError(f"unknown depth completion mode '{mode}'")
    if graph is None:
        graph = build_anchor_graph(frame, registered_face, anchor_spacing)
    depths = anchor_depths(graph, registered_face, mode, data_weight, smooth_weight)
    return densify_depth(graph, depths, registered_face, frame.width, frame.height)


# ---- texture and illumination fitting ----


@dataclass
class TextureParams:
    """Texture coefficients and the illumination they were fitted under"""

    beta: np.ndarray
    phong: PhongParams
    residual: float = float("nan")
    residual_trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.beta)):
            raise AugmentationError("texture coefficients must be finite")

    def albedo(self, model: MorphableModel) -> np.ndarray:
        return evaluate_texture(model, self.beta)


def _light_direction(azimuth: float, elevation: float) -> np.ndarray:
    return np.array(
        [np.cos(elevation) * np.sin(azimuth), -np.sin(elevation), np.cos(elevation) * np.cos(azimuth)]
    )


def _light_angles(light: np.ndarray) -> Tuple[float, float]:
    return float(np.arctan2(light[0], light[2])), float(np.arcsin(np.clip(-light[1], -1.0, 1.0)))


def _shading_terms(normals: np.ndarray, light: np.ndarray, k_s: float, nu: float, view: np.ndarray):
    n_dot_l = normals @ light
    reflected = 2.0 * n_dot_l[:, None] * normals - light
    return np.maximum(n_dot_l, 0.0), k_s * np.maximum(reflected @ view, 0.0) ** nu


@dataclass
class _TextureState:
    beta: np.ndarray
    amb: np.ndarray  # (3,) diagonal
    direct: np.ndarray  # (3,) diagonal
    azimuth: float
    elevation: float
    k_s: float
    nu: float

    @property
    def light(self) -> np.ndarray:
        return _light_direction(self.azimuth, self.elevation)

    def to_params(self, view: np.ndarray) -> PhongParams:
        return PhongParams(self.amb, self.direct, self.light, self.k_s, view, self.nu)


class _TextureProblem:
    """Sampled vertex colors against the texture model under Phong shading"""

    def __init__(self, colors: np.ndarray, normals: np.ndarray, mean: np.ndarray, basis: np.ndarray, view: np.ndarray):
        self.colors = colors  # (V, 3)
        self.normals = normals  # (V, 3)
        self.mean = mean  # (V, 3)
        self.basis = basis  # (V, 3, K)
        self.view = view

    def albedo(self, beta: np.ndarray) -> np.ndarray:
        return self.mean + self.basis @ beta

    def terms(self, state: _TextureState):
        return _shading_terms(self.normals, state.light, state.k_s, state.nu, self.view)

    def predict(self, state: _TextureState) -> np.ndarray:
        diffuse, specular = self.terms(state)
        albedo = self.albedo(state.beta)
        return albedo * state.amb + albedo * state.direct * diffuse[:, None] + state.direct * specular[:, None]

    def residual(self, state: _TextureState) -> float:
        return float(np.mean((np.clip(self.predict(state), 0.0, 1.0) - self.colors) ** 2))

    def solve_beta(self, state: _TextureState, diffuse: np.ndarray, specular: np.ndarray) -> np.ndarray:
        gain = state.amb + state.direct * diffuse[:, None]
        target = self.colors - state.direct * specular[:, None] - self.mean * gain
        design = (gain[:, :, None] * self.basis).reshape(-1, self.basis.shape[2])
        beta, *_ = np.linalg.lstsq(design, target.ravel(), rcond=None)
        return beta

    def solve_lights(self, beta: np.ndarray, diffuse: np.ndarray, specular: np.ndarray):
        albedo = self.albedo(beta)
        amb, direct = np.zeros(3), np.zeros(3)
        for c in range(3):
            design = np.column_stack([albedo[:, c], albedo[:, c] * diffuse + specular])
            (amb[c], direct[c]), _ = nnls(design, self.colors[:, c])
        return amb, direct

    def gauss_newton(self, state: _TextureState) -> _TextureState:
        """Joint step on beta, Amb and Dir at fixed light direction and specular terms"""
        diffuse, specular = self.terms(state)
        albedo = self.albedo(state.beta)
        gain = state.amb + state.direct * diffuse[:, None]
        count, dims = len(self.colors), self.basis.shape[2]
        jacobian = np.zeros((count, 3, dims + 6))
        jacobian[:, :, :dims] = gain[:, :, None] * self.basis
        for c in range(3):
            jacobian[:, c, dims + c] = albedo[:, c]
            jacobian[:, c, dims + 3 + c] = albedo[:, c] * diffuse + specular
        error = (self.colors - self.predict(state)).ravel()
        delta, *_ = np.linalg.lstsq(jacobian.reshape(-1, dims + 6), error, rcond=None)
        candidate = replace(
            state,
            beta=state.beta + delta[:dims],
            amb=np.maximum(state.amb + delta[dims : dims + 3], 0.0),
            direct=np.maximum(state.direct + delta[dims + 3 :], 0.0),
        )
        return candidate if self.residual(candidate) < self.residual(state) else state

    def _moved(self, state: _TextureState, x: np.ndarray) -> _TextureState:
        k_s, nu = max(float(x[2]), 0.0), max(float(x[3]), 0.0)
        return replace(state, azimuth=float(x[0]), elevation=float(x[1]), k_s=k_s, nu=nu)

    def nonlinear_step(self, state: _TextureState, step: float) -> _TextureState:
        """Normalized finite-difference gradient step on (light angles, k_s, nu) with backtracking"""
        x = np.array([state.azimuth, state.elevation, state.k_s, state.nu])
        current = self.residual(state)
        gradient = np.zeros(4)
        for i in range(4):
            h = FD_STEP * max(1.0, abs(x[i]))
            up, down = x.copy(), x.copy()
            up[i] += h
            down[i] -= h
            gradient[i] = (self.residual(self._moved(state, up)) - self.residual(self._moved(state, down))) / (2.0 * h)
        norm = np.linalg.norm(gradient)
        if not np.isfinite(norm) or norm == 0.0:
            return state
        t = step
        for _ in range(BACKTRACK_STEPS):
            candidate = self._moved(state, x - t * gradient / norm)
            if self.residual(candidate) < current:
                return candidate
            t *= 0.5
        return state


def fit_texture_colors(
    colors: np.ndarray,
    normals: np.ndarray,
    model: MorphableModel,
    vertex_ids: Optional[np.ndarray] = None,
    iters: int = 30,
    step: float = 0.1,
    initial: Optional[PhongParams] = None,
) -> TextureParams:
    """
    Fit texture coefficients and illumination to observed vertex colors.

    Each iteration alternates closed-form solves for beta and the diagonal Amb/Dir (plus a
    joint Gauss-Newton refinement of the three) with one gradient step on the light
    direction, k_s and nu. The best iterate is returned; its residual trace lists every
    improvement.

    Args:
        colors: (V, 3) observed colors of the fitted vertices
        normals: (V, 3) unit normals of those vertices in the image frame
        model: MorphableModel providing mean texture and texture basis
        vertex_ids: template vertex of each row, all vertices when None
        iters: outer iterations
        step: initial step length of the nonlinear update
        initial: starting illumination, a frontal light with Amb = Dir = 0.5 when None
    """
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    ids = np.arange(model.vertex_count) if vertex_ids is None else np.asarray(vertex_ids, dtype=np.int64)
    if len(colors) != len(ids) or len(normals) != len(ids):
        raise AugmentationError(f"{len(colors)} colors and {len(normals)} normals for {len(ids)} vertices")
    if len(ids) * 3 < model.tex_dims + 6:
        raise AugmentationError(f"{len(ids)} vertices cannot determine {model.tex_dims} texture coefficients")

    mean = model.mean_texture.reshape(-1, 3)[ids]
    basis = model.tex_basis.reshape(model.vertex_count, 3, model.tex_dims)[ids]
    if initial is None:
        initial = PhongParams(0.5 * np.eye(3), 0.5 * np.eye(3), [0.0, 0.0, 1.0], 0.0, [0.0, 0.0, 1.0], 8.0)
    problem = _TextureProblem(colors, normals, mean, basis, initial.ve)
    azimuth, elevation = _light_angles(initial.l)
    state = _TextureState(
        np.zeros(model.tex_dims), initial.amb_diag, initial.dir_diag, azimuth, elevation, initial.k_s, initial.nu
    )

    best, best_residual = state, problem.residual(state)
    trace = [best_residual]
    previous, growth = best_residual, 0
    for iteration in range(iters):
        diffuse, specular = problem.terms(state)
        beta, amb, direct = state.beta, state.amb, state.direct
        for _ in range(ALS_SWEEPS):
            beta = problem.solve_beta(replace(state, amb=amb, direct=direct), diffuse, specular)
            amb, direct = problem.solve_lights(beta, diffuse, specular)
        state = problem.gauss_newton(replace(state, beta=beta, amb=amb, direct=direct))
        state = problem.nonlinear_step(state, step)

        residual = problem.residual(state)
        growth = growth + 1 if residual > previous else 0
        previous = residual
        if growth >= DIVERGENCE_PATIENCE:
            raise AugmentationError(
                f"texture fit diverged at iteration {iteration}: residual trace {trace + [residual]}"
            )
        if residual < best_residual:
            best, best_residual = state, residual
            trace.append(residual)
        if best_residual < CONVERGED_RESIDUAL:
            break

    logger.debug("texture fit: %d iterations, residual %.3g", len(trace) - 1, best_residual)
    return TextureParams(best.beta, best.to_params(initial.ve), best_residual, trace)


def _visible_vertices(mesh: Mesh, normals: np.ndarray, width: int, height: int, min_visibility: float) -> np.ndarray:
    buffer = rasterize(mesh, CameraPose.identity(), np.zeros((mesh.vertex_count, 3)), width, height)
    cols = np.clip(np.rint(mesh.vertices[:, 0]).astype(np.int64), 0, width - 1)
    rows = np.clip(np.rint(mesh.vertices[:, 1]).astype(np.int64), 0, height - 1)
    in_front = mesh.vertices[:, 2] >= buffer.depth[rows, cols] - DEPTH_TOLERANCE
    return in_front & (normals[:, 2] > min_visibility)


def fit_texture(
    image: np.ndarray,
    registered: Mesh,
    model: MorphableModel,
    iters: int = 30,
    step: float = 0.1,
    min_visibility: float = 0.17,
) -> TextureParams:
    """Texture and illumination of a registered face, fitted to the image colors under its visible vertices"""
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape[:2]
    if registered.vertex_count != model.vertex_count:
        raise AugmentationError(f"registered mesh has {registered.vertex_count} vertices, model {model.vertex_count}")
    xy = registered.vertices[:, :2]
    if (xy[:, 0].min() < -0.5 or xy[:, 0].max() >= width - 0.5 or xy[:, 1].min() < -0.5
            or xy[:, 1].max() >= height - 0.5):  # fmt: skip
        raise AugmentationError(f"registered mesh does not project inside the {width}x{height} image")

    normals = compute_vertex_normals(registered, allow_isolated=True).normals
    visible = np.flatnonzero(_visible_vertices(registered, normals, width, height, min_visibility))
    colors = sample_image(image, xy[visible])
    return fit_texture_colors(colors, normals[visible], model, visible, iters, step)


def _gain(normals: np.ndarray, lighting: PhongParams):
    """Per-channel factor from albedo to lit color, and the specular term added on top"""
    diffuse, specular = _shading_terms(normals, lighting.l, lighting.k_s, lighting.nu, lighting.ve)
    return lighting.amb_diag + lighting.dir_diag * diffuse[:, None], specular


def deshade_colors(colors: np.ndarray, normals: np.ndarray, lighting: PhongParams) -> np.ndarray:
    """Albedo that the illumination model maps to the given colors; colors pass through where unlit"""
    colors = np.asarray(colors, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    gain, specular = _gain(normals, lighting)
    unlit = colors - lighting.dir_diag * specular[:, None]
    return np.where(gain > MIN_GAIN, unlit / np.maximum(gain, MIN_GAIN), colors)


def adjust_shading(image_colors: np.ndarray, source_shape: Mesh, target_shape: Mesh, tex: TextureParams) -> np.ndarray:
    """
    Re-shade vertex colors for a new shape.

    The albedo implied by the source image under the fitted illumination is lit again with
    the target shape's normals; everything but the normals comes from the source.
    """
    if not source_shape.same_topology(target_shape):
        raise AugmentationError("source and target shapes do not share a topology")
    image_colors = np.asarray(image_colors, dtype=np.float64)
    if len(image_colors) != source_shape.vertex_count:
        raise AugmentationError(f"{len(image_colors)} colors for {source_shape.vertex_count} vertices")
    source_normals = compute_vertex_normals(source_shape, allow_isolated=True).normals
    target_normals = compute_vertex_normals(target_shape, allow_isolated=True).normals
    albedo = deshade_colors(image_colors, source_normals, tex.phong)
    shaded = phong_shade_normals(target_normals, albedo, tex.phong)
    # no albedo is recoverable where the source is unlit
    source_gain, _ = _gain(source_normals, tex.phong)
    return np.where(source_gain > MIN_GAIN, shaded, image_colors)


# ---- rotate and render ----


@dataclass
class RotatedView:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    occlusion: np.ndarray  # (H, W) pixels inpainted from the model texture
    filled: np.ndarray  # (H, W) pixels nothing rendered to, copied from their nearest neighbour


@lru_cache(maxsize=8)
def _pixel_grid_triangles(height: int, width: int) -> np.ndarray:
    index = np.arange(height * width).reshape(height, width)
    v00, v01 = index[:-1, :-1].ravel(), index[:-1, 1:].ravel()
    v10, v11 = index[1:, :-1].ravel(), index[1:, 1:].ravel()
    triangles = np.concatenate([np.stack([v00, v01, v11], axis=1), np.stack([v00, v11, v10], axis=1)])
    triangles.setflags(write=False)
    return triangles


def lift_image(color: np.ndarray, dense_depth: np.ndarray) -> Mesh:
    """Every pixel becomes a vertex at (column, row, depth); neighbouring pixels form two triangles per quad"""
    height, width = dense_depth.shape
    rows, cols = np.mgrid[0:height, 0:width]
    vertices = np.column_stack([cols.ravel(), rows.ravel(), dense_depth.ravel()]).astype(np.float64)
    colors = np.clip(np.asarray(color, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    return Mesh(vertices=vertices, triangles=_pixel_grid_triangles(height, width), colors=colors)


def poisson_blend(target: np.ndarray, source: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Seamless cloning of source into target over mask.

    Inside the mask the result has the source's 4-neighbour Laplacian; pixels outside the
    mask are the target's and act as the boundary condition. One factorization serves all
    channels.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if target.shape != source.shape or target.shape[:2] != mask.shape:
        raise AugmentationError(f"target {target.shape}, source {source.shape} and mask {mask.shape} disagree")
    if not mask.any():
        return target.copy()
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise AugmentationError("blend mask touches the image border")

    flat = target.ndim == 2
    if flat:
        target, source = target[..., None], source[..., None]
    rows, cols = np.nonzero(mask)
    count = len(rows)
    index = np.full(mask.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(count)

    entry_rows, entry_cols, entry_data = [np.arange(count)], [np.arange(count)], [np.full(count, 4.0)]
    rhs = np.zeros((count, target.shape[2]))
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nr, nc = rows + dr, cols + dc
        neighbour = index[nr, nc]
        inside = neighbour >= 0
        entry_rows.append(np.flatnonzero(inside))
        entry_cols.append(neighbour[inside])
        entry_data.append(np.full(int(inside.sum()), -1.0))
        rhs[~inside] += target[nr[~inside], nc[~inside]]
        rhs += source[rows, cols] - source[nr, nc]

    system = sp.csc_matrix(
        (np.concatenate(entry_data), (np.concatenate(entry_rows), np.concatenate(entry_cols))), shape=(count, count)
    )
    out = target.copy()
    out[rows, cols] = splu(system).solve(rhs)
    return out[..., 0] if flat else out


def rotate_and_render(
    frame: RGBDFrame,
    registered: Mesh,
    dense_depth: np.ndarray,
    target_pose: CameraPose,
    tex: TextureParams,
    model: MorphableModel,
    occlusion_threshold: float = 0.17,
) -> RotatedView:
    """
    Render a frame from a new pose.

    Args:
        frame: source RGBDFrame
        registered: registered template in the frame's coordinates
        dense_depth: (H, W) completed depth of the frame
        target_pose: rigid motion applied to the lifted frame
        tex: texture fitted on the source
        model: morphable model the texture coefficients belong to
        occlusion_threshold: source visibility (n_z) below which face pixels are inpainted

    Returns:
        RotatedView with the rendered image, its depth and the inpainted mask
    """
    height, width = frame.height, frame.width
    dense_depth = np.asarray(dense_depth, dtype=np.float64)
    if dense_depth.shape != (height, width) or not np.all(np.isfinite(dense_depth)):
        raise AugmentationError("dense depth must cover the whole image")

    rendered = rasterize(lift_image(frame.color, dense_depth), target_pose, None, width, height)
    holes = ~rendered.foreground
    image = _fill_nearest(rendered.color, holes)
    depth = _fill_nearest(rendered.depth, holes)

    normals = compute_vertex_normals(registered, allow_isolated=True).normals
    albedo = np.clip(tex.albedo(model), 0.0, 1.0)
    model_colors = phong_shade_normals(normals @ target_pose.R.T, albedo, tex.phong)
    face = rasterize(registered, target_pose, model_colors, width, height)
    source_visibility = face.interpolate(normals[:, 2], background=np.inf)
    occlusion = face.foreground & (source_visibility < occlusion_threshold)
    occlusion[[0, -1], :] = False
    occlusion[:, [0, -1]] = False
    if occlusion.any():
        source = np.where(face.foreground[..., None], face.color, image)
        image = poisson_blend(image, source, occlusion)

    logger.debug("rotate_and_render: %d inpainted, %d filled pixels", int(occlusion.sum()), int(holes.sum()))
    return RotatedView(np.clip(image, 0.0, 1.0), depth, occlusion, holes)


# ---- shape transformation ----


def fuse_target_shape(parts: Mapping[str, Mesh], template_regions: np.ndarray, blend_band: float = 8.0) -> Mesh:
    """
    Target shape assembled region by region from donor meshes.

    Each vertex takes its own region's donor. Within blend_band (mm, converted to edge hops
    by the mean edge length) of another region, it is cross-faded with the nearest other
    region's donor; the own donor never drops below half.
    """
    unknown = sorted(set(parts) - set(REGION_NAMES))
    if unknown:
        raise AugmentationError(f"unknown face regions {unknown}; expected {list(REGION_NAMES)}")
    labels = np.asarray(template_regions, dtype=np.int64).ravel()
    present = np.unique(labels)
    missing = [REGION_NAMES[k] for k in present if REGION_NAMES[k] not in parts]
    if missing:
        raise AugmentationError(f"no donor for regions {missing}")

    reference = parts[REGION_NAMES[present[0]]]
    for name, mesh in parts.items():
        if not reference.same_topology(mesh):
            raise AugmentationError(f"donor '{name}' does not share the template topology")
    if len(labels) != reference.vertex_count:
        raise AugmentationError(f"{len(labels)} region labels for {reference.vertex_count} vertices")

    ids = np.arange(len(labels))
    stacked = np.stack([parts[REGION_NAMES[k]].vertices for k in present])
    own = np.searchsorted(present, labels)
    if len(present) == 1 or blend_band <= 0:
        return Mesh(vertices=stacked[own, ids], triangles=reference.triangles, uv=reference.uv)

    adjacency = vertex_adjacency(reference)
    hops = np.stack(
        [dijkstra(adjacency, directed=False, indices=np.flatnonzero(labels == k), unweighted=True, min_only=True)
         for k in present]
    )  # fmt: skip
    hops[own, ids] = np.inf
    partner = hops.argmin(axis=0)
    distance = hops[partner, ids]

    edges = mesh_edges(reference.triangles)
    lengths = np.linalg.norm(reference.vertices[edges[:, 0]] - reference.vertices[edges[:, 1]], axis=1)
    edge_length = float(lengths.mean())
    band_hops = blend_band / edge_length
    weight = np.clip(0.5 + 0.5 * (distance - 0.5) / band_hops, 0.5, 1.0)

    own_positions = stacked[own, ids]
    fused = own_positions + (1.0 - weight)[:, None] * (stacked[partner, ids] - own_positions)
    logger.debug("fused target shape: %d blended vertices, band %.2f hops", int((weight < 1.0).sum()), band_hops)
    return Mesh(vertices=fused, triangles=reference.triangles, uv=reference.uv)


def warp_background_anchors(
    graph: AnchorGraph, source_contour: np.ndarray, target_contour: np.ndarray, contour_weight: float = 1.0
) -> AnchorGraph:
    """
    Move the anchors so the contour nodes follow the face while neighbour offsets are kept.

    Minimizes sum over contour nodes of w |p_i - (s_i + t_i - c_i)|^2 plus sum over edges of
    |(p_i - p_j) - (s_i - s_j)|^2, with s the current positions and c, t the source and
    target contour points. x and y are independent systems sharing one factorization.
    """
    source_contour = np.asarray(source_contour, dtype=np.float64).reshape(-1, 2)
    target_contour = np.asarray(target_contour, dtype=np.float64).reshape(-1, 2)
    count = len(graph.contour_vertices)
    if len(source_contour) != len(target_contour):
        raise AugmentationError(f"{len(source_contour)} source and {len(target_contour)} target contour points")
    if len(source_contour) != count:
        raise AugmentationError(f"{len(source_contour)} contour points for {count} contour nodes")
    if count == 0:
        raise AugmentationError("anchor graph has no contour nodes to pin")
    graph.check_connected()

    pins = np.zeros_like(graph.positions)
    pins[:count] = graph.positions[:count] + (target_contour - source_contour)
    weights = np.where(graph.contour, contour_weight, 0.0)
    laplacian = graph.laplacian()
    system = sp.csc_matrix(sp.diags(weights) + laplacian)
    rhs = weights[:, None] * pins + laplacian @ graph.positions
    try:
        positions = splu(system).solve(rhs)
    except RuntimeError as e:
        raise AugmentationError(f"anchor warp system is singular: {e}")
    return replace(graph, positions=positions)


def anchor_warp_energy(
    graph: AnchorGraph,
    positions: np.ndarray,
    source_contour: np.ndarray,
    target_contour: np.ndarray,
    contour_weight: float = 1.0,
) -> float:
    count = len(graph.contour_vertices)
    pins = graph.positions[:count] + (np.asarray(target_contour) - np.asarray(source_contour))
    offsets = positions[graph.edges[:, 0]] - positions[graph.edges[:, 1]]
    reference = graph.positions[graph.edges[:, 0]] - graph.positions[graph.edges[:, 1]]
    return float(contour_weight * np.sum((positions[:count] - pins) ** 2) + np.sum((offsets - reference) ** 2))


@dataclass
class ShapeTransform:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    shape: Mesh  # target face in the image frame
    coverage: np.ndarray  # (H, W) pixels the render reached, the rest are filled from neighbours


def transform_shape(
    frame: RGBDFrame,
    registered: Mesh,
    target_face: Mesh,
    graph: AnchorGraph,
    anchor_depths: np.ndarray,
    tex: TextureParams,
) -> ShapeTransform:
    """
    Swap the face under an image for a target shape.

    The face keeps its image colors re-shaded for the new normals, the background anchors
    are warped to follow the new face contour, and the result is rendered head-on.
    """
    if not registered.same_topology(target_face):
        raise AugmentationError("target face does not share the registered topology")
    height, width = frame.height, frame.width
    count = len(graph.contour_vertices)

    face_colors = sample_image(frame.color, registered.vertices[:, :2])
    adjusted = adjust_shading(face_colors, registered, target_face, tex)
    warped = warp_background_anchors(
        graph, graph.positions[:count], target_face.vertices[graph.contour_vertices, :2]
    )
    anchor_colors = np.clip(sample_image(frame.color, graph.positions[count:]), 0.0, 1.0)

    face_count = registered.vertex_count
    lookup = np.concatenate([graph.contour_vertices, face_count + np.arange(len(graph) - count)])
    anchors = np.column_stack([warped.positions[count:], np.asarray(anchor_depths)[count:]])
    mesh = Mesh(
        vertices=np.concatenate([target_face.vertices, anchors]),
        triangles=np.concatenate([target_face.triangles, lookup[graph.triangles]]),
        colors=np.concatenate([adjusted, anchor_colors]),
    )
    buffer = rasterize(mesh, CameraPose.identity(), None, width, height)
    holes = ~buffer.foreground
    return ShapeTransform(
        image=np.clip(_fill_nearest(buffer.color, holes), 0.0, 1.0),
        depth=_fill_nearest(buffer.depth, holes),
        shape=target_face,
        coverage=buffer.foreground,
    )
