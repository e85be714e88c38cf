import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from config import RegistrationConfig
from errors import RegistrationError
from mesh_core import Mesh, compute_vertex_normals, mesh_edges
from models import IterationRecord, LandmarkRecord, RegistrationReport
from morphable_model import CameraPose
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

MAX_VALID_DEPTH = 1e4


@dataclass
class RGBDFrame:
    """Orthographic RGB-D frame: depth aligned to color pixels, larger z nearer, 0 where invalid"""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) mm
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64).copy()
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape or self.color.shape[:2] != self.depth.shape:
            raise RegistrationError(
                f"color {self.color.shape[:2]}, depth {self.depth.shape} and mask {self.valid.shape} disagree"
            )
        self.depth[~self.valid] = 0.0
        values = self.depth[self.valid]
        if values.size and (values.min() <= 0 or values.max() >= MAX_VALID_DEPTH):
            raise RegistrationError(f"valid depths must lie in (0, {MAX_VALID_DEPTH:g}) mm")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 3)
    normals: np.ndarray  # (P, 3), zero where has_normal is False
    has_normal: np.ndarray  # (P,) bool
    pixels: np.ndarray  # (P, 2) row, column

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class LandmarkSet:
    """2D edge landmarks bound to template vertices plus the ordered face contour polyline"""

    edge_points: np.ndarray  # (K, 2)
    edge_vertices: np.ndarray  # (K,)
    contour: np.ndarray  # (M, 2)

    def __post_init__(self):
        self.edge_points = np.asarray(self.edge_points, dtype=np.float64).reshape(-1, 2)
        self.edge_vertices = np.asarray(self.edge_vertices, dtype=np.int64).ravel()
        self.contour = np.asarray(self.contour, dtype=np.float64).reshape(-1, 2)
        if len(self.edge_points) != len(self.edge_vertices):
            raise RegistrationError(f"{len(self.edge_points)} edge points for {len(self.edge_vertices)} vertex ids")
        if len(self.contour) < 2:
            raise RegistrationError(f"contour polyline needs at least 2 points, got {len(self.contour)}")

    @classmethod
    def from_record(cls, record: LandmarkRecord) -> "LandmarkSet":
        return cls(
            edge_points=[e.xy for e in record.edge],
            edge_vertices=[e.vid for e in record.edge],
            contour=record.contour,
        )

    def to_record(self) -> LandmarkRecord:
        return LandmarkRecord.model_validate(
            {
                "edge": [{"xy": p.tolist(), "vid": int(v)} for p, v in zip(self.edge_points, self.edge_vertices)],
                "contour": self.contour.tolist(),
            }
        )

    def validate_for(self, vertex_count: int):
        if len(self.edge_vertices) and (self.edge_vertices.min() < 0 or self.edge_vertices.max() >= vertex_count):
            bad = self.edge_vertices[(self.edge_vertices < 0) | (self.edge_vertices >= vertex_count)][0]
            raise RegistrationError(f"edge landmark vertex {int(bad)} is not on the {vertex_count}-vertex template")


@dataclass
class PerVertexAffine:
    """One 3x4 affine [A | b] per vertex"""

    matrices: np.ndarray  # (N, 3, 4)

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        if not np.all(np.isfinite(self.matrices)):
            raise RegistrationError("affine field has non-finite entries")

    @classmethod
    def identity(cls, count: int) -> "PerVertexAffine":
        matrices = np.zeros((count, 3, 4))
        matrices[:, :, :3] = np.eye(3)
        return cls(matrices)

    def apply(self, vertices: np.ndarray) -> np.ndarray:
        homogeneous = np.column_stack([vertices, np.ones(len(vertices))])
        return np.einsum("nij,nj->ni", self.matrices, homogeneous)

    def max_deviation(self) -> float:
        """Upper bound on the largest pairwise Frobenius distance: twice the largest distance to the mean"""
        spread = self.matrices - self.matrices.mean(axis=0)
        return 2.0 * float(np.sqrt((spread**2).sum(axis=(1, 2))).max())


@dataclass
class RegistrationResult:
    registered: Mesh
    transforms: PerVertexAffine
    report: RegistrationReport


def backproject_depth(frame: RGBDFrame) -> PointCloud:
    """
    Lift valid pixels to (x=j, y=i, z=depth).

    Normals come from central depth differences and are only defined where all four
    neighbours are valid.
    """
    if not frame.valid.any():
        raise RegistrationError("depth frame has no valid pixels")
    rows, cols = np.nonzero(frame.valid)
    points = np.column_stack([cols, rows, frame.depth[rows, cols]]).astype(np.float64)

    padded = np.pad(frame.valid, 1, constant_values=False)
    depth = np.pad(frame.depth, 1)
    r, c = rows + 1, cols + 1
    has_normal = padded[r, c - 1] & padded[r, c + 1] & padded[r - 1, c] & padded[r + 1, c]
    dzdx = 0.5 * (depth[r, c + 1] - depth[r, c - 1])
    dzdy = 0.5 * (depth[r + 1, c] - depth[r - 1, c])
    normals = np.column_stack([-dzdx, -dzdy, np.ones(len(rows))])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~has_normal] = 0.0
    return PointCloud(points=points, normals=normals, has_normal=has_normal, pixels=np.column_stack([rows, cols]))


def depth_to_mesh(frame: RGBDFrame) -> Mesh:
    """Valid pixels as vertices, two triangles per quad whose corners are all valid"""
    if not frame.valid.any():
        raise RegistrationError("depth frame has no valid pixels")
    rows, cols = np.nonzero(frame.valid)
    index = np.full(frame.valid.shape, -1, dtype=np.int64)
    index[rows, cols] = np.arange(len(rows))
    v00, v01, v10, v11 = index[:-1, :-1], index[:-1, 1:], index[1:, :-1], index[1:, 1:]
    full = (v00 >= 0) & (v01 >= 0) & (v10 >= 0) & (v11 >= 0)
    triangles = np.concatenate(
        [
            np.stack([v00[full], v01[full], v11[full]], axis=1),
            np.stack([v00[full], v11[full], v10[full]], axis=1),
        ]
    )
    vertices = np.column_stack([cols, rows, frame.depth[rows, cols]]).astype(np.float64)
    return Mesh(vertices=vertices, triangles=triangles, colors=np.clip(frame.color[rows, cols], 0.0, 1.0))


def contour_correspondence(points: np.ndarray, curve: np.ndarray) -> np.ndarray:
    """Exact closest point on the polyline for every 2D point (segment projection)"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    curve = np.asarray(curve, dtype=np.float64).reshape(-1, 2)
    if len(curve) == 0:
        raise RegistrationError("contour polyline is empty")
    if len(curve) == 1 or len(points) == 0:
        return np.repeat(curve[:1], len(points), axis=0)

    start = curve[:-1]
    direction = curve[1:] - curve[:-1]
    length2 = np.einsum("sk,sk->s", direction, direction)
    offset = points[:, None, :] - start[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.einsum("psk,sk->ps", offset, direction) / length2
    t = np.where(length2 > 0, np.clip(np.nan_to_num(t), 0.0, 1.0), 0.0)
    candidates = start[None, :, :] + t[..., None] * direction[None, :, :]
    distance2 = ((candidates - points[:, None, :]) ** 2).sum(axis=2)
    best = np.argmin(distance2, axis=1)
    return candidates[np.arange(len(points)), best]


def select_contour_vertices(mesh: Mesh, pose: CameraPose, band: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Vertices on occluding-contour edges: edges shared by a front-facing and a back-facing
    triangle after projection, optionally restricted to a band mask.
    """
    if mesh.triangle_count == 0:
        return np.zeros(0, dtype=np.int64)
    posed = pose.apply(mesh.vertices)
    tri = mesh.triangles
    a, b, c = posed[tri[:, 0]], posed[tri[:, 1]], posed[tri[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    front = area > 0

    edges = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    owner = np.tile(np.arange(len(tri)), 3)
    keys = edges[:, 0] * mesh.vertex_count + edges[:, 1]
    order = np.argsort(keys, kind="stable")
    keys, edges, owner = keys[order], edges[order], owner[order]
    shared = np.flatnonzero(keys[1:] == keys[:-1])
    flips = front[owner[shared]] != front[owner[shared + 1]]
    selected = np.unique(edges[shared[flips]].ravel())
    if band is not None:
        selected = selected[np.asarray(band, dtype=bool)[selected]]
    return selected.astype(np.int64)


def order_contour(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Order 2D contour points by angle around a centre, starting and ending at the top"""
    offset = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)[:2]
    angle = np.arctan2(offset[:, 0], offset[:, 1])
    return np.argsort(angle, kind="stable")


# ---- energy terms ----


def edge_energy(transforms: PerVertexAffine, vertices: np.ndarray, landmarks: LandmarkSet) -> float:
    """Sum of squared 2D distances between the first two affine rows applied to landmark vertices and their targets"""
    if len(landmarks.edge_vertices) == 0:
        return 0.0
    ids = landmarks.edge_vertices
    homogeneous = np.column_stack([vertices[ids], np.ones(len(ids))])
    xy = np.einsum("nij,nj->ni", transforms.matrices[ids, :2, :], homogeneous)
    return float(((xy - landmarks.edge_points) ** 2).sum())


def contour_energy(
    transforms: PerVertexAffine, vertices: np.ndarray, contour_vertices: np.ndarray, curve: np.ndarray
) -> float:
    """Sum of squared 2D distances from projected contour vertices to the closest point on the curve"""
    if len(contour_vertices) == 0:
        return 0.0
    ids = np.asarray(contour_vertices, dtype=np.int64)
    homogeneous = np.column_stack([vertices[ids], np.ones(len(ids))])
    xy = np.einsum("nij,nj->ni", transforms.matrices[ids, :2, :], homogeneous)
    return float(((xy - contour_correspondence(xy, curve)) ** 2).sum())


def smoothness_energy(transforms: PerVertexAffine, edges: np.ndarray, gamma: float = 1.0) -> float:
    """Sum over mesh edges of the squared Frobenius difference of (A, gamma * b)"""
    if len(edges) == 0:
        return 0.0
    scale = np.array([1.0, 1.0, 1.0, gamma])
    difference = (transforms.matrices[edges[:, 0]] - transforms.matrices[edges[:, 1]]) * scale
    return float((difference**2).sum())


def eye_landmark_error(registered: Mesh, landmarks: LandmarkSet, eye_vertices: Optional[np.ndarray] = None) -> float:
    """Mean 2D distance between registered landmark vertices and their image landmarks"""
    ids = landmarks.edge_vertices
    keep = np.ones(len(ids), dtype=bool) if eye_vertices is None else np.isin(ids, eye_vertices)
    if not keep.any():
        raise RegistrationError("no edge landmarks on the requested vertices")
    xy = registered.vertices[ids[keep], :2]
    return float(np.linalg.norm(xy - landmarks.edge_points[keep], axis=1).mean())


# ---- solver ----


class _AffineSystem:
    """Sparse pieces of the per-column normal equations in normalised coordinates"""

    def __init__(self, vertices: np.ndarray, edges: np.ndarray, gamma: float):
        n = len(vertices)
        self.n = n
        homogeneous = np.column_stack([vertices, np.ones(n)])
        rows = np.repeat(np.arange(n), 4)
        cols = np.arange(4 * n)
        self.D = sp.csr_matrix((homogeneous.ravel(), (rows, cols)), shape=(n, 4 * n))

        e = len(edges)
        incidence = sp.csr_matrix(
            (np.concatenate([np.ones(e), -np.ones(e)]), (np.tile(np.arange(e), 2), edges.T.ravel())), shape=(e, n)
        )
        G = sp.diags([1.0, 1.0, 1.0, gamma])
        stiff = sp.kron(incidence, G, format="csr")
        self.stiffness_gram = (stiff.T @ stiff).tocsc()

    def rows(self, ids: np.ndarray) -> sp.csr_matrix:
        return self.D[ids]


def closest_point_targets(current: np.ndarray, nearest_points: np.ndarray, previous_targets: np.ndarray) -> np.ndarray:
    """
    Data target per vertex: its nearest scan point.

    A vertex keeps its previous target (NaN rows have none) when the new one is not closer.
    """
    kept = ~np.isnan(previous_targets[:, 0])
    new_distance = np.linalg.norm(current - nearest_points, axis=1)
    old_closer = kept & (np.linalg.norm(current - np.nan_to_num(previous_targets), axis=1) <= new_distance)
    return np.where(old_closer[:, None], previous_targets, nearest_points)


def _solve(matrix: sp.spmatrix, rhs: np.ndarray, level: int, round_index: int) -> np.ndarray:
    try:
        lu = splu(matrix.tocsc())
        solution = lu.solve(rhs)
    except RuntimeError as e:
        raise RegistrationError(f"singular normal equations at level {level} round {round_index}: {e}")
    if not np.all(np.isfinite(solution)):
        raise RegistrationError(f"non-finite solution at level {level} round {round_index}")
    return solution


def nonrigid_icp(
    template: Mesh,
    frame: RGBDFrame,
    landmarks: LandmarkSet,
    stiffness_schedule: Optional[Sequence[float]] = None,
    weights: Optional[Dict[str, float]] = None,
    contour_band: Optional[np.ndarray] = None,
    settings: Optional[RegistrationConfig] = None,
) -> RegistrationResult:
    """
    Register the template to an RGB-D frame with closest-point, edge-landmark and contour terms.

    Each inner round re-establishes correspondences and solves one sparse linear
    least-squares problem for a 3x4 affine per vertex; stiffness anneals down the schedule.

    Args:
        template: template mesh already placed in the image frame
        frame: RGBDFrame with depth aligned to color
        landmarks: edge landmarks and contour polyline in pixels
        stiffness_schedule: descending positive stiffness weights
        weights: {"w_data", "w_edge", "w_cont"}
        contour_band: template vertices eligible as contour vertices
        settings: RegistrationConfig with gating thresholds and inner round count

    Returns:
        RegistrationResult with the registered mesh, affine field and per-round report
    """
    settings = settings or RegistrationConfig()
    schedule = list(stiffness_schedule if stiffness_schedule is not None else settings.STIFFNESS_SCHEDULE)
    if not schedule or any(s <= 0 for s in schedule):
        raise RegistrationError("stiffness schedule must be a nonempty list of positive values")
    w = {"w_data": settings.W_DATA, "w_edge": settings.W_EDGE, "w_cont": settings.W_CONT}
    w.update(weights or {})
    landmarks.validate_for(template.vertex_count)

    cloud = backproject_depth(frame)
    usable = cloud.has_normal
    lo, hi = template.vertices[:, :2].min(axis=0), template.vertices[:, :2].max(axis=0)
    under_face = usable & np.all((cloud.points[:, :2] >= lo) & (cloud.points[:, :2] <= hi), axis=1)
    if np.count_nonzero(under_face) < 3:
        raise RegistrationError("no valid depth under the face")

    # normalised frame: template centroid and RMS radius
    center = template.vertices.mean(axis=0)
    scale = float(np.sqrt(((template.vertices - center) ** 2).sum(axis=1).mean()))
    vertices = (template.vertices - center) / scale
    scan_points = (cloud.points[usable] - center) / scale
    scan_normals = cloud.normals[usable]
    tree = cKDTree(scan_points)
    edge_targets = (landmarks.edge_points - center[:2]) / scale
    curve = (landmarks.contour - center[:2]) / scale
    norm_landmarks = LandmarkSet(edge_targets, landmarks.edge_vertices, curve)
    gate_distance = settings.GATE_DISTANCE / scale
    gate_cosine = np.cos(np.radians(settings.GATE_ANGLE))

    edges = mesh_edges(template.triangles)
    system = _AffineSystem(vertices, edges, settings.TRANSLATION_WEIGHT)
    n = template.vertex_count
    X = np.zeros((4 * n, 3))
    X[0::4, 0] = X[1::4, 1] = X[2::4, 2] = 1.0
    landmark_rows = system.rows(landmarks.edge_vertices)
    report = RegistrationReport(weights={k: float(v) for k, v in w.items()})

    def field_of(solution: np.ndarray) -> PerVertexAffine:
        return PerVertexAffine(solution.reshape(n, 4, 3).transpose(0, 2, 1))

    for level, stiffness in enumerate(schedule):
        current = system.D @ X
        deformed = template.with_vertices(current)
        contour_ids = np.zeros(0, dtype=np.int64)
        if w["w_cont"] > 0:
            contour_ids = select_contour_vertices(deformed, CameraPose.identity(), contour_band)
        contour_rows = system.rows(contour_ids)
        previous_targets = np.full((n, 3), np.nan)
        previous_active = None

        for round_index in range(settings.INNER_ROUNDS):
            current = system.D @ X
            normals = compute_vertex_normals(template.with_vertices(current), allow_isolated=True).normals
            distance, nearest = tree.query(current)
            agree = np.einsum("nk,nk->n", normals, scan_normals[nearest]) >= gate_cosine
            active = (distance <= gate_distance) & agree

            targets = closest_point_targets(current, scan_points[nearest], previous_targets)
            previous_targets = np.where(active[:, None], targets, np.nan)

            gained = lost = 0
            if previous_active is not None:
                gained = int(np.count_nonzero(active & ~previous_active))
                lost = int(np.count_nonzero(~active & previous_active))
                if gained or lost:
                    logger.info(
                        "gating event level=%d round=%d gained=%d lost=%d active=%d",
                        level, round_index, gained, lost, int(active.sum()),
                    )  # fmt: skip
            gating_event = gained > 0
            previous_active = active

            contour_xy = (contour_rows @ X)[:, :2]
            contour_targets = contour_correspondence(contour_xy, curve) if len(contour_ids) else np.zeros((0, 2))

            data_rows = system.D.multiply(active[:, None].astype(np.float64)).tocsr()
            data_gram = w["w_data"] * (data_rows.T @ data_rows)
            base = stiffness * system.stiffness_gram + data_gram
            landmark_gram = w["w_edge"] * (landmark_rows.T @ landmark_rows) + w["w_cont"] * (
                contour_rows.T @ contour_rows
            )

            solution = np.empty_like(X)
            rhs_data = w["w_data"] * (data_rows.T @ targets)
            rhs_xy = (
                rhs_data[:, :2]
                + w["w_edge"] * (landmark_rows.T @ edge_targets)
                + w["w_cont"] * (contour_rows.T @ contour_targets)
            )
            solution[:, :2] = _solve(base + landmark_gram, rhs_xy, level, round_index)
            solution[:, 2] = _solve(base, rhs_data[:, 2], level, round_index)
            X = solution

            transforms = field_of(X)
            current = system.D @ X
            e_data = float((((current - targets) ** 2).sum(axis=1) * active).sum())
            e_smooth = smoothness_energy(transforms, edges, settings.TRANSLATION_WEIGHT)
            e_edge = edge_energy(transforms, vertices, norm_landmarks)
            e_cont = (
                float(((((contour_rows @ X)[:, :2]) - contour_targets) ** 2).sum()) if len(contour_ids) else 0.0
            )
            energy = w["w_data"] * e_data + stiffness * e_smooth + w["w_edge"] * e_edge + w["w_cont"] * e_cont
            report.iterations.append(
                IterationRecord(
                    level=level,
                    stiffness=float(stiffness),
                    round=round_index,
                    energy=energy,
                    e_data=e_data,
                    e_smooth=e_smooth,
                    e_edge=e_edge,
                    e_cont=e_cont,
                    active_pairs=int(active.sum()),
                    gated_pairs=int(n - active.sum()),
                    gating_event=gating_event,
                )
            )
            report.gating_events += int(gating_event)
            residual = np.linalg.norm(current - targets, axis=1)[active]
            report.mean_residual = float(residual.mean() * scale) if residual.size else 0.0
            logger.debug("level=%d round=%d energy=%.6g active=%d", level, round_index, energy, int(active.sum()))

    # back to the original frame: v' = A v + (s b + c - A c)
    normalized = field_of(X).matrices
    A = normalized[:, :, :3]
    b = normalized[:, :, 3]
    matrices = np.concatenate([A, (scale * b + center - A @ center)[:, :, None]], axis=2)
    transforms = PerVertexAffine(matrices)
    registered = template.with_vertices(system.D @ X * scale + center)
    if len(landmarks.edge_vertices):
        report.eye_landmark_error = eye_landmark_error(registered, landmarks)
    return RegistrationResult(registered=registered, transforms=transforms, report=report)
