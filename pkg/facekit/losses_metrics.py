import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from errors import MetricError, ModelError
from mesh_core import Mesh, compute_vertex_normals
from models import AlignmentRecord, EvaluationReport
from morphable_model import CameraPose, fit_rigid, view_rotation
from rasterizer import Framing, VertexWeightMap, inverse_render, render_plaster
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

PSD_VIEWS: List[Tuple[float, float]] = [(0.0, 0.0), (0.0, 90.0), (0.0, -90.0), (30.0, 0.0), (-30.0, 0.0)]
YAW_INTERVALS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))


@dataclass
class CorrespondenceSet:
    """Template vertex k paired with scan vertex k_t, with the reliability decision per pair"""

    pairs: np.ndarray  # (K, 2) template index, scan index
    reliable: np.ndarray  # (K,) bool
    distances: np.ndarray  # (K,) mm
    angles: np.ndarray  # (K,) degrees between normals

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.reliable = np.asarray(self.reliable, dtype=bool).ravel()
        if len(self.reliable) != len(self.pairs):
            raise MetricError(f"{len(self.reliable)} reliability flags for {len(self.pairs)} pairs")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def reliable_count(self) -> int:
        return int(self.reliable.sum())

    def validate_for(self, template_count: int, scan_count: int):
        if len(self.pairs) and (self.pairs[:, 0].max() >= template_count or self.pairs[:, 1].max() >= scan_count):
            raise MetricError(
                f"correspondences reference vertices beyond ({template_count}, {scan_count}) mesh sizes"
            )


# ---- losses ----


def _check_delta(gt: Mesh, coarse: Mesh, delta: np.ndarray, weights: Optional[VertexWeightMap]) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64).reshape(-1, 3)
    if gt.vertex_count != coarse.vertex_count or len(delta) != gt.vertex_count:
        raise MetricError(
            f"gt has {gt.vertex_count} vertices, coarse {coarse.vertex_count}, delta {len(delta)}"
        )
    if weights is not None and len(weights) != gt.vertex_count:
        raise MetricError(f"{len(weights)} weights for {gt.vertex_count} vertices")
    return delta


def loss_mse(gt: Mesh, coarse: Mesh, delta: np.ndarray, weights: Optional[VertexWeightMap] = None) -> float:
    """Sum over vertices of w_k |gt_k - coarse_k - delta_k|^2; w = 1 without weights"""
    delta = _check_delta(gt, coarse, delta, weights)
    squared = np.sum((gt.vertices - coarse.vertices - delta) ** 2, axis=1)
    if weights is not None:
        squared = weights.weights * squared
    return float(np.sum(squared))


def loss_mse_gradient(
    gt: Mesh, coarse: Mesh, delta: np.ndarray, weights: Optional[VertexWeightMap] = None
) -> np.ndarray:
    """d loss_mse / d delta = 2 w (coarse + delta - gt)"""
    delta = _check_delta(gt, coarse, delta, weights)
    gradient = 2.0 * (coarse.vertices + delta - gt.vertices)
    if weights is not None:
        gradient = weights.weights[:, None] * gradient
    return gradient


# ---- plaster sculpture descriptor ----


def psd_views(views: Sequence[Tuple[float, float]] = PSD_VIEWS) -> List[np.ndarray]:
    """Rotation matrices for (pitch, yaw) pairs in degrees"""
    return [view_rotation(pitch, yaw) for pitch, yaw in views]


def _plaster_pairs(output: Mesh, gt: Mesh, views, width: int, height: int, framing: Optional[Framing]):
    rotations = psd_views() if views is None else [np.asarray(R, dtype=np.float64) for R in views]
    if framing is None:
        framing = Framing.fit([output, gt], width, height)
    for rotation in rotations:
        rendered = render_plaster(output, rotation, width, height, framing)
        target = render_plaster(gt, rotation, width, height, framing)
        yield rendered, target, np.abs(rendered.color[..., 0] - target.color[..., 0])


def psd_distance(
    output: Mesh,
    gt: Mesh,
    views: Optional[Sequence[np.ndarray]] = None,
    width: int = 256,
    height: int = 256,
    framing: Optional[Framing] = None,
) -> Tuple[float, List[np.ndarray]]:
    """
    Plaster sculpture distance between two shapes.

    Both meshes are rendered white under a head-on light with one shared framing per call;
    the result is the sum over views of the L2 norm of the gray-level difference.

    Args:
        output: reconstructed shape in canonical pose
        gt: ground-truth shape in canonical pose
        views: view rotations, the five standard plaster views when None
        width, height: render size per view
        framing: fixed framing, fitted around both meshes when None

    Returns:
        (distance, per-view absolute-difference rasters)
    """
    total = 0.0
    rasters = []
    for _, _, error in _plaster_pairs(output, gt, views, width, height, framing):
        total += float(np.sqrt(np.sum(error**2)))
        rasters.append(error)
    return total, rasters


def vgd_weights(
    output: Mesh,
    gt: Mesh,
    views: Optional[Sequence[np.ndarray]] = None,
    width: int = 256,
    height: int = 256,
    framing: Optional[Framing] = None,
) -> VertexWeightMap:
    """
    Raw visual-guided vertex weights.

    Each view's plaster error raster is spread back onto the vertices through both the
    output render and the ground-truth render, so vertices the output misplaces out of
    the silhouette still collect the error their ground-truth position sees.
    """
    if output.vertex_count != gt.vertex_count:
        raise MetricError(f"output has {output.vertex_count} vertices, gt {gt.vertex_count}")
    raw = np.zeros(output.vertex_count)
    for rendered, target, error in _plaster_pairs(output, gt, views, width, height, framing):
        raw += inverse_render(rendered, error, output.vertex_count).weights
        raw += inverse_render(target, error, gt.vertex_count).weights
    return VertexWeightMap(raw)


def normalize_vgd_weights(raw: VertexWeightMap, face_mask: Optional[np.ndarray] = None) -> VertexWeightMap:
    """Scale to mean 1 over the face region; all-zero weights become uniform"""
    weights = raw.weights
    mask = np.ones(len(weights), dtype=bool) if face_mask is None else np.asarray(face_mask, dtype=bool)
    if len(mask) != len(weights):
        raise MetricError(f"face mask has {len(mask)} entries for {len(weights)} weights")
    mean = float(weights[mask].mean()) if mask.any() else 0.0
    if mean <= 0.0:
        return VertexWeightMap.uniform(len(weights))
    return VertexWeightMap(weights / mean)


# ---- correspondence and metrics ----


def _normal_angles(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cosine = np.clip(np.sum(a * b, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cosine))


def build_correspondence(
    template: Mesh,
    gt_scan: Mesh,
    registered: Mesh,
    spatial_tol: float = 4.0,
    normal_tol: float = 30.0,
    face_mask: Optional[np.ndarray] = None,
) -> CorrespondenceSet:
    """
    Pair each registered template vertex with its nearest scan vertex.

    A pair is reliable when its distance is below spatial_tol, the angle between the two
    vertex normals is below normal_tol (both strict) and the vertex is in the face mask.
    Scan vertices without a normal never form reliable pairs.
    """
    if not template.same_topology(registered):
        raise MetricError("registered mesh does not share the template topology")
    if gt_scan.vertex_count == 0:
        raise MetricError("scan has no vertices")
    mask = np.ones(template.vertex_count, dtype=bool) if face_mask is None else np.asarray(face_mask, dtype=bool)
    if len(mask) != template.vertex_count:
        raise MetricError(f"face mask has {len(mask)} entries for {template.vertex_count} vertices")

    distances, nearest = cKDTree(gt_scan.vertices).query(registered.vertices)
    registered_normals = compute_vertex_normals(registered, allow_isolated=True).normals
    if gt_scan.triangle_count:
        scan_normals = compute_vertex_normals(gt_scan, allow_isolated=True).normals
    else:
        scan_normals = np.zeros_like(gt_scan.vertices)
    angles = _normal_angles(registered_normals, scan_normals[nearest])
    has_normal = np.linalg.norm(scan_normals[nearest], axis=1) > 0
    reliable = (distances < spatial_tol) & (angles < normal_tol) & has_normal & mask
    logger.debug("correspondence: %d of %d pairs reliable", int(reliable.sum()), len(reliable))
    return CorrespondenceSet(
        pairs=np.column_stack([np.arange(template.vertex_count), nearest]),
        reliable=reliable,
        distances=distances,
        angles=angles,
    )


def align_reconstruction(recon: Mesh, gt: Mesh, corr: CorrespondenceSet) -> CameraPose:
    """Similarity transform taking recon onto gt, fitted over the reliable pairs only"""
    corr.validate_for(recon.vertex_count, gt.vertex_count)
    if corr.reliable_count < 3:
        raise MetricError(f"alignment needs at least 3 reliable pairs, got {corr.reliable_count}")
    pairs = corr.pairs[corr.reliable]
    try:
        return fit_rigid(recon.vertices[pairs[:, 0]], gt.vertices[pairs[:, 1]])
    except ModelError as e:
        raise MetricError(f"cannot align reconstruction: {e}")


def metric_nme(recon: Mesh, gt: Mesh, corr: CorrespondenceSet, d: float, pose: Optional[CameraPose] = None) -> float:
    """Mean aligned distance over all K pairs, divided by d"""
    if d <= 0:
        raise MetricError(f"normalizing distance must be positive, got {d}")
    if pose is None:
        pose = align_reconstruction(recon, gt, corr)
    aligned = pose.apply(recon.vertices[corr.pairs[:, 0]])
    return float(np.mean(np.linalg.norm(aligned - gt.vertices[corr.pairs[:, 1]], axis=1)) / d)


def metric_dace(
    recon: Mesh, gt_scan: Mesh, corr: CorrespondenceSet, d: float, pose: Optional[CameraPose] = None
) -> float:
    """Mean distance from each aligned reliable vertex to its nearest scan vertex, divided by d"""
    if d <= 0:
        raise MetricError(f"normalizing distance must be positive, got {d}")
    if corr.reliable_count == 0:
        raise MetricError("no reliable correspondences; DACE is undefined")
    if pose is None:
        pose = align_reconstruction(recon, gt_scan, corr)
    aligned = pose.apply(recon.vertices[corr.pairs[corr.reliable, 0]])
    distances, _ = cKDTree(gt_scan.vertices).query(aligned)
    return float(np.mean(distances) / d)


def interocular_distance(gt: Mesh, corners: Tuple[int, int]) -> float:
    """Distance between the outer eye corners of the ground truth"""
    a, b = corners
    distance = float(np.linalg.norm(gt.vertices[a] - gt.vertices[b]))
    if distance <= 0:
        raise MetricError(f"outer eye corners {a} and {b} coincide")
    return distance


def evaluate_reconstruction(
    recon: Mesh,
    gt_scan: Mesh,
    registered: Mesh,
    corners: Tuple[int, int],
    face_mask: Optional[np.ndarray] = None,
    spatial_tol: float = 4.0,
    normal_tol: float = 30.0,
    metrics: Sequence[str] = ("nme", "dace"),
) -> EvaluationReport:
    """
    Metrics of a reconstruction against a scan and its registered ground truth.

    The interocular normalizer is measured on the registered ground truth.
    """
    unknown = sorted(set(metrics) - {"nme", "dace"})
    if unknown:
        raise MetricError(f"unknown metrics {unknown}")
    corr = build_correspondence(recon, gt_scan, registered, spatial_tol, normal_tol, face_mask)
    d = interocular_distance(registered, corners)
    pose = align_reconstruction(recon, gt_scan, corr)
    values: Dict[str, float] = {}
    if "nme" in metrics:
        values["nme"] = metric_nme(recon, gt_scan, corr, d, pose)
    if "dace" in metrics:
        values["dace"] = metric_dace(recon, gt_scan, corr, d, pose)
    return EvaluationReport(
        metrics=values,
        spatial_tol=spatial_tol,
        normal_tol=normal_tol,
        reliable_pairs=corr.reliable_count,
        total_pairs=len(corr),
        interocular_distance=d,
        alignment=AlignmentRecord(scale=pose.f, rotation=pose.R.ravel().tolist(), translation=pose.t3d.tolist()),
    )


# ---- reporting ----


def cumulative_error_distribution(
    errors: Sequence[float], thresholds: Optional[Sequence[float]] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Fraction of samples whose error is at most each threshold"""
    errors = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if thresholds is None:
        upper = errors[-1] if len(errors) else 1.0
        thresholds = np.linspace(0.0, upper, 101)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if len(errors) == 0:
        return thresholds, np.zeros(len(thresholds))
    return thresholds, np.searchsorted(errors, thresholds, side="right") / len(errors)


def summarize_by_yaw(errors: Sequence[float], yaws: Sequence[float]) -> Dict[str, float]:
    """Mean error per |yaw| interval [0,30), [30,60), [60,90]; NaN for empty intervals"""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    yaws = np.abs(np.asarray(yaws, dtype=np.float64).ravel())
    if len(errors) != len(yaws):
        raise MetricError(f"{len(errors)} errors for {len(yaws)} yaw angles")
    summary = {}
    for low, high in YAW_INTERVALS:
        if high == YAW_INTERVALS[-1][1]:
            selected = (yaws >= low) & (yaws <= high)
            label = f"[{low:g},{high:g}]"
        else:
            selected = (yaws >= low) & (yaws < high)
            label = f"[{low:g},{high:g})"
        summary[label] = float(errors[selected].mean()) if selected.any() else float("nan")
    summary["all"] = float(errors.mean()) if len(errors) else float("nan")
    return summary
