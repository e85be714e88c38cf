import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from errors import ModelError
from mesh_core import Mesh
from models import FitRecord

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"MM3D"
REGION_NAMES = ("eyes", "nose", "mouth", "cheek")
ORTHONORMAL_TOL = 1e-9

PathLike = Union[str, Path]


@dataclass(frozen=True)
class TemplateAnnotations:
    """Per-vertex labels that travel with a template topology"""

    regions: np.ndarray  # (N,) index into REGION_NAMES
    face_mask: np.ndarray  # (N,) bool
    contour_band: np.ndarray  # (N,) bool, cheek/jaw band searched for silhouettes
    symmetry: np.ndarray  # (N,) mirror partner of each vertex
    landmarks: Dict[str, np.ndarray] = field(default_factory=dict)  # "left_eye", "right_eye", "mouth"
    outer_eye_corners: Tuple[int, int] = (0, 0)

    def region_mask(self, name: str) -> np.ndarray:
        return self.regions == REGION_NAMES.index(name)

    @property
    def edge_landmark_vertices(self) -> np.ndarray:
        groups = [self.landmarks[k] for k in ("left_eye", "right_eye", "mouth") if k in self.landmarks]
        return np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)

    @property
    def eye_landmark_vertices(self) -> np.ndarray:
        groups = [self.landmarks[k] for k in ("left_eye", "right_eye") if k in self.landmarks]
        return np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class MorphableModel:
    """Linear shape and texture model over a fixed template topology"""

    mean_shape: np.ndarray  # (3N,)
    id_basis: np.ndarray  # (3N, K_id)
    exp_basis: np.ndarray  # (3N, K_exp)
    mean_texture: np.ndarray  # (3N,) RGB in [0, 1]
    tex_basis: np.ndarray  # (3N, K_tex)
    triangles: np.ndarray
    uv: Optional[np.ndarray] = None
    annotations: Optional[TemplateAnnotations] = None

    def __post_init__(self):
        rows = len(self.mean_shape)
        if rows == 0 or rows % 3:
            raise ModelError(f"mean shape length {rows} is not a positive multiple of 3")
        for name in ("id_basis", "exp_basis", "tex_basis"):
            basis = np.asarray(getattr(self, name), dtype=np.float64)
            if basis.ndim != 2 or basis.shape[0] != rows:
                raise ModelError(f"{name} has shape {basis.shape}, expected ({rows}, K)")
            norms = np.linalg.norm(basis, axis=0)
            bad = np.flatnonzero(~np.isfinite(norms) | (norms == 0))
            if bad.size:
                raise ModelError(f"{name} column {int(bad[0])} has zero or non-finite norm")
            object.__setattr__(self, name, basis)
        if len(self.mean_texture) != rows:
            raise ModelError(f"mean texture length {len(self.mean_texture)} != {rows}")

    @property
    def vertex_count(self) -> int:
        return len(self.mean_shape) // 3

    @property
    def id_dims(self) -> int:
        return self.id_basis.shape[1]

    @property
    def exp_dims(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def tex_dims(self) -> int:
        return self.tex_basis.shape[1]

    def template(self) -> Mesh:
        """Mean shape with mean texture as a Mesh"""
        return Mesh(
            vertices=self.mean_shape.reshape(-1, 3),
            triangles=self.triangles,
            uv=self.uv,
            colors=np.clip(self.mean_texture.reshape(-1, 3), 0.0, 1.0),
        )


@dataclass(frozen=True)
class ShapeParams:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray

    def __post_init__(self):
        alpha_id = np.asarray(self.alpha_id, dtype=np.float64).ravel()
        alpha_exp = np.asarray(self.alpha_exp, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(alpha_id)) and np.all(np.isfinite(alpha_exp))):
            raise ModelError("shape parameters must be finite")
        object.__setattr__(self, "alpha_id", alpha_id)
        object.__setattr__(self, "alpha_exp", alpha_exp)

    @classmethod
    def zeros(cls, model: MorphableModel) -> "ShapeParams":
        return cls(np.zeros(model.id_dims), np.zeros(model.exp_dims))


@dataclass(frozen=True)
class CameraPose:
    """Weak-perspective rigid transform v -> f * R @ v + t3d"""

    f: float
    R: np.ndarray
    t3d: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t3d = np.asarray(self.t3d, dtype=np.float64).reshape(3)
        if not np.isfinite(self.f) or self.f <= 0:
            raise ModelError(f"scale f must be positive, got {self.f}")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMAL_TOL or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ModelError("R is not a proper rotation")
        object.__setattr__(self, "f", float(self.f))
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t3d", t3d)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_record(cls, record: FitRecord) -> "CameraPose":
        return cls(record.f, np.asarray(record.rotation).reshape(3, 3), np.asarray(record.t3d))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.f * np.asarray(points, dtype=np.float64) @ self.R.T + self.t3d

    def inverse(self) -> "CameraPose":
        return CameraPose(1.0 / self.f, self.R.T, -(self.R.T @ self.t3d) / self.f)

    def compose(self, inner: "CameraPose") -> "CameraPose":
        """Pose equivalent to applying inner first, then self"""
        return CameraPose(self.f * inner.f, self.R @ inner.R, self.f * self.R @ inner.t3d + self.t3d)


def evaluate_shape(model: MorphableModel, params: ShapeParams) -> Mesh:
    """S = mean + A_id alpha_id + A_exp alpha_exp on the template topology"""
    if len(params.alpha_id) != model.id_dims:
        raise ModelError(f"alpha_id has length {len(params.alpha_id)}, expected {model.id_dims}")
    if len(params.alpha_exp) != model.exp_dims:
        raise ModelError(f"alpha_exp has length {len(params.alpha_exp)}, expected {model.exp_dims}")
    shape = model.mean_shape + model.id_basis @ params.alpha_id + model.exp_basis @ params.alpha_exp
    return Mesh(vertices=shape.reshape(-1, 3), triangles=model.triangles, uv=model.uv)


def fit_shape_params(model: MorphableModel, shape: Mesh) -> ShapeParams:
    """Least-squares identity and expression coefficients of a canonical shape on the model topology"""
    if shape.vertex_count != model.vertex_count:
        raise ModelError(f"shape has {shape.vertex_count} vertices, model has {model.vertex_count}")
    basis = np.hstack([model.id_basis, model.exp_basis])
    coefficients, *_ = np.linalg.lstsq(basis, shape.vertices.ravel() - model.mean_shape, rcond=None)
    return ShapeParams(coefficients[: model.id_dims], coefficients[model.id_dims :])


def evaluate_texture(model: MorphableModel, beta: np.ndarray) -> np.ndarray:
    """Per-vertex albedo T = mean + B beta, shape (N, 3); not clipped"""
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if len(beta) != model.tex_dims:
        raise ModelError(f"beta has length {len(beta)}, expected {model.tex_dims}")
    return (model.mean_texture + model.tex_basis @ beta).reshape(-1, 3)


def rigid_project(mesh: Mesh, pose: CameraPose) -> Mesh:
    return mesh.with_vertices(pose.apply(mesh.vertices))


def fit_rigid(source: np.ndarray, target: np.ndarray, weights: Optional[np.ndarray] = None) -> CameraPose:
    """
    Weighted similarity alignment: argmin over (f, R, t) of sum w_k |f R s_k + t - t_k|^2.

    Closed form from the weighted cross-covariance SVD with reflection correction and
    the variance-ratio scale.

    Args:
        source: (K, 3) points
        target: (K, 3) points
        weights: optional (K,) nonnegative weights

    Returns:
        CameraPose mapping source onto target
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(source) != len(target):
        raise ModelError(f"source has {len(source)} points but target has {len(target)}")
    if weights is None:
        weights = np.ones(len(source))
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if len(weights) != len(source):
        raise ModelError(f"weights have length {len(weights)}, expected {len(source)}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ModelError("weights must be finite and nonnegative")
    if np.count_nonzero(weights) < 3:
        raise ModelError(f"need at least 3 weighted point pairs, got {np.count_nonzero(weights)}")

    w = weights / weights.sum()
    mu_s = w @ source
    mu_t = w @ target
    xs = source - mu_s
    xt = target - mu_t

    # rank check on the weighted source spread
    spread = np.linalg.svd(np.sqrt(w)[:, None] * xs, compute_uv=False)
    if spread[0] <= 0 or spread[1] <= 1e-12 * spread[0]:
        raise ModelError("source points are collinear or coincident; pose is undetermined")

    covariance = (w[:, None] * xt).T @ xs
    U, D, Vt = np.linalg.svd(covariance)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    variance = float(np.sum(w * np.sum(xs**2, axis=1)))
    f = float(np.trace(np.diag(D) @ S) / variance)
    if f <= 0:
        raise ModelError("degenerate alignment: non-positive scale")
    t = mu_t - f * R @ mu_s
    return CameraPose(f, R, t)


def disentangle_rigid(registered: Mesh, template_topology: Mesh) -> Tuple[Mesh, CameraPose]:
    """
    Split a registered mesh into a canonical-pose shape and the pose that places it.

    The pose is fitted in closed form from the template to the registered vertices;
    S* = (1/f) R^T (V - t) is the registered mesh undone by that pose.
    """
    if not registered.same_topology(template_topology):
        raise ModelError(
            f"registered mesh ({registered.vertex_count} vertices) does not share the template topology "
            f"({template_topology.vertex_count} vertices)"
        )
    pose = fit_rigid(template_topology.vertices, registered.vertices)
    canonical = pose.inverse().apply(registered.vertices)
    return registered.with_vertices(canonical), pose


def shape_residual(gt: Mesh, model: MorphableModel, params: ShapeParams) -> np.ndarray:
    """Per-vertex displacement (N, 3) between a ground-truth shape and the model's coarse shape"""
    coarse = evaluate_shape(model, params)
    if gt.vertex_count != coarse.vertex_count:
        raise ModelError(f"ground truth has {gt.vertex_count} vertices, model has {coarse.vertex_count}")
    return gt.vertices - coarse.vertices


def view_rotation(pitch: float, yaw: float) -> np.ndarray:
    """R_y(yaw) @ R_x(pitch), angles in degrees"""
    p, y = np.radians(pitch), np.radians(yaw)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(p), -np.sin(p)], [0.0, np.sin(p), np.cos(p)]])
    ry = np.array([[np.cos(y), 0.0, np.sin(y)], [0.0, 1.0, 0.0], [-np.sin(y), 0.0, np.cos(y)]])
    return ry @ rx


def pose_about(center: np.ndarray, R: np.ndarray) -> CameraPose:
    """Rotation R about a fixed point"""
    center = np.asarray(center, dtype=np.float64)
    return CameraPose(1.0, R, center - R @ center)


def rotation_angle_between(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle in degrees"""
    cosine = (np.trace(np.asarray(R1).T @ np.asarray(R2)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))


def fit_record(params: ShapeParams, pose: CameraPose, beta: Optional[np.ndarray] = None) -> FitRecord:
    return FitRecord(
        alpha_id=params.alpha_id.tolist(),
        alpha_exp=params.alpha_exp.tolist(),
        f=pose.f,
        rotation=pose.R.ravel().tolist(),
        t3d=pose.t3d.tolist(),
        beta=None if beta is None else np.asarray(beta).tolist(),
    )


# ---- synthetic template and model ----


def _ring_vertices(theta, phi, center, radii, count) -> np.ndarray:
    """Up to `count` vertices closest to an ellipse in (azimuth, elevation), ordered by angle"""
    dt = (theta - center[0]) / radii[0]
    dp = (phi - center[1]) / radii[1]
    radius = np.hypot(dt, dp)
    ring = np.flatnonzero(np.abs(radius - 1.0) < 0.35)
    angles = np.arctan2(dp[ring], dt[ring])
    ring = ring[np.argsort(angles, kind="stable")]
    if len(ring) > count:
        ring = ring[np.linspace(0, len(ring) - 1, count).round().astype(int)]
    return ring.astype(np.int64)


def build_template(
    rows: int = 37, cols: int = 45, radii: Tuple[float, float, float] = (75.0, 95.0, 85.0)
) -> Tuple[Mesh, TemplateAnnotations]:
    """
    Partial ellipsoid head facing +z with a mirror-symmetric triangulation.

    Azimuth spans +-110 deg across columns and elevation +-70 deg across rows (top row
    is the forehead). UV follows (azimuth, elevation) with a 5% margin around the chart.
    """
    if rows < 3 or cols < 3:
        raise ModelError(f"template grid {rows}x{cols} is too small")
    if cols % 2 == 0:
        cols += 1
    middle = (cols - 1) // 2
    theta_deg = (np.arange(cols) - middle) * (220.0 / (cols - 1))
    phi_deg = np.linspace(70.0, -70.0, rows)
    tt, pp = np.meshgrid(theta_deg, phi_deg)
    theta, phi = np.radians(tt.ravel()), np.radians(pp.ravel())
    a, b, c = radii

    # features as radial bumps; all symmetric in azimuth
    t_deg, p_deg = tt.ravel(), pp.ravel()
    bump = 18.0 * np.exp(-(t_deg**2 / 90.0 + (p_deg + 2.0) ** 2 / 250.0))
    bump -= 5.0 * np.exp(-((np.abs(t_deg) - 28.0) ** 2 / 70.0 + (p_deg - 16.0) ** 2 / 40.0))
    bump += 3.0 * np.exp(-(t_deg**2 / 260.0 + (p_deg + 34.0) ** 2 / 30.0))
    scale = 1.0 + bump / c

    vertices = np.stack(
        [
            a * scale * np.sin(theta) * np.cos(phi),
            -b * scale * np.sin(phi),
            c * scale * np.cos(theta) * np.cos(phi),
        ],
        axis=1,
    )
    uv = np.stack(
        [
            0.05 + 0.9 * np.tile(np.arange(cols), rows) / (cols - 1),
            0.05 + 0.9 * np.repeat(np.arange(rows), cols) / (rows - 1),
        ],
        axis=1,
    )

    triangles = []
    for r in range(rows - 1):
        for q in range(cols - 1):
            v00, v01 = r * cols + q, r * cols + q + 1
            v10, v11 = (r + 1) * cols + q, (r + 1) * cols + q + 1
            if q < middle:
                triangles += [[v00, v01, v11], [v00, v11, v10]]
            else:
                triangles += [[v00, v01, v10], [v01, v11, v10]]

    grid_r, grid_c = np.divmod(np.arange(rows * cols), cols)
    symmetry = grid_r * cols + (cols - 1 - grid_c)

    abs_t = np.abs(t_deg)
    regions = np.full(rows * cols, REGION_NAMES.index("cheek"))
    regions[(abs_t >= 10.0) & (abs_t <= 50.0) & (p_deg >= 4.0) & (p_deg <= 32.0)] = REGION_NAMES.index("eyes")
    regions[(abs_t < 10.0) & (p_deg >= -22.0) & (p_deg <= 22.0)] = REGION_NAMES.index("nose")
    regions[(abs_t < 30.0) & (p_deg >= -48.0) & (p_deg < -22.0)] = REGION_NAMES.index("mouth")
    face_mask = (abs_t <= 80.0) & (p_deg >= -62.0) & (p_deg <= 52.0)
    contour_band = (abs_t >= 40.0) & (p_deg <= 40.0)

    left_eye = _ring_vertices(t_deg, p_deg, (-28.0, 16.0), (14.0, 8.0), 17)
    right_eye = symmetry[left_eye]
    mouth = _ring_vertices(t_deg, p_deg, (0.0, -34.0), (20.0, 8.0), 20)
    corner = int(left_eye[np.argmin(t_deg[left_eye])])

    mesh = Mesh(vertices=vertices, triangles=np.asarray(triangles), uv=uv)
    annotations = TemplateAnnotations(
        regions=regions,
        face_mask=face_mask,
        contour_band=contour_band,
        symmetry=symmetry,
        landmarks={"left_eye": left_eye, "right_eye": right_eye, "mouth": mouth},
        outer_eye_corners=(corner, int(symmetry[corner])),
    )
    return mesh, annotations


def _smooth_features(uv: np.ndarray) -> np.ndarray:
    u = 2.0 * uv[:, 0] - 1.0
    v = 2.0 * uv[:, 1] - 1.0
    return np.stack(
        [
            np.ones_like(u), u, v, u * u, u * v, v * v,
            np.cos(np.pi * u), np.cos(np.pi * v), np.sin(np.pi * u) * np.sin(np.pi * v),
            np.cos(np.pi * u) * np.cos(np.pi * v), u * v * v, u * u * v,
        ],
        axis=1,
    )  # fmt: skip


def _smooth_basis(rng: np.random.Generator, features: np.ndarray, dims: int, sigma: float) -> np.ndarray:
    """QR-orthonormalised random smooth displacement fields, column k scaled to RMS sigma/sqrt(k+1)"""
    n = len(features)
    raw = np.stack([(features @ rng.normal(size=(features.shape[1], 3))).ravel() for _ in range(dims)], axis=1)
    q, _ = np.linalg.qr(raw)
    scales = sigma * np.sqrt(3 * n) / np.sqrt(np.arange(1, dims + 1))
    return q * scales


def grid_for_vertex_count(vertices: int) -> Tuple[int, int]:
    rows = max(5, int(round(np.sqrt(vertices * 37.0 / 45.0))))
    cols = max(5, int(round(vertices / rows)))
    if cols % 2 == 0:
        cols += 1
    return rows, cols


def synthesize_model(
    seed: int = 0, rows: int = 37, cols: int = 45, id_dims: int = 20, exp_dims: int = 10, tex_dims: int = 10
) -> MorphableModel:
    """Deterministic synthetic morphable model over the ellipsoid-head template"""
    rng = np.random.default_rng(seed)
    mesh, annotations = build_template(rows, cols)
    features = _smooth_features(mesh.uv)

    id_basis = _smooth_basis(rng, features, id_dims, 4.0)
    exp_basis = _smooth_basis(rng, features, exp_dims, 2.0)

    skin = np.array([0.76, 0.58, 0.47])
    mean_texture = np.tile(skin, (mesh.vertex_count, 1))
    mean_texture[annotations.region_mask("mouth")] = [0.70, 0.38, 0.36]
    mean_texture[annotations.region_mask("eyes")] *= 0.8
    tex_basis = _smooth_basis(rng, features, tex_dims, 0.04)

    logger.debug(
        "synthesized model seed=%d vertices=%d id=%d exp=%d tex=%d",
        seed, mesh.vertex_count, id_dims, exp_dims, tex_dims,
    )
    return MorphableModel(
        mean_shape=mesh.vertices.ravel(),
        id_basis=id_basis,
        exp_basis=exp_basis,
        mean_texture=mean_texture.ravel(),
        tex_basis=tex_basis,
        triangles=mesh.triangles,
        uv=mesh.uv,
        annotations=annotations,
    )


# ---- MM3D container ----


def _write_array(chunks: list, array: np.ndarray, dtype: str):
    chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes(order="C"))


def write_model(model: MorphableModel, path: PathLike):
    """
    MM3D container: magic, u32 header (N, K_id, K_exp, K_tex, T, has_uv, has_annotations),
    then f32 little-endian mean/bases, u32 triangles, f32 uv and u32 annotation arrays.
    """
    n = model.vertex_count
    header = (n, model.id_dims, model.exp_dims, model.tex_dims, len(model.triangles),
              int(model.uv is not None), int(model.annotations is not None))  # fmt: skip
    chunks = [MODEL_MAGIC, struct.pack("<7I", *header)]
    for array in (model.mean_shape, model.id_basis, model.exp_basis, model.mean_texture, model.tex_basis):
        _write_array(chunks, array, "<f4")
    _write_array(chunks, model.triangles, "<u4")
    if model.uv is not None:
        _write_array(chunks, model.uv, "<f4")
    if model.annotations is not None:
        ann = model.annotations
        for array in (ann.regions, ann.face_mask, ann.contour_band, ann.symmetry):
            _write_array(chunks, array, "<u4")
        chunks.append(struct.pack("<2I", *ann.outer_eye_corners))
        chunks.append(struct.pack("<I", len(ann.landmarks)))
        for name in sorted(ann.landmarks):
            encoded = name.encode("utf-8")
            ids = ann.landmarks[name]
            chunks.append(struct.pack("<I", len(encoded)) + encoded + struct.pack("<I", len(ids)))
            _write_array(chunks, ids, "<u4")
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, payload: bytes, path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int, dtype: str) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.payload):
            raise ModelError(f"{self.path}: truncated model container at byte {self.offset}")
        array = np.frombuffer(self.payload, dtype=dtype, count=count, offset=self.offset)
        self.offset += size
        return array

    def unpack(self, fmt: str):
        return tuple(int(v) for v in self.take(struct.calcsize(fmt) // 4, "<u4"))


def read_model(path: PathLike) -> MorphableModel:
    payload = Path(path).read_bytes()
    if payload[:4] != MODEL_MAGIC:
        raise ModelError(f"{path}: not a morphable model container (bad magic)")
    reader = _Reader(payload, path)
    reader.offset = 4
    n, k_id, k_exp, k_tex, t, has_uv, has_ann = reader.unpack("<7I")
    rows = 3 * n
    mean_shape = reader.take(rows, "<f4").astype(np.float64)
    id_basis = reader.take(rows * k_id, "<f4").reshape(rows, k_id).astype(np.float64)
    exp_basis = reader.take(rows * k_exp, "<f4").reshape(rows, k_exp).astype(np.float64)
    mean_texture = reader.take(rows, "<f4").astype(np.float64)
    tex_basis = reader.take(rows * k_tex, "<f4").reshape(rows, k_tex).astype(np.float64)
    triangles = reader.take(3 * t, "<u4").reshape(t, 3).astype(np.int64)
    uv = reader.take(2 * n, "<f4").reshape(n, 2).astype(np.float64) if has_uv else None

    annotations = None
    if has_ann:
        regions = reader.take(n, "<u4").astype(np.int64)
        face_mask = reader.take(n, "<u4").astype(bool)
        contour_band = reader.take(n, "<u4").astype(bool)
        symmetry = reader.take(n, "<u4").astype(np.int64)
        corners = reader.unpack("<2I")
        (groups,) = reader.unpack("<I")
        landmarks = {}
        for _ in range(groups):
            (length,) = reader.unpack("<I")
            name = bytes(reader.take(length, "u1")).decode("utf-8")
            (count,) = reader.unpack("<I")
            landmarks[name] = reader.take(count, "<u4").astype(np.int64)
        annotations = TemplateAnnotations(
            regions=regions,
            face_mask=face_mask,
            contour_band=contour_band,
            symmetry=symmetry,
            landmarks=landmarks,
            outer_eye_corners=(corners[0], corners[1]),
        )

    if reader.offset != len(payload):
        raise ModelError(f"{path}: {len(payload) - reader.offset} trailing bytes after model data")
    return MorphableModel(
        mean_shape=mean_shape,
        id_basis=id_basis,
        exp_basis=exp_basis,
        mean_texture=mean_texture,
        tex_basis=tex_basis,
        triangles=triangles,
        uv=uv,
        annotations=annotations,
    )
