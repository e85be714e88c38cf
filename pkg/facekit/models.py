from typing import Dict, List, Optional

from pydantic import BaseModel, field_validator


class FitRecord(BaseModel):
    """Fitted 3DMM for one image: shape coefficients plus weak-perspective camera"""

    alpha_id: List[float]
    alpha_exp: List[float] = []
    f: float
    rotation: List[float]  # 9 entries, row-major
    t3d: List[float]
    beta: Optional[List[float]] = None  # texture coefficients when known

    @field_validator("rotation")
    @classmethod
    def _nine_entries(cls, value):
        if len(value) != 9:
            raise ValueError(f"rotation needs 9 entries, got {len(value)}")
        return value

    @field_validator("t3d")
    @classmethod
    def _three_entries(cls, value):
        if len(value) != 3:
            raise ValueError(f"t3d needs 3 entries, got {len(value)}")
        return value


class EdgeLandmark(BaseModel):
    """2D landmark tied to a template vertex"""

    xy: List[float]
    vid: int


class LandmarkRecord(BaseModel):
    """Landmark file: edge landmarks around eyes/brows/mouth and the face contour polyline"""

    edge: List[EdgeLandmark] = []
    contour: List[List[float]] = []


class IterationRecord(BaseModel):
    """Energies after one inner solve of the non-rigid registration"""

    level: int
    stiffness: float
    round: int
    energy: float
    e_data: float
    e_smooth: float
    e_edge: float
    e_cont: float
    active_pairs: int
    gated_pairs: int
    gating_event: bool = False  # active correspondence set changed before this solve


class RegistrationReport(BaseModel):
    iterations: List[IterationRecord] = []
    gating_events: int = 0
    mean_residual: float = 0.0  # mean distance of active pairs after the last solve
    eye_landmark_error: Optional[float] = None
    weights: Dict[str, float] = {}


class AlignmentRecord(BaseModel):
    """Similarity transform fitted over the reliable correspondence pairs"""

    scale: float
    rotation: List[float]
    translation: List[float]


class EvaluationReport(BaseModel):
    metrics: Dict[str, float] = {}
    spatial_tol: float
    normal_tol: float
    reliable_pairs: int
    total_pairs: int
    interocular_distance: float
    alignment: Optional[AlignmentRecord] = None


class TextureRecord(BaseModel):
    """Fitted texture coefficients and illumination"""

    beta: List[float]
    ambient: List[float]  # diagonal of the ambient matrix
    directional: List[float]
    light: List[float]
    k_s: float
    nu: float
    residual: float
    residual_trace: List[float] = []


class Provenance(BaseModel):
    """Where an augmented sample came from"""

    source_id: str
    kind: str  # "pose" or "shape"
    pitch: float = 0.0
    yaw: float = 0.0
    donor_ids: List[str] = []
    seed: Optional[int] = None


class ArtifactEntry(BaseModel):
    path: str  # relative to the run output directory
    sha256: str
    kind: str


class SampleManifest(BaseModel):
    sample_id: str
    status: str  # "ok" or "error"
    artifacts: List[ArtifactEntry] = []
    error: Optional[str] = None


class Manifest(BaseModel):
    """Every artifact written by a pipeline run with its content hash"""

    seed: int
    samples: List[SampleManifest] = []


class DepthSidecar(BaseModel):
    """Affine mapping of a 16-bit depth PNG back to depth units"""

    width: int
    height: int
    min_depth: float
    max_depth: float
    background: int = 0  # code used for pixels without depth
