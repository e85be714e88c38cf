import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from mesh_core import Mesh, compute_vertex_normals, read_obj, write_obj
from models import FitRecord, LandmarkRecord
from morphable_model import (
    CameraPose,
    MorphableModel,
    ShapeParams,
    evaluate_shape,
    evaluate_texture,
    fit_record,
    synthesize_model,
    view_rotation,
    write_model,
)
from rasterizer import PhongParams, phong_shade, rasterize, read_depth_png, read_png, write_depth_png, write_png
from registration import LandmarkSet, RGBDFrame, order_contour, select_contour_vertices

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IMAGE_SIZE = 256
FACE_DEPTH = 200.0  # z of the head centre; the background wall sits behind it
WALL_DEPTH = 40.0
DONOR_COUNT = 4


@dataclass
class Sample:
    """One input sample as the pipeline reads it from disk"""

    sample_id: str
    frame: RGBDFrame
    fit: FitRecord
    landmarks: LandmarkSet
    gt_shape: Optional[Mesh] = None  # canonical ground truth when the sample is synthetic


@dataclass
class FixtureSet:
    root: Path
    model_path: Path
    template_path: Path
    samples: List[Path] = field(default_factory=list)
    donors: List[Path] = field(default_factory=list)
    golden_path: Optional[Path] = None


def sha256_file(path: PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _personal_detail(mesh: Mesh, face_mask: np.ndarray, rng: np.random.Generator, bumps: int = 6) -> Mesh:
    """Gaussian bumps of +-2.5 mm along the normals, centred on random face vertices"""
    normals = compute_vertex_normals(mesh, allow_isolated=True).normals
    candidates = np.flatnonzero(face_mask)
    centers = mesh.vertices[rng.choice(candidates, size=bumps, replace=False)]
    amplitudes = rng.uniform(-2.5, 2.5, size=bumps)
    offset = np.zeros(mesh.vertex_count)
    for center, amplitude in zip(centers, amplitudes):
        distance2 = np.sum((mesh.vertices - center) ** 2, axis=1)
        offset += amplitude * np.exp(-distance2 / (2.0 * 12.0**2))
    return mesh.with_vertices(mesh.vertices + offset[:, None] * normals)


def _wall(width: int, height: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Color, depth and validity of a background wall with a hollow upper-left corner"""
    rows, cols = np.mgrid[0:height, 0:width]
    color = np.stack(
        [0.35 + 0.2 * cols / (width - 1), np.full(cols.shape, 0.42), 0.45 + 0.2 * rows / (height - 1)], axis=2
    )
    depth = np.full((height, width), WALL_DEPTH)
    valid = ~((rows < height // 4) & (cols < width // 4))
    return color, depth, valid


def render_frame(face: Mesh, texture: np.ndarray, lighting: PhongParams, width: int, height: int) -> RGBDFrame:
    """Orthographic RGB-D frame of a face in image coordinates in front of the wall"""
    colors = phong_shade(face, texture, lighting)
    buffer = rasterize(face, CameraPose.identity(), colors, width, height)
    color, depth, valid = _wall(width, height)
    fg = buffer.foreground
    color = np.where(fg[..., None], buffer.color, color)
    depth = np.where(fg, buffer.depth, depth)
    return RGBDFrame(color=color, depth=depth, valid=valid | fg)


def project_landmarks(shape: Mesh, pose: CameraPose, model: MorphableModel) -> LandmarkSet:
    """Edge landmarks and ordered face contour of a canonical shape seen under pose"""
    annotations = model.annotations
    posed = pose.apply(shape.vertices)
    edge_vertices = annotations.edge_landmark_vertices
    contour_ids = select_contour_vertices(shape, pose, annotations.contour_band)
    contour = posed[contour_ids, :2]
    order = order_contour(contour, posed[annotations.face_mask].mean(axis=0))
    return LandmarkSet(edge_points=posed[edge_vertices, :2], edge_vertices=edge_vertices, contour=contour[order])


def write_json(path: Path, payload):
    if hasattr(payload, "model_dump_json"):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")


def _make_sample(
    model: MorphableModel, rng: np.random.Generator, sample_dir: Path, width: int, height: int
) -> List[Path]:
    annotations = model.annotations
    params = ShapeParams(rng.normal(size=model.id_dims), 0.5 * rng.normal(size=model.exp_dims))
    coarse = evaluate_shape(model, params)
    gt_shape = _personal_detail(coarse, annotations.face_mask, rng)
    beta = rng.normal(size=model.tex_dims)

    rotation = view_rotation(rng.uniform(-5.0, 5.0), rng.uniform(-10.0, 10.0))
    pose = CameraPose(1.0, rotation, [(width - 1) / 2.0, (height - 1) / 2.0, FACE_DEPTH])
    face = gt_shape.with_vertices(pose.apply(gt_shape.vertices))
    frame = render_frame(face, np.clip(evaluate_texture(model, beta), 0.0, 1.0), PhongParams.frontal(), width, height)
    landmarks = project_landmarks(gt_shape, pose, model)

    # the initial fit is the truth seen through a noisy fitter
    noisy = ShapeParams(params.alpha_id + 0.2 * rng.normal(size=model.id_dims), params.alpha_exp)
    fit_pose = CameraPose(
        1.0, view_rotation(rng.normal(scale=1.0), rng.normal(scale=1.0)) @ rotation, pose.t3d + rng.normal(size=3)
    )

    sample_dir.mkdir(parents=True, exist_ok=True)
    write_png(frame.color, sample_dir / "image.png")
    write_depth_png(frame.depth, frame.valid, sample_dir / "depth.png")
    write_json(sample_dir / "fit.json", fit_record(noisy, fit_pose))
    write_json(sample_dir / "landmarks.json", landmarks.to_record())
    write_obj(gt_shape, sample_dir / "gt_shape.obj")
    write_json(sample_dir / "truth.json", fit_record(params, pose, beta))
    return [sample_dir / name for name in ("image.png", "depth.png", "depth.json", "fit.json", "landmarks.json",
                                           "gt_shape.obj", "truth.json")]  # fmt: skip


def generate_fixtures(seed: int, out_dir: PathLike, samples: int = 1, size: int = IMAGE_SIZE) -> FixtureSet:
    """
    Write the deterministic synthetic data set for a seed.

    Args:
        seed: seeds the model and every sample
        out_dir: destination directory, created when missing
        samples: number of RGB-D samples
        size: image width and height in pixels

    Returns:
        FixtureSet with the written paths; golden.json lists every file with its SHA-256
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    model = synthesize_model(seed)

    model_path = root / "model.mm3d"
    template_path = root / "template.obj"
    write_model(model, model_path)
    write_obj(model.template().with_colors(None), template_path)
    written = [model_path, template_path]

    fixture = FixtureSet(root=root, model_path=model_path, template_path=template_path)
    for index in range(samples):
        sample_dir = root / "samples" / f"sample_{index:03d}"
        written += _make_sample(model, rng, sample_dir, size, size)
        fixture.samples.append(sample_dir)

    donor_dir = root / "donors"
    donor_dir.mkdir(exist_ok=True)
    for index in range(DONOR_COUNT):
        donor = evaluate_shape(model, ShapeParams(rng.normal(size=model.id_dims), np.zeros(model.exp_dims)))
        path = donor_dir / f"donor_{index}.obj"
        write_obj(donor, path)
        fixture.donors.append(path)
        written.append(path)

    golden = {str(path.relative_to(root)): sha256_file(path) for path in written}
    fixture.golden_path = root / "golden.json"
    write_json(fixture.golden_path, golden)
    logger.info("fixtures seed=%d samples=%d files=%d dir=%s", seed, samples, len(written), root)
    return fixture


def load_sample(sample_dir: PathLike) -> Sample:
    """Read image.png, depth.png (+ sidecar), fit.json, landmarks.json and gt_shape.obj when present"""
    sample_dir = Path(sample_dir)
    color = read_png(sample_dir / "image.png")[..., :3]
    depth, valid = read_depth_png(sample_dir / "depth.png")
    fit = FitRecord.model_validate_json((sample_dir / "fit.json").read_text(encoding="utf-8"))
    record = LandmarkRecord.model_validate_json((sample_dir / "landmarks.json").read_text(encoding="utf-8"))
    gt_path = sample_dir / "gt_shape.obj"
    return Sample(
        sample_id=sample_dir.name,
        frame=RGBDFrame(color=color, depth=depth, valid=valid),
        fit=fit,
        landmarks=LandmarkSet.from_record(record),
        gt_shape=read_obj(gt_path) if gt_path.exists() else None,
    )


def load_donors(paths) -> Dict[str, Mesh]:
    return {Path(p).stem: read_obj(p) for p in paths}
