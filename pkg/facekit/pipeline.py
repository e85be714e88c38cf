import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from augmentation import (
    AnchorGraph,
    TextureParams,
    anchor_depths,
    build_anchor_graph,
    densify_depth,
    fit_texture,
    fuse_target_shape,
    pose_schedule,
    rotate_and_render,
    transform_shape,
)
from config import AugmentationConfig, MetricsConfig, MultiviewConfig, RunConfig
from errors import AugmentationError, ConfigError, ModelError
from fixtures import DONOR_COUNT, Sample, load_donors, load_sample, sha256_file, write_json
from losses_metrics import evaluate_reconstruction
from mesh_core import Mesh, write_obj
from models import (
    AlignmentRecord,
    ArtifactEntry,
    EvaluationReport,
    FitRecord,
    Manifest,
    Provenance,
    SampleManifest,
    TextureRecord,
)
from morphable_model import (
    REGION_NAMES,
    CameraPose,
    MorphableModel,
    ShapeParams,
    disentangle_rigid,
    evaluate_shape,
    fit_record,
    fit_shape_params,
    pose_about,
    read_model,
    rigid_project,
    synthesize_model,
    view_rotation,
)
from multiview import build_image_mesh, mirror_register, synthesize_views
from rasterizer import write_depth_png, write_png
from registration import RGBDFrame, depth_to_mesh, nonrigid_icp

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@contextmanager
def stage(name: str, sample_id: str):
    """Log one structured timing line for a pipeline stage"""
    start = time.perf_counter()
    status = "error"
    try:
        yield
        status = "ok"
    finally:
        logger.info(
            "stage=%s sample=%s seconds=%.3f status=%s", name, sample_id, time.perf_counter() - start, status
        )


def view_tag(pitch: float, yaw: float) -> str:
    return f"p{pitch:+.0f}_y{yaw:+.0f}"


@lru_cache(maxsize=4)
def load_run_model(model_path: Optional[str], seed: int) -> MorphableModel:
    """The configured model file, or the synthetic model for the seed"""
    model = read_model(model_path) if model_path else synthesize_model(seed)
    if model.annotations is None:
        raise ModelError(f"model {model_path} carries no template annotations")
    return model


def model_donors(model: MorphableModel, seed: int, count: int = DONOR_COUNT) -> Dict[str, Mesh]:
    """Neutral-expression identities drawn from the model"""
    rng = np.random.default_rng([seed, 1])
    zeros = np.zeros(model.exp_dims)
    return {
        f"model_donor_{k}": evaluate_shape(model, ShapeParams(rng.normal(size=model.id_dims), zeros))
        for k in range(count)
    }


def load_run_donors(run_config: RunConfig, model: MorphableModel) -> Dict[str, Mesh]:
    """Donor OBJs from paths.donors, or identities drawn from the model"""
    if run_config.paths.DONORS:
        return load_donors(sorted(Path(run_config.paths.DONORS).glob("*.obj")))
    return model_donors(model, run_config.SEED)


class ArtifactLog:
    """Collects written files with their hashes, relative to the run output directory"""

    def __init__(self, root: Path):
        self.root = root
        self.entries: List[ArtifactEntry] = []

    def add(self, path: Path, kind: str):
        rel = path.relative_to(self.root).as_posix()
        self.entries.append(ArtifactEntry(path=rel, sha256=sha256_file(path), kind=kind))

    def add_depth(self, depth: np.ndarray, valid: np.ndarray, path: Path, kind: str):
        write_depth_png(depth, valid, path)
        self.add(path, kind)
        self.add(path.with_suffix(".json"), f"{kind}_sidecar")


class FacePipeline:
    """Register, augment, synthesize views for and evaluate every sample of an input folder"""

    def __init__(self, run_config: RunConfig):
        self.config = run_config
        self.output_dir = Path(run_config.paths.OUTPUT_DIR)

    def sample_dirs(self) -> List[Path]:
        inputs = self.config.paths.INPUTS
        if inputs is None:
            raise ConfigError("paths.inputs is not set")
        root = Path(inputs)
        if not root.is_dir():
            raise ConfigError(f"paths.inputs = {inputs} is not a directory")
        return sorted(p for p in root.iterdir() if p.is_dir() and (p / "image.png").exists())

    def run(self) -> Tuple[Manifest, int]:
        """
        Process every sample and write the manifest.

        Returns:
            Tuple of (manifest, exit status); the status is 1 when any sample failed
        """
        dirs = self.sample_dirs()
        self.output_dir.mkdir(parents=True, exist_ok=True)
        jobs = [(index, path, self.config) for index, path in enumerate(dirs)]
        workers = min(self.config.WORKERS, len(jobs))
        if workers > 1:
            # map keeps the input order
            with Pool(workers) as pool:
                results = pool.map(_process_job, jobs)
        else:
            results = [_process_job(job) for job in jobs]

        manifest = Manifest(seed=self.config.SEED, samples=results)
        write_json(self.output_dir / MANIFEST_NAME, manifest)
        failed = [s.sample_id for s in results if s.status != "ok"]
        if failed:
            logger.warning("%d of %d samples failed: %s", len(failed), len(results), ", ".join(failed))
        logger.info("pipeline samples=%d failed=%d dir=%s", len(results), len(failed), self.output_dir)
        return manifest, 1 if failed else 0


def run_pipeline(run_config: RunConfig) -> Tuple[int, Path]:
    """Run every sample of paths.inputs; returns (exit status, output directory)"""
    pipeline = FacePipeline(run_config)
    _, status = pipeline.run()
    return status, pipeline.output_dir


def _process_job(job) -> SampleManifest:
    index, sample_dir, run_config = job
    sample_id = Path(sample_dir).name
    try:
        model = load_run_model(run_config.paths.MODEL, run_config.SEED)
        donors = load_run_donors(run_config, model)
    except Exception as e:
        logger.error("sample %s: cannot load model or donors: %s", sample_id, e)
        return SampleManifest(sample_id=sample_id, status="error", error=str(e))
    return process_sample(sample_dir, model, donors, run_config, index)


def process_sample(
    sample_dir: Path,
    model: MorphableModel,
    donors: Dict[str, Mesh],
    run_config: RunConfig,
    index: int = 0,
) -> SampleManifest:
    """
    Run every stage on one sample folder.

    Args:
        sample_dir: folder with image.png, depth.png, fit.json and landmarks.json
        model: morphable model the fit refers to
        donors: donor shapes on the model topology, keyed by id
        run_config: run settings
        index: position of the sample in the run, seeds its donor choice

    Returns:
        SampleManifest listing the artifacts written; a failing stage ends the sample with status "error"
    """
    sample_id = Path(sample_dir).name
    out = Path(run_config.paths.OUTPUT_DIR) / sample_id
    artifacts = ArtifactLog(Path(run_config.paths.OUTPUT_DIR))
    try:
        with stage("load", sample_id):
            sample = load_sample(sample_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_png(sample.frame.color, out / "image.png")
            artifacts.add(out / "image.png", "image")
        _run_stages(sample, model, donors, run_config, index, out, artifacts)
    except Exception as e:
        logger.error("sample %s failed: %s", sample_id, e)
        return SampleManifest(sample_id=sample_id, status="error", artifacts=artifacts.entries, error=str(e))
    return SampleManifest(sample_id=sample_id, status="ok", artifacts=artifacts.entries)


@dataclass
class AugmentationInputs:
    """Completed depth, anchor graph and fitted texture shared by the augmentation stages"""

    graph: AnchorGraph
    anchor_depths: np.ndarray
    dense_depth: np.ndarray
    tex: TextureParams


def fit_params(fit: FitRecord, model: MorphableModel) -> ShapeParams:
    alpha_exp = fit.alpha_exp or np.zeros(model.exp_dims)
    return ShapeParams(fit.alpha_id, alpha_exp)


def place_fit(fit: FitRecord, model: MorphableModel) -> Mesh:
    """The fitted 3DMM shape in the image frame"""
    return rigid_project(evaluate_shape(model, fit_params(fit, model)), CameraPose.from_record(fit))


def register_stage(
    sample: Sample, model: MorphableModel, run_config: RunConfig, out: Path, artifacts: ArtifactLog
) -> Tuple[Mesh, Mesh]:
    """Place the fitted 3DMM in the frame and register it; returns (placed coarse face, registered face)"""
    placed = place_fit(sample.fit, model)
    result = nonrigid_icp(
        placed,
        sample.frame,
        sample.landmarks,
        contour_band=model.annotations.contour_band,
        settings=run_config.registration,
    )
    write_obj(result.registered, out / "registered.obj")
    write_json(out / "report.json", result.report)
    artifacts.add(out / "registered.obj", "registered")
    artifacts.add(out / "report.json", "registration_report")
    return placed, result.registered


def disentangle_stage(
    registered: Mesh, placed: Mesh, model: MorphableModel, out: Path, artifacts: ArtifactLog
) -> CameraPose:
    gt_shape, pose = disentangle_rigid(registered, model.template())
    # the coarse fit undone by the same pose, so gt_shape - coarse_shape is the personal detail
    coarse = placed.with_vertices(pose.inverse().apply(placed.vertices))
    write_obj(gt_shape, out / "gt_shape.obj")
    write_obj(coarse, out / "coarse_shape.obj")
    write_json(
        out / "pose.json",
        AlignmentRecord(scale=pose.f, rotation=pose.R.ravel().tolist(), translation=pose.t3d.tolist()),
    )
    for name, kind in (("gt_shape.obj", "gt_shape"), ("coarse_shape.obj", "coarse_shape"), ("pose.json", "pose")):
        artifacts.add(out / name, kind)
    return pose


def prepare_augmentation(
    frame: RGBDFrame,
    registered: Mesh,
    model: MorphableModel,
    settings: AugmentationConfig,
    out: Path,
    artifacts: ArtifactLog,
) -> AugmentationInputs:
    """Complete the depth and fit texture and illumination once per sample"""
    graph = build_anchor_graph(frame, registered, settings.ANCHOR_SPACING)
    depths = anchor_depths(graph, registered, settings.DEPTH_MODE, settings.DATA_WEIGHT, settings.SMOOTH_WEIGHT)
    dense = densify_depth(graph, depths, registered, frame.width, frame.height)
    tex = fit_texture(
        frame.color, registered, model, settings.TEXTURE_ITERS, settings.TEXTURE_STEP, settings.OCCLUSION_THRESHOLD
    )
    artifacts.add_depth(dense, np.ones(dense.shape, dtype=bool), out / "dense_depth.png", "dense_depth")
    write_json(
        out / "texture.json",
        TextureRecord(
            beta=tex.beta.tolist(),
            ambient=tex.phong.amb_diag.tolist(),
            directional=tex.phong.dir_diag.tolist(),
            light=tex.phong.l.tolist(),
            k_s=tex.phong.k_s,
            nu=tex.phong.nu,
            residual=tex.residual,
            residual_trace=list(tex.residual_trace),
        ),
    )
    artifacts.add(out / "texture.json", "texture")
    return AugmentationInputs(graph, depths, dense, tex)


def pose_stage(
    sample: Sample,
    registered: Mesh,
    model: MorphableModel,
    inputs: AugmentationInputs,
    run_config: RunConfig,
    out: Path,
    artifacts: ArtifactLog,
):
    settings = run_config.augmentation
    center = registered.vertices[model.annotations.face_mask].mean(axis=0)
    params = fit_params(sample.fit, model)
    camera = CameraPose.from_record(sample.fit)
    for pitch, yaw in pose_schedule(settings.YAWS, settings.PITCHES):
        target = pose_about(center, view_rotation(pitch, yaw))
        view = rotate_and_render(
            sample.frame, registered, inputs.dense_depth, target, inputs.tex, model, settings.OCCLUSION_THRESHOLD
        )
        folder = out / "pose" / view_tag(pitch, yaw)
        folder.mkdir(parents=True, exist_ok=True)
        write_png(view.image, folder / "image.png")
        write_obj(rigid_project(registered, target), folder / "gt_shape.obj")
        write_json(folder / "fit.json", fit_record(params, target.compose(camera), inputs.tex.beta))
        write_json(
            folder / "provenance.json",
            Provenance(source_id=sample.sample_id, kind="pose", pitch=pitch, yaw=yaw, seed=run_config.SEED),
        )
        artifacts.add(folder / "image.png", "pose_image")
        artifacts.add_depth(view.depth, ~view.filled, folder / "depth.png", "pose_depth")
        artifacts.add(folder / "gt_shape.obj", "pose_gt_shape")
        artifacts.add(folder / "fit.json", "pose_fit")
        artifacts.add(folder / "provenance.json", "provenance")


def shape_stage(
    sample: Sample,
    registered: Mesh,
    pose: CameraPose,
    model: MorphableModel,
    donors: Dict[str, Mesh],
    inputs: AugmentationInputs,
    run_config: RunConfig,
    index: int,
    out: Path,
    artifacts: ArtifactLog,
):
    """Shape transforms onto region-wise fusions of randomly drawn donors"""
    if not donors:
        raise AugmentationError("no donor shapes for shape transformation")
    settings = run_config.augmentation
    rng = np.random.default_rng([run_config.SEED, index])
    names = sorted(donors)
    for k in range(settings.SHAPE_COUNT):
        picks = [names[i] for i in rng.integers(len(names), size=len(REGION_NAMES))]
        parts = {region: donors[name] for region, name in zip(REGION_NAMES, picks)}
        fused = fuse_target_shape(parts, model.annotations.regions, settings.BLEND_BAND)
        result = transform_shape(
            sample.frame, registered, rigid_project(fused, pose), inputs.graph, inputs.anchor_depths, inputs.tex
        )
        folder = out / "shape" / f"shape_{k}"
        folder.mkdir(parents=True, exist_ok=True)
        write_png(result.image, folder / "image.png")
        write_obj(result.shape, folder / "gt_shape.obj")
        write_json(folder / "fit.json", fit_record(fit_shape_params(model, fused), pose, inputs.tex.beta))
        write_json(
            folder / "provenance.json",
            Provenance(source_id=sample.sample_id, kind="shape", donor_ids=picks, seed=run_config.SEED),
        )
        artifacts.add(folder / "image.png", "shape_image")
        artifacts.add_depth(result.depth, result.coverage, folder / "depth.png", "shape_depth")
        artifacts.add(folder / "gt_shape.obj", "shape_gt_shape")
        artifacts.add(folder / "fit.json", "shape_fit")
        artifacts.add(folder / "provenance.json", "provenance")


def views_stage(
    image: np.ndarray, fitted: Mesh, model: MorphableModel, settings: MultiviewConfig, out: Path, artifacts: ArtifactLog
):
    image_mesh = build_image_mesh(image, fitted, settings.ANCHOR_SPACING, symmetry=model.annotations.symmetry)
    views = synthesize_views(image_mesh, mirror_register(image_mesh), settings.VIEWS)
    (out / "views").mkdir(parents=True, exist_ok=True)
    for (pitch, yaw), view in views.items():
        path = out / "views" / f"view_{view_tag(pitch, yaw)}.png"
        write_png(view.rgba, path)
        artifacts.add(path, "view")
        lam_path = out / "views" / f"lambda_{view_tag(pitch, yaw)}.png"
        write_png(view.lam, lam_path)
        artifacts.add(lam_path, "view_weights")


def eval_stage(
    recon: Mesh,
    scan: Mesh,
    registered: Mesh,
    model: MorphableModel,
    settings: MetricsConfig,
    path: Path,
    artifacts: Optional[ArtifactLog] = None,
    metrics: Sequence[str] = ("nme", "dace"),
) -> EvaluationReport:
    """Scores a reconstruction against a scan mesh, with the registration as ground truth; writes the report to path"""
    annotations = model.annotations
    report = evaluate_reconstruction(
        recon,
        scan,
        registered,
        annotations.outer_eye_corners,
        annotations.face_mask,
        settings.SPATIAL_TOL,
        settings.NORMAL_TOL,
        metrics,
    )
    write_json(path, report)
    if artifacts is not None:
        artifacts.add(path, "metrics")
    return report


def _run_stages(
    sample: Sample,
    model: MorphableModel,
    donors: Dict[str, Mesh],
    run_config: RunConfig,
    index: int,
    out: Path,
    artifacts: ArtifactLog,
):
    sample_id = sample.sample_id
    with stage("register", sample_id):
        placed, registered = register_stage(sample, model, run_config, out, artifacts)
    with stage("disentangle", sample_id):
        pose = disentangle_stage(registered, placed, model, out, artifacts)
    with stage("augment_pose", sample_id):
        inputs = prepare_augmentation(sample.frame, registered, model, run_config.augmentation, out, artifacts)
        pose_stage(sample, registered, model, inputs, run_config, out, artifacts)
    with stage("augment_shape", sample_id):
        shape_stage(sample, registered, pose, model, donors, inputs, run_config, index, out, artifacts)
    with stage("synth_views", sample_id):
        views_stage(sample.frame.color, registered, model, run_config.multiview, out, artifacts)
    with stage("eval", sample_id):
        scan = depth_to_mesh(sample.frame)
        eval_stage(placed, scan, registered, model, run_config.metrics, out / "metrics.json", artifacts)
