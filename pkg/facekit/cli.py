import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from config import RunConfig, load_config, validate_config
from errors import ConfigError, FacekitError
from fixtures import generate_fixtures, load_donors, load_sample, write_json
from losses_metrics import normalize_vgd_weights, psd_distance, psd_views, vgd_weights
from mesh_core import Mesh, read_obj, write_obj
from models import FitRecord, LandmarkRecord
from morphable_model import disentangle_rigid, grid_for_vertex_count, synthesize_model, write_model
from multiview import STANDARD_VIEWS, STUDY_VIEWS
from pipeline import (
    MANIFEST_NAME,
    ArtifactLog,
    disentangle_stage,
    eval_stage,
    load_run_donors,
    load_run_model,
    place_fit,
    pose_stage,
    prepare_augmentation,
    register_stage,
    run_pipeline,
    shape_stage,
    views_stage,
)
from rasterizer import read_depth_png, read_png, write_png
from registration import LandmarkSet, RGBDFrame, depth_to_mesh, nonrigid_icp

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


def configure_logging(level: str = "INFO"):
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level '{level}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)


def float_list(text: str) -> List[float]:
    """'15,30,45' -> [15.0, 30.0, 45.0]; an empty string is an empty list"""
    return [float(v) for v in text.split(",") if v.strip()]


def name_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _run_config(args) -> RunConfig:
    run_config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        run_config.SEED = args.seed
    if getattr(args, "workers", None) is not None:
        run_config.WORKERS = args.workers
    if getattr(args, "model", None):
        run_config.paths.MODEL = args.model
    if args.command == "pipeline":
        if args.inputs:
            run_config.paths.INPUTS = args.inputs
        if args.donors:
            run_config.paths.DONORS = args.donors
        if args.out:
            run_config.paths.OUTPUT_DIR = args.out
    if args.command == "augment":
        settings = run_config.augmentation
        if args.yaws is not None:
            settings.YAWS = args.yaws
        if args.pitches is not None:
            settings.PITCHES = args.pitches
        if args.count is not None:
            settings.SHAPE_COUNT = args.count
    validate_config(run_config)
    return run_config


def _output(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_model_synth(args, run_config: RunConfig) -> int:
    kwargs = {}
    if args.vertices:
        kwargs["rows"], kwargs["cols"] = grid_for_vertex_count(args.vertices)
    if args.id_dims:
        kwargs["id_dims"] = args.id_dims
    model = synthesize_model(run_config.SEED, **kwargs)
    out = _output(args.out)
    write_model(model, out / "model.mm3d")
    write_obj(model.template(), out / "template.obj")
    logger.info("model vertices=%d id=%d exp=%d tex=%d", model.vertex_count, model.id_dims, model.exp_dims,
                model.tex_dims)  # fmt: skip
    return EXIT_OK


def read_frame(rgbd: str) -> RGBDFrame:
    """'color.png,depth.png' -> RGBDFrame; the depth sidecar is used when present"""
    paths = name_list(rgbd)
    if len(paths) != 2:
        raise ConfigError(f"--rgbd expects 'color.png,depth.png', got '{rgbd}'")
    depth, valid = read_depth_png(paths[1])
    return RGBDFrame(color=read_png(paths[0])[..., :3], depth=depth, valid=valid)


def read_landmarks(path: str) -> LandmarkSet:
    return LandmarkSet.from_record(LandmarkRecord.model_validate_json(Path(path).read_text(encoding="utf-8")))


def cmd_register(args, run_config: RunConfig) -> int:
    model = load_run_model(run_config.paths.MODEL, run_config.SEED)
    if args.sample:
        out = _output(args.out)
        artifacts = ArtifactLog(out)
        placed, registered = register_stage(load_sample(args.sample), model, run_config, out, artifacts)
        disentangle_stage(registered, placed, model, out, artifacts)
        return EXIT_OK
    if not (args.template and args.rgbd and args.landmarks):
        raise ConfigError("register needs --sample, or --template with --rgbd and --landmarks")

    template = read_obj(args.template)
    band = model.annotations.contour_band if template.vertex_count == model.vertex_count else None
    result = nonrigid_icp(
        template,
        read_frame(args.rgbd),
        read_landmarks(args.landmarks),
        contour_band=band,
        settings=run_config.registration,
    )
    out = Path(args.out)
    if out.suffix.lower() != ".obj":
        out = _output(out) / "registered.obj"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = Path(args.report) if args.report else out.with_name("report.json")
    write_obj(result.registered, out)
    write_json(report, result.report)
    logger.info("registered %s to %s, report %s", args.template, out, report)
    return EXIT_OK


def donors_from(names: Sequence[str]) -> Dict[str, Mesh]:
    """Donor OBJ files, or folders of them"""
    paths = []
    for name in names:
        path = Path(name)
        paths.extend(sorted(path.glob("*.obj")) if path.is_dir() else [path])
    if not paths:
        raise ConfigError(f"no donor OBJs in {', '.join(names)}")
    return load_donors(paths)


def cmd_augment(args, run_config: RunConfig) -> int:
    model = load_run_model(run_config.paths.MODEL, run_config.SEED)
    sample = load_sample(args.sample)
    out = _output(args.out or Path(run_config.paths.OUTPUT_DIR) / sample.sample_id)
    artifacts = ArtifactLog(out)
    if args.registered:
        registered = read_obj(args.registered)
    else:
        _, registered = register_stage(sample, model, run_config, out, artifacts)
    inputs = prepare_augmentation(sample.frame, registered, model, run_config.augmentation, out, artifacts)
    if args.kind == "pose":
        pose_stage(sample, registered, model, inputs, run_config, out, artifacts)
    else:
        donors = donors_from(args.donor_list) if args.donor_list else load_run_donors(run_config, model)
        _, pose = disentangle_rigid(registered, model.template())
        shape_stage(sample, registered, pose, model, donors, inputs, run_config, 0, out, artifacts)
    logger.info("augment %s wrote %d files to %s", args.kind, len(artifacts.entries), out)
    return EXIT_OK


def cmd_synth_views(args, run_config: RunConfig) -> int:
    model = load_run_model(run_config.paths.MODEL, run_config.SEED)
    image = read_png(args.image)[..., :3]
    if args.fit:
        fitted = place_fit(FitRecord.model_validate_json(Path(args.fit).read_text(encoding="utf-8")), model)
    elif args.fitted:
        fitted = read_obj(args.fitted)
    else:
        raise ConfigError("synth-views needs --fit or --fitted")
    settings = run_config.multiview
    settings.VIEWS = list(STUDY_VIEWS if args.views == 7 else STANDARD_VIEWS)
    if args.anchor_spacing:
        settings.ANCHOR_SPACING = args.anchor_spacing
    out = _output(args.out)
    views_stage(image, fitted, model, settings, out, ArtifactLog(out))
    return EXIT_OK


def cmd_loss(args, run_config: RunConfig) -> int:
    output = read_obj(args.output)
    gt = read_obj(args.gt)
    render = run_config.render
    views = psd_views(render.PSD_VIEWS)
    if args.kind == "psd":
        total, rasters = psd_distance(output, gt, views, render.PSD_WIDTH, render.PSD_HEIGHT)
        if args.out:
            out = _output(args.out)
            for k, raster in enumerate(rasters):
                write_png(raster, out / f"error_{k}.png")
        print(f"{total:.10g}")
        return EXIT_OK
    weights = normalize_vgd_weights(vgd_weights(output, gt, views, render.PSD_WIDTH, render.PSD_HEIGHT))
    if args.out:
        weights.write(args.out)
    print(f"{float(weights.weights.sum()):.10g}")
    return EXIT_OK


def _scan(args) -> Mesh:
    if args.scan:
        return read_obj(args.scan)
    if args.sample:
        return depth_to_mesh(load_sample(args.sample).frame)
    raise ConfigError("eval needs --scan or --sample")


def cmd_eval(args, run_config: RunConfig) -> int:
    model = load_run_model(run_config.paths.MODEL, run_config.SEED)
    scan = _scan(args)
    if args.report:
        path = Path(args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
    elif args.out:
        path = _output(args.out) / "metrics.json"
    else:
        raise ConfigError("eval needs --report or --out")
    report = eval_stage(
        read_obj(args.recon), scan, read_obj(args.registered), model, run_config.metrics, path, metrics=args.metric
    )
    for name, value in report.metrics.items():
        print(f"{name}={value:.10g}")
    return EXIT_OK


def cmd_pipeline(args, run_config: RunConfig) -> int:
    status, out = run_pipeline(run_config)
    logger.info("manifest written to %s", out / MANIFEST_NAME)
    return status


def cmd_fixtures(args, run_config: RunConfig) -> int:
    generate_fixtures(run_config.SEED, args.out, samples=args.samples, size=args.size)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facekit", description="3D face reconstruction data toolkit")
    parser.add_argument("--config", default=None, help="TOML run configuration")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    commands = parser.add_subparsers(dest="command", required=True)

    model = commands.add_parser("model", help="morphable model utilities")
    model_commands = model.add_subparsers(dest="action", required=True)
    synth = model_commands.add_parser("synth", help="write the synthetic model and its template")
    synth.add_argument("--seed", type=int, default=None)
    synth.add_argument("--vertices", type=int, default=None, help="approximate template vertex count")
    synth.add_argument("--id-dims", type=int, default=None, help="identity basis size")
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=cmd_model_synth)

    register = commands.add_parser("register", help="register the template to one RGB-D frame")
    register.add_argument("--sample", default=None, help="sample folder; the template is its placed 3DMM fit")
    register.add_argument("--template", default=None, help="template OBJ already placed in the image frame")
    register.add_argument("--rgbd", default=None, help="color.png,depth.png")
    register.add_argument("--landmarks", default=None, help="landmark JSON")
    register.add_argument("--report", default=None, help="registration report JSON, beside --out when omitted")
    register.add_argument("--model", default=None, help="model file, synthetic model when omitted")
    register.add_argument("--out", required=True, help="registered OBJ, or a folder for sample mode")
    register.set_defaults(handler=cmd_register)

    augment = commands.add_parser("augment", help="pose or shape augmentation of one sample")
    augment.add_argument("kind", choices=["pose", "shape"])
    augment.add_argument("--in", "--sample", dest="sample", required=True, help="sample folder")
    augment.add_argument("--registered", default=None, help="registered.obj; registered on the fly when omitted")
    augment.add_argument("--yaws", type=float_list, default=None, help="comma-separated yaw angles in degrees")
    augment.add_argument("--pitches", type=float_list, default=None, help="comma-separated pitch angles in degrees")
    augment.add_argument("--count", type=int, default=None, help="shape transforms per sample")
    augment.add_argument("--donors", dest="donor_list", type=name_list, default=None,
                         help="comma-separated donor OBJs or folders of them")  # fmt: skip
    augment.add_argument("--model", default=None)
    augment.add_argument("--out", default=None, help="output folder, <output_dir>/<sample id> when omitted")
    augment.set_defaults(handler=cmd_augment)

    views = commands.add_parser("synth-views", help="virtual multiview images of a fitted face")
    views.add_argument("--image", required=True)
    views.add_argument("--fit", default=None, help="fitted 3DMM JSON (coefficients and camera)")
    views.add_argument("--fitted", default=None, help="fitted face OBJ in image coordinates")
    views.add_argument("--views", type=int, choices=[5, 7], default=5, help="view battery size")
    views.add_argument("--anchor-spacing", type=int, default=None, help="background anchor step in pixels")
    views.add_argument("--model", default=None)
    views.add_argument("--out", required=True)
    views.set_defaults(handler=cmd_synth_views)

    loss = commands.add_parser("loss", help="plaster-sculpture distance or visual-guided weights")
    loss.add_argument("kind", choices=["psd", "vgd"])
    loss.add_argument("--output", required=True, help="reconstructed mesh OBJ")
    loss.add_argument("--gt", required=True, help="ground-truth mesh OBJ on the same topology")
    loss.add_argument("--out", "--weights-out", dest="out", default=None,
                      help="vgd: vertex weight map file; psd: folder for the per-view error rasters")  # fmt: skip
    loss.set_defaults(handler=cmd_loss)

    evaluate = commands.add_parser("eval", help="NME and DACE of a reconstruction against a scan")
    evaluate.add_argument("--recon", required=True, help="reconstruction OBJ")
    evaluate.add_argument("--gt", "--registered", dest="registered", required=True,
                          help="registered ground-truth OBJ")  # fmt: skip
    evaluate.add_argument("--scan", default=None, help="scan OBJ")
    evaluate.add_argument("--sample", default=None, help="sample folder whose depth map is the scan")
    evaluate.add_argument("--metric", type=name_list, default=["nme", "dace"], help="comma-separated: nme,dace")
    evaluate.add_argument("--report", default=None, help="report JSON")
    evaluate.add_argument("--model", default=None)
    evaluate.add_argument("--out", default=None, help="folder for metrics.json when --report is omitted")
    evaluate.set_defaults(handler=cmd_eval)

    run = commands.add_parser("pipeline", help="every stage on every sample of an input folder")
    run.add_argument("--inputs", default=None, help="folder of sample folders")
    run.add_argument("--model", default=None)
    run.add_argument("--donors", default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--workers", type=int, default=None)
    run.set_defaults(handler=cmd_pipeline)

    fixtures = commands.add_parser("fixtures", help="deterministic synthetic data set")
    fixtures.add_argument("--seed", type=int, default=None)
    fixtures.add_argument("--out", required=True)
    fixtures.add_argument("--samples", type=int, default=1)
    fixtures.add_argument("--size", type=int, default=256, help="image width and height")
    fixtures.set_defaults(handler=cmd_fixtures)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map errors to exit codes 0, 1 and 2"""
    args = build_parser().parse_args(argv)
    try:
        run_config = _run_config(args)
        configure_logging(args.log_level or run_config.LOG_LEVEL)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.handler(args, run_config)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except (FacekitError, OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
