import os
import tomllib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from dotenv import load_dotenv
from errors import ConfigError
from pydantic import TypeAdapter, ValidationError

# Load environment variables from .env file
load_dotenv()


@dataclass
class RenderConfig:
    """Rasterizer and plaster-render settings"""

    PSD_WIDTH: int = 256  # PSD/VGD render resolution per view
    PSD_HEIGHT: int = 256
    # (pitch, yaw) in degrees
    PSD_VIEWS: List[Tuple[float, float]] = field(
        default_factory=lambda: [(0.0, 0.0), (0.0, 90.0), (0.0, -90.0), (30.0, 0.0), (-30.0, 0.0)]
    )
    PLASTER_MARGIN: float = 0.08  # fraction of the frame left empty around a plaster render


@dataclass
class MultiviewConfig:
    """Virtual multiview synthesis settings"""

    ANCHOR_SPACING: int = 16  # background anchor grid step in pixels
    VIEWS: List[Tuple[float, float]] = field(
        default_factory=lambda: [(0.0, 0.0), (0.0, 25.0), (0.0, 50.0), (15.0, 0.0), (-25.0, 0.0)]
    )
    UV_WIDTH: int = 128
    UV_HEIGHT: int = 128


@dataclass
class RegistrationConfig:
    """Non-rigid ICP settings"""

    STIFFNESS_SCHEDULE: List[float] = field(default_factory=lambda: [50.0, 20.0, 5.0, 2.0, 1.0])
    INNER_ROUNDS: int = 3  # re-correspondence rounds per stiffness level
    W_DATA: float = 1.0
    W_EDGE: float = 5.0
    W_CONT: float = 2.0
    GATE_DISTANCE: float = 10.0  # mm
    GATE_ANGLE: float = 60.0  # degrees
    TRANSLATION_WEIGHT: float = 1.0  # gamma in the stiffness term


@dataclass
class AugmentationConfig:
    """Pose and shape augmentation settings"""

    ANCHOR_SPACING: int = 16
    SMOOTH_WEIGHT: float = 1.0  # against data weight 1.0
    DATA_WEIGHT: float = 1.0
    OCCLUSION_THRESHOLD: float = 0.17  # source visibility below this is inpainted
    YAWS: List[float] = field(default_factory=lambda: [15.0, 30.0, 45.0, 50.0])
    PITCHES: List[float] = field(default_factory=lambda: [15.0, -25.0])
    SHAPE_COUNT: int = 4
    BLEND_BAND: float = 8.0  # mm, converted to edge hops
    TEXTURE_ITERS: int = 30
    TEXTURE_STEP: float = 0.1
    DEPTH_MODE: str = "anchors"  # or "profiling"


@dataclass
class MetricsConfig:
    """Reliable-correspondence thresholds"""

    SPATIAL_TOL: float = 4.0  # mm
    NORMAL_TOL: float = 30.0  # degrees


@dataclass
class PathsConfig:
    """Input and output locations"""

    TEMPLATE: Optional[str] = None
    MODEL: Optional[str] = None
    INPUTS: Optional[str] = None  # directory of sample folders
    DONORS: Optional[str] = None  # directory of donor OBJs for shape transforms
    OUTPUT_DIR: str = os.getenv("FACEKIT_OUTPUT_DIR", "./facekit_out")


@dataclass
class RunConfig:
    """Configuration settings for a facekit run"""

    render: RenderConfig = field(default_factory=RenderConfig)
    multiview: MultiviewConfig = field(default_factory=MultiviewConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    SEED: int = int(os.getenv("FACEKIT_SEED", "0"))
    WORKERS: int = int(os.getenv("FACEKIT_WORKERS", "1"))
    LOG_LEVEL: str = os.getenv("FACEKIT_LOG_LEVEL", "INFO")


config = RunConfig()

_SECTIONS = {
    "render": RenderConfig,
    "multiview": MultiviewConfig,
    "registration": RegistrationConfig,
    "augmentation": AugmentationConfig,
    "metrics": MetricsConfig,
    "paths": PathsConfig,
}


def _apply_table(target, table: dict, section: str):
    known = {f.name.lower(): f for f in fields(target) if f.name.isupper()}
    for key, value in table.items():
        spec = known.get(key.lower())
        if spec is None:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        try:
            value = TypeAdapter(spec.type).validate_python(value)
        except ValidationError as e:
            expected = getattr(spec.type, "__name__", str(spec.type))
            raise ConfigError(f"[{section}] {key} must be {expected}, got {value!r}") from e
        setattr(target, spec.name, value)


def load_config(path: Optional[str] = None) -> RunConfig:
    """
    Build a RunConfig from defaults, optionally overridden by a TOML file.

    Args:
        path: TOML file with one table per section ([render], [registration], ...)
              and a [run] table for seed, workers and log_level

    Returns:
        Validated RunConfig
    """
    run_config = RunConfig()
    if path is None:
        return run_config

    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(config_path, "rb") as handle:
            document = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}")

    for section, table in document.items():
        if section == "run":
            _apply_table(run_config, table, section)
        elif section in _SECTIONS:
            _apply_table(getattr(run_config, section), table, section)
        else:
            raise ConfigError(f"unknown section [{section}]")

    validate_config(run_config)
    return run_config


def validate_config(run_config: RunConfig):
    """Referenced paths must exist and solver constants must be usable"""
    for name in ("TEMPLATE", "MODEL", "INPUTS", "DONORS"):
        value = getattr(run_config.paths, name)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"paths.{name.lower()} = {value} does not exist")

    schedule = run_config.registration.STIFFNESS_SCHEDULE
    if not schedule or any(s <= 0 for s in schedule):
        raise ConfigError("registration.stiffness_schedule must be a nonempty list of positive values")
    if any(a < b for a, b in zip(schedule, schedule[1:])):
        raise ConfigError("registration.stiffness_schedule must be descending")
    if run_config.WORKERS < 1:
        raise ConfigError(f"run.workers must be >= 1, got {run_config.WORKERS}")
    if run_config.augmentation.DEPTH_MODE not in ("anchors", "profiling"):
        raise ConfigError("augmentation.depth_mode must be 'anchors' or 'profiling'")
