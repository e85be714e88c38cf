class FacekitError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(FacekitError):
    """Invalid or incomplete run configuration"""


class MeshError(FacekitError):
    """Malformed mesh, UV map or mesh file"""


class ModelError(FacekitError):
    """Morphable model or rigid fitting failure"""


class RenderError(FacekitError):
    """Invalid rasterizer input"""


class MultiviewError(FacekitError):
    """Image mesh construction or view synthesis failure"""


class RegistrationError(FacekitError):
    """Non-rigid registration failure"""


class AugmentationError(FacekitError):
    """Depth completion, texture fitting or shape transformation failure"""


class MetricError(FacekitError):
    """Loss or metric evaluation failure"""
