import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from errors import RenderError
from mesh_core import Mesh, compute_vertex_normals
from models import DepthSidecar
from morphable_model import CameraPose
from PIL import Image

logger = logging.getLogger(__name__)

SENTINEL_BACKGROUND = -1
DEGENERATE_AREA = 1e-14  # twice the projected area, pixels^2

PathLike = Union[str, Path]


@dataclass
class PixelVertexTrace:
    """Foreground pixels with the vertices and barycentric weights that produced them"""

    pixels: np.ndarray  # (P, 2) row, column
    vertices: np.ndarray  # (P, 3) vertex indices
    weights: np.ndarray  # (P, 3) barycentric weights

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class RenderBuffer:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), -inf on background
    tri_index: np.ndarray  # (H, W), SENTINEL_BACKGROUND on background
    bary: np.ndarray  # (H, W, 3) weights in the mesh's own triangle vertex order
    triangles: np.ndarray  # (T, 3) triangle list the indices refer to

    @classmethod
    def empty(cls, width: int, height: int, triangles: Optional[np.ndarray] = None) -> "RenderBuffer":
        return cls(
            color=np.zeros((height, width, 3)),
            depth=np.full((height, width), -np.inf),
            tri_index=np.full((height, width), SENTINEL_BACKGROUND, dtype=np.int64),
            bary=np.zeros((height, width, 3)),
            triangles=np.zeros((0, 3), dtype=np.int64) if triangles is None else triangles,
        )

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def foreground(self) -> np.ndarray:
        return self.tri_index != SENTINEL_BACKGROUND

    def trace(self) -> PixelVertexTrace:
        rows, cols = np.nonzero(self.foreground)
        tris = self.tri_index[rows, cols]
        return PixelVertexTrace(
            pixels=np.stack([rows, cols], axis=1),
            vertices=self.triangles[tris],
            weights=self.bary[rows, cols],
        )

    def interpolate(self, attributes: np.ndarray, background: float = 0.0) -> np.ndarray:
        """Barycentric interpolation of per-vertex attributes (N, C) over the buffer"""
        attributes = np.asarray(attributes, dtype=np.float64)
        out = np.full((self.height, self.width) + attributes.shape[1:], background, dtype=np.float64)
        trace = self.trace()
        if len(trace):
            values = np.einsum("pk,pk...->p...", trace.weights, attributes[trace.vertices])
            out[trace.pixels[:, 0], trace.pixels[:, 1]] = values
        return out


@dataclass
class VertexWeightMap:
    """Nonnegative scalar per vertex"""

    weights: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if weights.size and (np.any(weights < 0) or not np.all(np.isfinite(weights))):
            raise RenderError(f"vertex weights must be finite and nonnegative (min {weights.min()})")
        self.weights = weights

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, count: int) -> "VertexWeightMap":
        return cls(np.ones(count))

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "VertexWeightMap":
        return cls(np.asarray(mask, dtype=np.float64))

    def as_mask(self) -> np.ndarray:
        return self.weights > 0

    def write(self, path: PathLike):
        """u32 count then f32 little-endian weights"""
        Path(path).write_bytes(struct.pack("<I", len(self.weights)) + self.weights.astype("<f4").tobytes())

    @classmethod
    def read(cls, path: PathLike) -> "VertexWeightMap":
        payload = Path(path).read_bytes()
        (count,) = struct.unpack("<I", payload[:4])
        if len(payload) != 4 + 4 * count:
            raise RenderError(f"{path}: expected {count} weights, found {(len(payload) - 4) // 4}")
        return cls(np.frombuffer(payload[4:], dtype="<f4").astype(np.float64))


@dataclass
class PhongParams:
    """Ambient, directional and specular terms of the Phong illumination model"""

    amb: np.ndarray  # 3x3 diagonal
    dir: np.ndarray  # 3x3 diagonal
    l: np.ndarray  # noqa: E741  unit light direction
    k_s: float
    ve: np.ndarray  # unit view direction
    nu: float

    def __post_init__(self):
        self.amb = _as_diagonal(self.amb, "amb")
        self.dir = _as_diagonal(self.dir, "dir")
        self.l = np.asarray(self.l, dtype=np.float64).reshape(3)
        self.ve = np.asarray(self.ve, dtype=np.float64).reshape(3)
        for name in ("l", "ve"):
            length = np.linalg.norm(getattr(self, name))
            if abs(length - 1.0) > 1e-9:
                raise RenderError(f"{name} must be a unit vector, has norm {length}")
        if self.k_s < 0:
            raise RenderError(f"k_s must be >= 0, got {self.k_s}")
        if self.nu < 0:
            raise RenderError(f"shininess nu must be >= 0, got {self.nu}")
        self.k_s = float(self.k_s)
        self.nu = float(self.nu)

    @classmethod
    def ambient_only(cls) -> "PhongParams":
        return cls(np.eye(3), np.zeros((3, 3)), [0.0, 0.0, 1.0], 0.0, [0.0, 0.0, 1.0], 1.0)

    @classmethod
    def frontal(cls, ambient: float = 0.4, directional: float = 0.6) -> "PhongParams":
        return cls(ambient * np.eye(3), directional * np.eye(3), [0.0, 0.0, 1.0], 0.0, [0.0, 0.0, 1.0], 8.0)

    @property
    def amb_diag(self) -> np.ndarray:
        return np.diag(self.amb).copy()

    @property
    def dir_diag(self) -> np.ndarray:
        return np.diag(self.dir).copy()

    def replace(self, **changes) -> "PhongParams":
        values = dict(amb=self.amb, dir=self.dir, l=self.l, k_s=self.k_s, ve=self.ve, nu=self.nu)
        values.update(changes)
        return PhongParams(**values)


def _as_diagonal(value, name: str) -> np.ndarray:
    value = np.asarray(value, dtype=np.float64)
    matrix = np.diag(value) if value.shape == (3,) else value.reshape(3, 3)
    if np.any(matrix != np.diag(np.diag(matrix))):
        raise RenderError(f"{name} must be diagonal")
    if np.any(np.diag(matrix) < 0):
        raise RenderError(f"{name} diagonal entries must be >= 0")
    return matrix


@dataclass(frozen=True)
class Framing:
    """Shared scale and centre that place canonical meshes inside a render window"""

    scale: float
    center: np.ndarray
    width: int
    height: int

    @classmethod
    def fit(cls, meshes: Iterable[Mesh], width: int, height: int, margin: float = 0.08) -> "Framing":
        """Sphere about the centroid of all meshes, so the framing holds for every view rotation"""
        points = np.concatenate([m.vertices for m in meshes])
        if len(points) == 0:
            return cls(1.0, np.zeros(3), width, height)
        center = points.mean(axis=0)
        radius = float(np.linalg.norm(points - center, axis=1).max())
        scale = (1.0 - 2.0 * margin) * min(width, height) / (2.0 * radius) if radius > 0 else 1.0
        return cls(scale, center, width, height)

    def pose_for(self, rotation: np.ndarray) -> CameraPose:
        """Rotate about the framing centre, then scale into the window"""
        image_center = np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0, 0.0])
        return CameraPose(self.scale, rotation, image_center - self.scale * rotation @ self.center)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _top_left(ax, ay, bx, by) -> bool:
    dx, dy = bx - ax, by - ay
    return dy < 0 or (dy == 0 and dx > 0)


def rasterize_points(
    points: np.ndarray, triangles: np.ndarray, texture: Optional[np.ndarray], width: int, height: int
) -> RenderBuffer:
    """
    Z-buffer rasterization of already projected vertices (x, y in pixels, z larger = nearer).

    A pixel is covered when its centre (x=j, y=i) is inside the triangle; centres exactly on
    an edge belong to top-left edges only. Ties in depth keep the earlier triangle.
    """
    if width <= 0 or height <= 0:
        raise RenderError(f"render size must be positive, got {width}x{height}")
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    buffer = RenderBuffer.empty(width, height, triangles)
    depth, tri_index, bary = buffer.depth, buffer.tri_index, buffer.bary

    for t, (i0, i1, i2) in enumerate(triangles):
        p0, p1, p2 = points[i0], points[i1], points[i2]
        area = _edge(p0[0], p0[1], p1[0], p1[1], p2[0], p2[1])
        if abs(area) < DEGENERATE_AREA or not np.isfinite(area):
            continue
        order = (0, 1, 2)
        if area < 0:
            p1, p2 = p2, p1
            order = (0, 2, 1)
            area = -area

        xs = (p0[0], p1[0], p2[0])
        ys = (p0[1], p1[1], p2[1])
        j0, j1 = max(int(np.ceil(min(xs))), 0), min(int(np.floor(max(xs))), width - 1)
        r0, r1 = max(int(np.ceil(min(ys))), 0), min(int(np.floor(max(ys))), height - 1)
        if j0 > j1 or r0 > r1:
            continue

        px, py = np.meshgrid(np.arange(j0, j1 + 1, dtype=np.float64), np.arange(r0, r1 + 1, dtype=np.float64))
        w0 = _edge(p1[0], p1[1], p2[0], p2[1], px, py)
        w1 = _edge(p2[0], p2[1], p0[0], p0[1], px, py)
        w2 = _edge(p0[0], p0[1], p1[0], p1[1], px, py)
        inside = (
            ((w0 > 0) | ((w0 == 0) & _top_left(p1[0], p1[1], p2[0], p2[1])))
            & ((w1 > 0) | ((w1 == 0) & _top_left(p2[0], p2[1], p0[0], p0[1])))
            & ((w2 > 0) | ((w2 == 0) & _top_left(p0[0], p0[1], p1[0], p1[1])))
        )
        if not inside.any():
            continue

        b = np.stack([w0, w1, w2], axis=-1) / area
        z = b[..., 0] * p0[2] + b[..., 1] * p1[2] + b[..., 2] * p2[2]
        window = (slice(r0, r1 + 1), slice(j0, j1 + 1))
        wins = inside & (z > depth[window])
        if not wins.any():
            continue
        depth[window][wins] = z[wins]
        tri_index[window][wins] = t
        # back to the triangle's own vertex order
        bary[window][wins] = b[wins][:, np.argsort(order)]

    if texture is not None and len(triangles):
        buffer.color = buffer.interpolate(texture)
    return buffer


def rasterize(mesh: Mesh, pose: CameraPose, texture: Optional[np.ndarray], width: int, height: int) -> RenderBuffer:
    """
    Render a mesh under a weak-perspective pose.

    Args:
        mesh: Mesh to render
        pose: CameraPose taking model coordinates to pixels (x, y) and depth z
        texture: (N, 3) per-vertex RGB; the mesh's own colors when None
        width, height: image size in pixels

    Returns:
        RenderBuffer with color, depth, triangle index and barycentric weights
    """
    if texture is None:
        texture = mesh.colors if mesh.colors is not None else np.ones((mesh.vertex_count, 3))
    texture = np.asarray(texture, dtype=np.float64)
    if len(texture) != mesh.vertex_count:
        raise RenderError(f"texture has {len(texture)} entries for {mesh.vertex_count} vertices")
    if mesh.vertex_count == 0:
        return RenderBuffer.empty(width, height, mesh.triangles)
    return rasterize_points(pose.apply(mesh.vertices), mesh.triangles, texture, width, height)


def render_plaster(
    mesh: Mesh, view_rotation: np.ndarray, width: int, height: int, framing: Optional[Framing] = None
) -> RenderBuffer:
    """White-albedo Lambert render under a head-on light; vertex colors are ignored"""
    if framing is None:
        framing = Framing.fit([mesh], width, height)
    view_rotation = np.asarray(view_rotation, dtype=np.float64)
    normals = compute_vertex_normals(mesh, allow_isolated=True).normals @ view_rotation.T
    gray = np.maximum(normals[:, 2], 0.0)
    texture = np.repeat(gray[:, None], 3, axis=1)
    return rasterize(mesh, framing.pose_for(view_rotation), texture, width, height)


def inverse_render(buffer: RenderBuffer, pixel_error: np.ndarray, vertex_count: int) -> VertexWeightMap:
    """Spread each foreground pixel's error onto its triangle's vertices by barycentric weight"""
    pixel_error = np.asarray(pixel_error, dtype=np.float64)
    if pixel_error.shape != (buffer.height, buffer.width):
        raise RenderError(f"error map {pixel_error.shape} does not match buffer {(buffer.height, buffer.width)}")
    if np.any(pixel_error < 0):
        raise RenderError("pixel errors must be nonnegative")
    weights = np.zeros(vertex_count)
    trace = buffer.trace()
    if len(trace):
        if trace.vertices.max() >= vertex_count:
            raise RenderError(f"trace references vertex {int(trace.vertices.max())} beyond count {vertex_count}")
        errors = pixel_error[trace.pixels[:, 0], trace.pixels[:, 1]]
        np.add.at(weights, trace.vertices.ravel(), (trace.weights * errors[:, None]).ravel())
    return VertexWeightMap(np.maximum(weights, 0.0))


def phong_shade_normals(normals: np.ndarray, texture: np.ndarray, lighting: PhongParams) -> np.ndarray:
    """C = Amb T + Dir T <n, l> + k_s Dir <r, ve>^nu with r = 2 <n, l> n - l, clamped to [0, 1]"""
    if lighting.nu < 0:
        raise RenderError(f"shininess nu must be >= 0, got {lighting.nu}")
    normals = np.asarray(normals, dtype=np.float64)
    texture = np.asarray(texture, dtype=np.float64)
    n_dot_l = normals @ lighting.l
    reflected = 2.0 * n_dot_l[:, None] * normals - lighting.l
    diffuse = np.maximum(n_dot_l, 0.0)
    specular = lighting.k_s * np.maximum(reflected @ lighting.ve, 0.0) ** lighting.nu
    color = (
        texture * lighting.amb_diag
        + texture * lighting.dir_diag * diffuse[:, None]
        + lighting.dir_diag * specular[:, None]
    )
    return np.clip(color, 0.0, 1.0)


def phong_shade(mesh: Mesh, texture: np.ndarray, lighting: PhongParams) -> np.ndarray:
    texture = np.asarray(texture, dtype=np.float64)
    if len(texture) != mesh.vertex_count:
        raise RenderError(f"texture has {len(texture)} entries for {mesh.vertex_count} vertices")
    normals = compute_vertex_normals(mesh, allow_isolated=True).normals
    return phong_shade_normals(normals, texture, lighting)


# ---- image and buffer export ----


def write_png(image: np.ndarray, path: PathLike):
    """Float RGB/RGBA/gray in [0, 1] to 8-bit PNG"""
    data = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def read_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as image:
        mode = "RGBA" if image.mode in ("RGBA", "LA") else "RGB"
        return np.asarray(image.convert(mode), dtype=np.float64) / 255.0


def write_depth_png(depth: np.ndarray, valid: np.ndarray, path: PathLike) -> DepthSidecar:
    """Affine-map valid depths to 16-bit codes 1..65535 (0 = no depth) and write a JSON sidecar"""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    height, width = depth.shape
    low = float(depth[valid].min()) if valid.any() else 0.0
    high = float(depth[valid].max()) if valid.any() else 0.0
    codes = np.zeros(depth.shape, dtype=np.uint16)
    span = high - low
    if valid.any():
        scaled = (depth[valid] - low) / span * 65534.0 if span > 0 else np.zeros(int(valid.sum()))
        codes[valid] = (np.round(scaled) + 1).astype(np.uint16)
    Image.fromarray(codes).save(path, format="PNG")
    sidecar = DepthSidecar(width=width, height=height, min_depth=low, max_depth=high)
    Path(path).with_suffix(".json").write_text(sidecar.model_dump_json(indent=2), encoding="utf-8")
    return sidecar


def read_depth_png(path: PathLike):
    """Inverse of write_depth_png; returns (depth, valid). Without a sidecar, codes are depths"""
    with Image.open(path) as image:
        codes = np.asarray(image, dtype=np.float64)
    valid = codes > 0
    sidecar_path = Path(path).with_suffix(".json")
    if sidecar_path.exists():
        sidecar = DepthSidecar.model_validate_json(sidecar_path.read_text(encoding="utf-8"))
        depth = sidecar.min_depth + (codes - 1.0) / 65534.0 * (sidecar.max_depth - sidecar.min_depth)
    else:
        depth = codes.copy()
    depth[~valid] = 0.0
    return depth, valid


def export_buffer(buffer: RenderBuffer, out_dir: PathLike, stem: str) -> Sequence[Path]:
    """Color PNG, 16-bit depth PNG with sidecar, raw u32 triangle grid (H, W header)"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    color_path = out / f"{stem}_color.png"
    depth_path = out / f"{stem}_depth.png"
    tri_path = out / f"{stem}_tri.bin"

    write_png(buffer.color, color_path)
    fg = buffer.foreground
    write_depth_png(np.where(fg, buffer.depth, 0.0), fg, depth_path)
    grid = np.where(fg, buffer.tri_index, 0xFFFFFFFF).astype("<u4")
    tri_path.write_bytes(struct.pack("<II", buffer.height, buffer.width) + grid.tobytes(order="C"))
    logger.debug("exported buffer %s (%d foreground pixels)", stem, int(fg.sum()))
    return [color_path, depth_path, depth_path.with_suffix(".json"), tri_path]
