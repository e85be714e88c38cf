import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import scipy.sparse as sp
import trimesh
from errors import MeshError

DEGENERATE_AREA = 1e-12  # triangles below this area (model units^2) are ignored for normals
UV_MAGIC = b"UVDM"

PathLike = Union[str, Path]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Mesh:
    """Topology-fixed triangulated surface with optional per-vertex UV and color"""

    vertices: np.ndarray  # (N, 3) positions in model units
    triangles: np.ndarray  # (T, 3) vertex indices
    uv: Optional[np.ndarray] = None  # (N, 2) in [0, 1]^2
    colors: Optional[np.ndarray] = None  # (N, 3) RGB in [0, 1]

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            bad = int(np.flatnonzero((triangles < 0) | (triangles >= len(vertices)))[0] // 3)
            raise MeshError(f"triangle {bad} references a vertex outside [0, {len(vertices)})")
        object.__setattr__(self, "vertices", _frozen(vertices))
        object.__setattr__(self, "triangles", _frozen(triangles))

        if self.uv is not None:
            uv = np.asarray(self.uv, dtype=np.float64)
            if uv.shape != (len(vertices), 2):
                raise MeshError(f"uv has shape {uv.shape}, expected ({len(vertices)}, 2)")
            object.__setattr__(self, "uv", _frozen(uv))
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64)
            if colors.shape != (len(vertices), 3):
                raise MeshError(f"colors has shape {colors.shape}, expected ({len(vertices)}, 3)")
            object.__setattr__(self, "colors", _frozen(colors))

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        """Same topology, UV and colors with new positions"""
        return Mesh(vertices=vertices, triangles=self.triangles, uv=self.uv, colors=self.colors)

    def with_colors(self, colors: Optional[np.ndarray]) -> "Mesh":
        return Mesh(vertices=self.vertices, triangles=self.triangles, uv=self.uv, colors=colors)

    def same_topology(self, other: "Mesh") -> bool:
        return self.vertex_count == other.vertex_count and np.array_equal(self.triangles, other.triangles)


@dataclass(frozen=True)
class VertexNormalField:
    """One unit normal per vertex"""

    normals: np.ndarray

    def __len__(self) -> int:
        return len(self.normals)


@dataclass(frozen=True)
class UVDisplacementMap:
    """H x W x 3 grid of displacements; grid node (i, j) sits at uv = (j / (W-1), i / (H-1))"""

    grid: np.ndarray = field(repr=False)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if grid.ndim != 3 or grid.shape[2] != 3 or grid.shape[0] < 1 or grid.shape[1] < 1:
            raise MeshError(f"uv map grid must be H x W x 3, got {grid.shape}")
        object.__setattr__(self, "grid", _frozen(grid))

    @property
    def resolution(self):
        return self.grid.shape[0], self.grid.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "UVDisplacementMap":
        return cls(np.zeros((height, width, 3)))


def compute_vertex_normals(mesh: Mesh, allow_isolated: bool = False) -> VertexNormalField:
    """
    Area-weighted vertex normals.

    Args:
        mesh: Mesh with at least one triangle
        allow_isolated: give vertices without a usable triangle a zero vector instead of raising

    Returns:
        VertexNormalField with unit normals
    """
    if mesh.triangle_count == 0:
        raise MeshError("mesh has no triangles")

    v = mesh.vertices
    tri = mesh.triangles
    # cross product length is twice the area, so summing it weights by area
    face_normals = np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]])
    areas = 0.5 * np.linalg.norm(face_normals, axis=1)
    keep = areas >= DEGENERATE_AREA

    accumulated = np.zeros_like(v)
    for corner in range(3):
        np.add.at(accumulated, tri[keep, corner], face_normals[keep])

    lengths = np.linalg.norm(accumulated, axis=1)
    missing = lengths <= 0.0
    if missing.any() and not allow_isolated:
        raise MeshError(f"vertex {int(np.flatnonzero(missing)[0])} has no incident non-degenerate triangle")

    normals = np.zeros_like(accumulated)
    normals[~missing] = accumulated[~missing] / lengths[~missing, None]
    return VertexNormalField(normals)


def sample_uv_map(uv_map: UVDisplacementMap, uv: np.ndarray) -> np.ndarray:
    """Bilinear lookup of one (2,) or many (M, 2) uv coordinates; uv = 1 clamps to the last cell"""
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = uv.reshape(-1, 2)
    if not np.all(np.isfinite(uv)) or uv.min() < 0.0 or uv.max() > 1.0:
        raise MeshError("uv coordinates must lie in [0, 1]^2")

    height, width = uv_map.resolution
    x = uv[:, 0] * (width - 1)
    y = uv[:, 1] * (height - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(width - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]

    g = uv_map.grid
    top = g[y0, x0] * (1.0 - fx) + g[y0, x1] * fx
    bottom = g[y1, x0] * (1.0 - fx) + g[y1, x1] * fx
    result = top * (1.0 - fy) + bottom * fy
    return result[0] if single else result


def apply_displacement(coarse: Mesh, uv_map: UVDisplacementMap) -> Mesh:
    """Add the sampled UV displacement to every vertex, keeping the triangle list"""
    if coarse.uv is None:
        raise MeshError("coarse mesh has no UV coordinates")
    return coarse.with_vertices(coarse.vertices + sample_uv_map(uv_map, coarse.uv))


def mesh_edges(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges (E, 2) with the smaller index first"""
    tri = np.asarray(triangles, dtype=np.int64)
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    return np.unique(edges, axis=0)


def vertex_adjacency(mesh: Mesh) -> sp.csr_matrix:
    """Symmetric 0/1 vertex adjacency matrix"""
    edges = mesh_edges(mesh.triangles)
    n = mesh.vertex_count
    data = np.ones(2 * len(edges))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> Mesh:
    """Unit icosphere centred at the origin with outward winding"""
    sphere = trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius)
    return Mesh(vertices=np.asarray(sphere.vertices), triangles=np.asarray(sphere.faces))


def read_obj(path: PathLike) -> Mesh:
    """
    Read an ASCII OBJ with v / vt / f records.

    Faces may be written as v, v/vt, v//vn or v/vt/vn; polygons are fan-triangulated.
    Texture coordinates are per vertex, so a vertex referenced with two different
    vt indices is rejected.
    """
    positions: List[List[float]] = []
    colors: List[List[float]] = []
    texcoords: List[List[float]] = []
    corners: List[List[tuple]] = []

    with open(path, "r", encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    positions.append([float(p) for p in parts[1:4]])
                    if len(parts) >= 7:
                        colors.append([float(p) for p in parts[4:7]])
                elif tag == "vt":
                    texcoords.append([float(p) for p in parts[1:3]])
                elif tag == "f":
                    face = []
                    for token in parts[1:]:
                        pieces = token.split("/")
                        vi = int(pieces[0])
                        ti = int(pieces[1]) if len(pieces) > 1 and pieces[1] else None
                        face.append((vi, ti))
                    corners.append(face)
            except ValueError as e:
                raise MeshError(f"{path}:{line_number}: cannot parse '{raw.strip()}' ({e})")

    n = len(positions)
    uv = np.full((n, 2), np.nan) if texcoords else None
    triangles = []
    for face in corners:
        resolved = []
        for vi, ti in face:
            vi = vi - 1 if vi > 0 else n + vi
            if not 0 <= vi < n:
                raise MeshError(f"{path}: face references missing vertex {vi + 1}")
            if ti is not None and uv is not None:
                ti = ti - 1 if ti > 0 else len(texcoords) + ti
                coord = texcoords[ti]
                if not np.isnan(uv[vi, 0]) and not np.allclose(uv[vi], coord):
                    raise MeshError(f"{path}: vertex {vi} has conflicting texture coordinates")
                uv[vi] = coord
            resolved.append(vi)
        for k in range(1, len(resolved) - 1):
            triangles.append([resolved[0], resolved[k], resolved[k + 1]])

    if uv is not None and np.isnan(uv).any():
        uv = None
    vertex_colors = np.asarray(colors) if len(colors) == n and n > 0 else None
    return Mesh(
        vertices=np.asarray(positions, dtype=np.float64).reshape(-1, 3),
        triangles=np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
        uv=uv,
        colors=vertex_colors,
    )


def write_obj(mesh: Mesh, path: PathLike):
    """Write v (with colors when present), then vt, then f v/vt records"""
    lines = []
    for k, p in enumerate(mesh.vertices):
        record = f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
        if mesh.colors is not None:
            c = mesh.colors[k]
            record += f" {c[0]:.9g} {c[1]:.9g} {c[2]:.9g}"
        lines.append(record)
    if mesh.uv is not None:
        lines.extend(f"vt {u:.17g} {v:.17g}" for u, v in mesh.uv)
        lines.extend(f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.triangles)
    else:
        lines.extend(f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_uv_map(uv_map: UVDisplacementMap, path: PathLike):
    height, width = uv_map.resolution
    payload = UV_MAGIC + struct.pack("<II", height, width) + uv_map.grid.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(payload)


def read_uv_map(path: PathLike) -> UVDisplacementMap:
    payload = Path(path).read_bytes()
    if payload[:4] != UV_MAGIC:
        raise MeshError(f"{path}: not a UV displacement map (bad magic)")
    height, width = struct.unpack("<II", payload[4:12])
    expected = 12 + height * width * 3 * 4
    if len(payload) != expected:
        raise MeshError(f"{path}: expected {expected} bytes, found {len(payload)}")
    grid = np.frombuffer(payload[12:], dtype="<f4").reshape(height, width, 3)
    return UVDisplacementMap(grid.astype(np.float64))
