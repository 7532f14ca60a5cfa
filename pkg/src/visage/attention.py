"""Projection of attention maps onto a face mesh.

A transformer's coarse attention grid (7x7 by default) is upsampled
bilinearly to the 112x112 image frame, each mesh triangle collects the
mean map value over the pixels whose centers it covers (projected
frontally, i.e. using the 2-d landmark positions directly), per-image
triangle scores are averaged across a dataset, and the result is
written as an OBJ surface with per-face colors through duplicated
vertices. Subdividing the mesh once before scoring refines the surface:
each triangle splits into four at its edge midpoints, and landmark
positions interpolate linearly.

Coordinates: a pixel (row r, column c) covers the unit square with
center (c + 0.5, r + 0.5); landmark x is the column axis and y the row
axis, both within [0, 112].
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AnalysisError, DataError

log = logging.getLogger(__name__)

GRID_SIZE = 7
IMAGE_SIZE = 112

# Perceptually uniform ramp (viridis), 33 anchors, linearly interpolated.
_VIRIDIS = np.array([
    (0.2670, 0.0049, 0.3294), (0.2770, 0.0503, 0.3757), (0.2823, 0.0950, 0.4173),
    (0.2829, 0.1359, 0.4534), (0.2788, 0.1755, 0.4834), (0.2706, 0.2141, 0.5071),
    (0.2590, 0.2515, 0.5247), (0.2450, 0.2877, 0.5373), (0.2297, 0.3224, 0.5457),
    (0.2143, 0.3556, 0.5512), (0.1994, 0.3876, 0.5546), (0.1856, 0.4186, 0.5568),
    (0.1727, 0.4488, 0.5579), (0.1607, 0.4785, 0.5581), (0.1490, 0.5081, 0.5573),
    (0.1378, 0.5375, 0.5549), (0.1276, 0.5669, 0.5506), (0.1206, 0.5964, 0.5436),
    (0.1206, 0.6258, 0.5335), (0.1323, 0.6550, 0.5197), (0.1579, 0.6838, 0.5017),
    (0.1966, 0.7118, 0.4792), (0.2461, 0.7389, 0.4520), (0.3041, 0.7647, 0.4199),
    (0.3692, 0.7889, 0.3829), (0.4401, 0.8111, 0.3410), (0.5160, 0.8312, 0.2943),
    (0.5958, 0.8487, 0.2433), (0.6785, 0.8637, 0.1895), (0.7624, 0.8764, 0.1371),
    (0.8456, 0.8873, 0.0997), (0.9261, 0.8973, 0.1041), (0.9932, 0.9062, 0.1439),
])


@dataclass(frozen=True)
class FaceMesh:
    """Triangle mesh with one 2-d landmark per vertex.

    ``vertices`` is (V, 3), ``triangles`` (T, 3) integer vertex indices,
    ``landmarks2d`` (V, 2) positions in the image frame. Triangle
    orientation is taken as given and preserved by subdivision.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    landmarks2d: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=int)
        lm = np.asarray(self.landmarks2d, dtype=float)
        if v.ndim != 2 or v.shape[1] != 3:
            raise DataError("vertices must be (V, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise DataError("triangles must be (T, 3)")
        if lm.shape != (v.shape[0], 2):
            raise DataError("landmarks2d must be (V, 2)")
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise DataError("triangle index out of range")
        if not np.all(np.isfinite(v)) or not np.all(np.isfinite(lm)):
            raise DataError("non-finite vertex or landmark")
        for arr in (v, t, lm):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "landmarks2d", lm)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


@dataclass(frozen=True)
class TriangleAttention:
    """Mean attention per triangle, averaged over ``n_images`` images."""

    values: np.ndarray
    n_images: int = 1

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def validate_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise DataError(f"attention grid must be square, got {g.shape}")
    if not np.all(np.isfinite(g)) or np.any(g < 0):
        raise DataError("attention weights must be finite and non-negative")
    return g


def bilinear_sample(grid, x, y, frame: float = IMAGE_SIZE) -> np.ndarray:
    """Sample the cell-centered bilinear interpolant at (x, y).

    Grid cell (i, j) is centered at ((j + 0.5) * frame / G,
    (i + 0.5) * frame / G); between centers the surface is bilinear and
    beyond the outermost centers it clamps, so samples never leave the
    range of the grid values. At a cell center the interpolant
    reproduces that cell's value exactly.
    """
    g = validate_grid(grid)
    size = g.shape[0]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sx = np.clip(x * size / frame - 0.5, 0.0, size - 1.0)
    sy = np.clip(y * size / frame - 0.5, 0.0, size - 1.0)
    x0 = np.clip(np.floor(sx).astype(int), 0, size - 2) if size > 1 else np.zeros_like(sx, dtype=int)
    y0 = np.clip(np.floor(sy).astype(int), 0, size - 2) if size > 1 else np.zeros_like(sy, dtype=int)
    fx = sx - x0
    fy = sy - y0
    if size == 1:
        return np.full(np.broadcast(sx, sy).shape, float(g[0, 0]))
    top = g[y0, x0] * (1 - fx) + g[y0, x0 + 1] * fx
    bottom = g[y0 + 1, x0] * (1 - fx) + g[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bottom * fy


def upsample_bilinear(grid, out_size: int = IMAGE_SIZE) -> np.ndarray:
    """Upsample a grid to ``out_size`` x ``out_size`` pixels.

    Output pixel (r, c) holds the interpolant at the pixel center
    (c + 0.5, r + 0.5). Values stay within [grid.min(), grid.max()] and
    a constant grid maps to a constant image.
    """
    if out_size <= 0:
        raise DataError("out_size must be positive")
    centers = np.arange(out_size) + 0.5
    xs, ys = np.meshgrid(centers, centers)
    return bilinear_sample(grid, xs, ys, frame=float(out_size))


def triangle_areas(mesh: FaceMesh) -> np.ndarray:
    """Unsigned 3-d area per triangle."""
    p = mesh.vertices[mesh.triangles]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    return 0.5 * np.linalg.norm(cross, axis=1)


def subdivide_once(mesh: FaceMesh) -> FaceMesh:
    """Split every triangle into four at its edge midpoints.

    Midpoints are shared between neighboring triangles, so the result
    has V + E vertices and 4T triangles, preserves total area exactly,
    and keeps each child's orientation equal to its parent's. Landmarks
    of new vertices are the midpoints of their edge's landmarks.
    Zero-area triangles subdivide like any other, with a warning.
    """
    vertices = [v for v in mesh.vertices]
    landmarks = [l for l in mesh.landmarks2d]
    midpoint: dict[tuple[int, int], int] = {}

    degenerate = int(np.sum(triangle_areas(mesh) == 0.0))
    if degenerate:
        log.warning("subdividing %d zero-area triangle(s)", degenerate)

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        found = midpoint.get(key)
        if found is None:
            found = len(vertices)
            vertices.append((vertices[a] + vertices[b]) / 2.0)
            landmarks.append((landmarks[a] + landmarks[b]) / 2.0)
            midpoint[key] = found
        return found

    children = np.empty((mesh.n_triangles * 4, 3), dtype=int)
    for k, (a, b, c) in enumerate(mesh.triangles):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        children[4 * k : 4 * k + 4] = [
            (a, ab, ca),
            (ab, b, bc),
            (ca, bc, c),
            (ab, bc, ca),
        ]
    return FaceMesh(np.array(vertices), children, np.array(landmarks))


def _covered_pixel_values(attn_map: np.ndarray, pts: np.ndarray) -> tuple[float, int]:
    """Mean map value over pixels whose centers fall inside a triangle."""
    size = attn_map.shape[0]
    min_xy = pts.min(axis=0)
    max_xy = pts.max(axis=0)
    c0 = max(0, int(np.floor(min_xy[0] - 0.5)))
    c1 = min(size - 1, int(np.ceil(max_xy[0] - 0.5)))
    r0 = max(0, int(np.floor(min_xy[1] - 0.5)))
    r1 = min(size - 1, int(np.ceil(max_xy[1] - 0.5)))
    if c1 < c0 or r1 < r0:
        return 0.0, 0
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    cx, cy = np.meshgrid(cols + 0.5, rows + 0.5)

    def edge(p, q):
        return (q[0] - p[0]) * (cy - p[1]) - (q[1] - p[1]) * (cx - p[0])

    e0 = edge(pts[0], pts[1])
    e1 = edge(pts[1], pts[2])
    e2 = edge(pts[2], pts[0])
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    count = int(inside.sum())
    if count == 0:
        return 0.0, 0
    block = attn_map[r0 : r1 + 1, c0 : c1 + 1]
    return float(block[inside].sum() / count), count


def triangle_attention(mesh: FaceMesh, attn_map) -> TriangleAttention:
    """Mean upsampled attention per triangle under frontal projection.

    Triangles whose footprint covers no pixel center fall back to a
    bilinear sample of the map at their centroid, so thin slivers still
    carry a well-defined score. Landmarks must be inside the map frame.
    """
    amap = validate_grid(attn_map)
    size = amap.shape[0]
    lm = mesh.landmarks2d
    if lm.size and (lm.min() < 0.0 or lm.max() > size):
        raise DataError("landmarks fall outside the attention map frame")
    values = np.empty(mesh.n_triangles)
    for k, tri in enumerate(mesh.triangles):
        pts = lm[tri]
        value, covered = _covered_pixel_values(amap, pts)
        if covered == 0:
            centroid = pts.mean(axis=0)
            value = float(
                bilinear_sample(amap, centroid[0], centroid[1], frame=float(size))
            )
        values[k] = value
    return TriangleAttention(values, n_images=1)


def average_over_dataset(per_image: Sequence[TriangleAttention]) -> TriangleAttention:
    """Average per-triangle scores across images (weighted by image counts)."""
    if not per_image:
        raise AnalysisError("no per-image attention to average")
    lengths = {ta.values.size for ta in per_image}
    if len(lengths) != 1:
        raise DataError(f"triangle counts differ: {sorted(lengths)}")
    total_images = sum(ta.n_images for ta in per_image)
    stacked = sum(ta.values * ta.n_images for ta in per_image)
    return TriangleAttention(stacked / total_images, n_images=total_images)


def mean_grids(grids: Sequence[np.ndarray]) -> np.ndarray:
    """Mean of equally shaped attention grids (e.g. attention heads)."""
    if not grids:
        raise AnalysisError("no grids to average")
    arrays = [validate_grid(g) for g in grids]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"grid shapes differ: {sorted(shapes)}")
    return np.mean(arrays, axis=0)


def colormap_rgb(normalized: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] through the built-in viridis ramp."""
    x = np.clip(np.asarray(normalized, dtype=float), 0.0, 1.0)
    pos = x * (len(_VIRIDIS) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_VIRIDIS) - 1)
    frac = (pos - lo)[..., None]
    return _VIRIDIS[lo] * (1 - frac) + _VIRIDIS[hi] * frac


def export_obj(mesh: FaceMesh, scores: TriangleAttention | np.ndarray) -> bytes:
    """Serialize the mesh with per-face colors as OBJ bytes.

    Per-face color needs per-face vertices, so each triangle's corners
    are duplicated and carry the face color as the nonstandard but
    widely read ``v x y z r g b`` extension. Scores are min-max
    normalized through the viridis ramp; a constant score column maps
    everything to the ramp midpoint. Output is byte-stable for
    identical inputs.
    """
    values = np.asarray(getattr(scores, "values", scores), dtype=float)
    if values.shape != (mesh.n_triangles,):
        raise DataError("scores do not align with mesh triangles")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        normalized = (values - lo) / (hi - lo)
    else:
        normalized = np.full(values.shape, 0.5)
    colors = colormap_rgb(normalized)

    out = io.StringIO()
    out.write("# visage attention surface\n")
    out.write("# colormap viridis\n")
    out.write(f"# triangles {mesh.n_triangles}\n")
    verts = mesh.vertices
    for k, tri in enumerate(mesh.triangles):
        r, g, b = colors[k]
        for vi in tri:
            x, y, z = verts[vi]
            out.write(f"v {x:.6f} {y:.6f} {z:.6f} {r:.4f} {g:.4f} {b:.4f}\n")
    for k in range(mesh.n_triangles):
        out.write(f"f {3 * k + 1} {3 * k + 2} {3 * k + 3}\n")
    return out.getvalue().encode("utf-8")


def load_obj(source) -> tuple[np.ndarray, np.ndarray]:
    """Strict OBJ reader for triangle meshes.

    Accepts ``v`` lines with optional color components and ``f`` lines
    with exactly three vertices (``i``, ``i/j`` and ``i/j/k`` forms);
    comment, group, and material lines are ignored. Anything else, or
    an out-of-range index, raises DataError.
    """
    if isinstance(source, (str, Path)) and "\n" not in str(source):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = str(source)
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(("#", "o ", "g ", "s ", "usemtl", "mtllib", "vn ", "vt ")):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) not in (4, 7):
                raise DataError(f"line {line_no}: vertex needs 3 coordinates (+ optional color)")
            vertices.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise DataError(f"line {line_no}: only triangle faces are supported")
            idx = []
            for token in parts[1:]:
                head = token.split("/")[0]
                value = int(head)
                if value <= 0:
                    raise DataError(f"line {line_no}: indices must be positive")
                idx.append(value - 1)
            faces.append(idx)
        else:
            raise DataError(f"line {line_no}: unsupported directive {parts[0]!r}")
    verts = np.array(vertices, dtype=float).reshape(-1, 3)
    tris = np.array(faces, dtype=int).reshape(-1, 3)
    if tris.size and tris.max() >= len(verts):
        raise DataError("face references a missing vertex")
    return verts, tris


def load_landmarks(path, n_vertices: int) -> np.ndarray:
    """Read a ``vertex_index,x,y`` CSV covering every vertex exactly once."""
    out = np.full((n_vertices, 2), np.nan)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or not row[0].strip():
                continue
            if row_no == 1 and not row[0].strip().lstrip("-").isdigit():
                continue  # header
            if len(row) < 3:
                raise DataError(f"landmark row {row_no}: need vertex_index,x,y")
            idx = int(row[0])
            if not (0 <= idx < n_vertices):
                raise DataError(f"landmark row {row_no}: vertex {idx} out of range")
            if np.isfinite(out[idx]).any():
                raise DataError(f"landmark row {row_no}: vertex {idx} repeated")
            out[idx] = (float(row[1]), float(row[2]))
    if not np.all(np.isfinite(out)):
        missing = int(np.nonzero(~np.isfinite(out[:, 0]))[0][0])
        raise DataError(f"no landmark for vertex {missing}")
    return out


def load_mesh(obj_path, landmarks_path) -> FaceMesh:
    vertices, triangles = load_obj(obj_path)
    landmarks = load_landmarks(landmarks_path, len(vertices))
    return FaceMesh(vertices, triangles, landmarks)


def load_grid(path) -> np.ndarray:
    """Read a square attention grid from CSV."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            if not row or not any(cell.strip() for cell in row):
                continue
            rows.append([float(cell) for cell in row])
    return validate_grid(np.array(rows))
