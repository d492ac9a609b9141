"""Software rasterization of cuboid meshes into feature-grid buffers.

The feature grid divides the image into stride x stride patches; cell (h, w)
has its center at pixel ((w + 0.5) * stride, (h + 0.5) * stride).  All raster
routines work in continuous grid coordinates where that center sits exactly at
(row=h, col=w).  Coverage is decided at cell centers; the front-most face
(largest depth) wins a cell, and exact boundary hits are claimed by one of the
adjacent faces through a fixed edge-ownership rule so shared edges are never
rasterized twice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .geometry import Camera, Pose, rotation_from_pose

if TYPE_CHECKING:  # pragma: no cover
    from .mesh import CuboidMesh, VertexFeatureBank

# A vertex counts as visible when its depth is within this slack of the
# rasterized surface at its cell.
VISIBILITY_DEPTH_SLACK = 1e-4

# Projected triangles thinner than this area are dropped outright.
DEGENERATE_AREA = 1e-12

# Above this many potential (face, cell) pairs — faces times grid cells, an
# upper bound on the batched path's memory — the rasterizer switches to a
# per-face bounding-box loop.
_DENSE_LIMIT = 2_000_000


@dataclass
class RasterBuffers:
    """Per-cell rasterization output.

    ``depth`` holds -inf and ``face_id`` holds -1 for empty cells;
    ``barycentric`` rows of covered cells sum to 1 and follow the winning
    face's vertex order.
    """

    depth: np.ndarray
    face_id: np.ndarray
    barycentric: np.ndarray


def project_to_grid(mesh: "CuboidMesh", pose: Pose, camera: Camera
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project all mesh vertices to continuous grid coordinates.

    Returns (rows, cols, depths); cell (h, w) has its center at row h, col w.
    """
    rotation = rotation_from_pose(pose)
    rotated = mesh.vertices @ rotation.T
    u = camera.cx + camera.scale * rotated[:, 0]
    v = camera.cy - camera.scale * rotated[:, 1]
    stride = float(camera.feature_stride)
    return v / stride - 0.5, u / stride - 0.5, rotated[:, 2]


def _validate_grid(grid: tuple[int, int]) -> tuple[int, int]:
    height, width = int(grid[0]), int(grid[1])
    if height < 1 or width < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid}")
    return height, width


def _owns_edge(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # Deterministic boundary ownership: an edge claims points lying exactly on
    # it iff it points upward, or exactly leftward.  Adjacent faces traverse a
    # shared edge in opposite directions, so exactly one of them claims it.
    return (dy < 0.0) | ((dy == 0.0) & (dx < 0.0))


def rasterize(mesh: "CuboidMesh", pose: Pose, camera: Camera,
              grid: tuple[int, int]) -> RasterBuffers:
    """Z-buffer the mesh over the cell centers of a (height, width) grid.

    Faces whose projected winding is clockwise (back faces) and degenerate
    projected triangles are skipped.  Depth ties keep the face with the lower
    index, independent of the internal execution path.
    """
    height, width = _validate_grid(grid)
    rows, cols, depths = project_to_grid(mesh, pose, camera)

    tri = mesh.faces
    ax, ay = cols[tri[:, 0]], rows[tri[:, 0]]
    bx, by = cols[tri[:, 1]], rows[tri[:, 1]]
    cx, cy = cols[tri[:, 2]], rows[tri[:, 2]]
    # Twice the signed area in grid coordinates; with v growing downward the
    # outward-wound front faces come out negative.
    area2 = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
    keep = area2 <= -2.0 * DEGENERATE_AREA
    kept_ids = np.nonzero(keep)[0]

    depth_buf = np.full((height, width), -np.inf)
    face_buf = np.full((height, width), -1, dtype=np.int32)
    bary_buf = np.zeros((height, width, 3))
    if kept_ids.size == 0:
        return RasterBuffers(depth_buf, face_buf, bary_buf)

    da = depths[tri[:, 0]]
    db = depths[tri[:, 1]]
    dc = depths[tri[:, 2]]

    if kept_ids.size * height * width <= _DENSE_LIMIT:
        _rasterize_batched(kept_ids, ax, ay, bx, by, cx, cy, area2, da, db, dc,
                         height, width, depth_buf, face_buf, bary_buf)
    else:
        _rasterize_looped(kept_ids, ax, ay, bx, by, cx, cy, area2, da, db, dc,
                          height, width, depth_buf, face_buf, bary_buf)
    return RasterBuffers(depth_buf, face_buf, bary_buf)


def _face_coverage(px, py, ax, ay, bx, by, cx, cy, area2, da, db, dc):
    """Coverage mask, barycentrics and interpolated depth at points (px, py).

    Vertex coordinates may be scalars (one face) or broadcastable column
    arrays (a stack of faces); either way the arithmetic per element is
    identical, which keeps the batched and looped paths bit-equal.
    """
    e_ab = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    e_bc = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    e_ca = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    lam_a = e_bc / area2
    lam_b = e_ca / area2
    lam_c = e_ab / area2
    own_bc = _owns_edge(cx - bx, cy - by)
    own_ca = _owns_edge(ax - cx, ay - cy)
    own_ab = _owns_edge(bx - ax, by - ay)
    cover = (((lam_a > 0.0) | ((lam_a == 0.0) & own_bc))
             & ((lam_b > 0.0) | ((lam_b == 0.0) & own_ca))
             & ((lam_c > 0.0) | ((lam_c == 0.0) & own_ab)))
    depth = lam_a * da + lam_b * db + lam_c * dc
    return cover, lam_a, lam_b, lam_c, depth


def _rasterize_batched(kept_ids, ax, ay, bx, by, cx, cy, area2, da, db, dc,
                     height, width, depth_buf, face_buf, bary_buf) -> None:
    # One flat (face, cell) pair list restricted to each face's bounding box;
    # coverage never falls outside the box, so culling cannot change winners.
    k = kept_ids
    w0 = np.maximum(np.ceil(np.minimum(np.minimum(ax[k], bx[k]), cx[k])), 0.0)
    w1 = np.minimum(np.floor(np.maximum(np.maximum(ax[k], bx[k]), cx[k])),
                    width - 1.0)
    h0 = np.maximum(np.ceil(np.minimum(np.minimum(ay[k], by[k]), cy[k])), 0.0)
    h1 = np.minimum(np.floor(np.maximum(np.maximum(ay[k], by[k]), cy[k])),
                    height - 1.0)
    boxed = (w0 <= w1) & (h0 <= h1)
    if not np.any(boxed):
        return
    k = k[boxed]
    w0 = w0[boxed].astype(np.int64)
    h0 = h0[boxed].astype(np.int64)
    box_w = w1[boxed].astype(np.int64) - w0 + 1
    counts = box_w * (h1[boxed].astype(np.int64) - h0 + 1)

    offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
    slot = np.repeat(np.arange(k.size), counts)
    local = np.arange(int(counts.sum())) - offsets[slot]
    px = (w0[slot] + local % box_w[slot]).astype(float)
    py = (h0[slot] + local // box_w[slot]).astype(float)

    gather = lambda arr: arr[k][slot]  # noqa: E731 - per-pair face values
    cover, lam_a, lam_b, lam_c, depth = _face_coverage(
        px, py, gather(ax), gather(ay), gather(bx), gather(by),
        gather(cx), gather(cy), gather(area2), gather(da), gather(db),
        gather(dc))
    if not np.any(cover):
        return
    cell = py[cover].astype(np.int64) * width + px[cover].astype(np.int64)
    depth = depth[cover]
    slot = slot[cover]
    # Per cell: deepest pair wins, equal depths keep the lowest face index.
    order = np.lexsort((slot, -depth, cell))
    first = np.ones(order.size, dtype=bool)
    first[1:] = cell[order[1:]] != cell[order[:-1]]
    win = order[first]

    depth_buf.ravel()[cell[win]] = depth[win]
    face_buf.ravel()[cell[win]] = k[slot[win]].astype(np.int32)
    bary = bary_buf.reshape(-1, 3)
    bary[cell[win], 0] = lam_a[cover][win]
    bary[cell[win], 1] = lam_b[cover][win]
    bary[cell[win], 2] = lam_c[cover][win]


def _rasterize_looped(kept_ids, ax, ay, bx, by, cx, cy, area2, da, db, dc,
                      height, width, depth_buf, face_buf, bary_buf) -> None:
    for t in kept_ids:
        xs = (ax[t], bx[t], cx[t])
        ys = (ay[t], by[t], cy[t])
        w0 = max(0, int(np.ceil(min(xs))))
        w1 = min(width - 1, int(np.floor(max(xs))))
        h0 = max(0, int(np.ceil(min(ys))))
        h1 = min(height - 1, int(np.floor(max(ys))))
        if w0 > w1 or h0 > h1:
            continue
        px = np.arange(w0, w1 + 1, dtype=float)[None, :]
        py = np.arange(h0, h1 + 1, dtype=float)[:, None]
        cover, lam_a, lam_b, lam_c, depth = _face_coverage(
            px, py, ax[t], ay[t], bx[t], by[t], cx[t], cy[t],
            area2[t], da[t], db[t], dc[t])
        window = (slice(h0, h1 + 1), slice(w0, w1 + 1))
        # Strictly-greater replacement keeps the earlier face on depth ties,
        # matching the batched path's lowest-face-on-tie rule.
        replace = cover & (depth > depth_buf[window])
        if not np.any(replace):
            continue
        depth_buf[window][replace] = depth[replace]
        face_buf[window][replace] = t
        lam = np.broadcast_arrays(lam_a, lam_b, lam_c)
        bary_buf[window][replace] = np.stack(lam, axis=-1)[replace]


def render_from_buffers(mesh: "CuboidMesh", bank: "VertexFeatureBank",
                        buffers: RasterBuffers) -> np.ndarray:
    """Interpolate bank features over already-rasterized buffers."""
    height, width = buffers.depth.shape
    out = np.zeros((height, width, bank.channel_count))
    hit = buffers.face_id >= 0
    if not np.any(hit):
        return out
    corners = mesh.faces[buffers.face_id[hit]]
    out[hit] = np.einsum("kj,kjc->kc", buffers.barycentric[hit],
                         bank.features[corners])
    return out


def render_feature_map(mesh: "CuboidMesh", bank: "VertexFeatureBank", pose: Pose,
                       camera: Camera, grid: tuple[int, int]) -> np.ndarray:
    """Synthesize the feature map of the mesh at a pose; empty cells are zero."""
    if bank.vertex_count != mesh.vertex_count:
        raise ValueError(
            f"bank has {bank.vertex_count} rows for a mesh with "
            f"{mesh.vertex_count} vertices")
    return render_from_buffers(mesh, bank, rasterize(mesh, pose, camera, grid))


def visible_vertices(mesh: "CuboidMesh", pose: Pose, camera: Camera,
                     grid: tuple[int, int]) -> np.ndarray:
    """Boolean mask of vertices that project inside the grid and pass the z-test.

    A vertex passes when its depth is within a small slack of the rasterized
    depth at the cell containing its projection; vertices landing in empty
    cells (e.g. just outside the silhouette) count as visible.
    """
    height, width = _validate_grid(grid)
    rows, cols, depths = project_to_grid(mesh, pose, camera)
    h = np.floor(rows + 0.5).astype(np.int64)
    w = np.floor(cols + 0.5).astype(np.int64)
    inside = (h >= 0) & (h < height) & (w >= 0) & (w < width)
    buffers = rasterize(mesh, pose, camera, (height, width))
    visible = np.zeros(mesh.vertex_count, dtype=bool)
    idx = np.nonzero(inside)[0]
    surface = buffers.depth[h[idx], w[idx]]
    visible[idx] = depths[idx] >= surface - VISIBILITY_DEPTH_SLACK
    return visible


def sample_bilinear(feature_map: np.ndarray, rows: np.ndarray,
                    cols: np.ndarray) -> np.ndarray:
    """Bilinearly interpolate (N,) continuous grid positions out of an (H, W, C) map.

    Positions are clamped to the grid's center rectangle, so samples slightly
    outside replicate the border cells.
    """
    height, width = feature_map.shape[:2]
    r0, r1, c0, c1, fr, fc = _bilinear_neighbors(rows, cols, height, width)
    top = feature_map[r0, c0] * (1.0 - fc)[:, None] + feature_map[r0, c1] * fc[:, None]
    bottom = feature_map[r1, c0] * (1.0 - fc)[:, None] + feature_map[r1, c1] * fc[:, None]
    return top * (1.0 - fr)[:, None] + bottom * fr[:, None]


def scatter_bilinear(shape: tuple[int, int, int], rows: np.ndarray,
                     cols: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`sample_bilinear`: spread (N, C) values onto a zero map."""
    height, width = shape[0], shape[1]
    r0, r1, c0, c1, fr, fc = _bilinear_neighbors(rows, cols, height, width)
    out = np.zeros(shape)
    np.add.at(out, (r0, c0), values * ((1.0 - fr) * (1.0 - fc))[:, None])
    np.add.at(out, (r0, c1), values * ((1.0 - fr) * fc)[:, None])
    np.add.at(out, (r1, c0), values * (fr * (1.0 - fc))[:, None])
    np.add.at(out, (r1, c1), values * (fr * fc)[:, None])
    return out


def _bilinear_neighbors(rows, cols, height, width):
    rows = np.clip(np.asarray(rows, dtype=float), 0.0, height - 1.0)
    cols = np.clip(np.asarray(cols, dtype=float), 0.0, width - 1.0)
    r0 = np.clip(np.floor(rows).astype(np.int64), 0, max(height - 2, 0))
    c0 = np.clip(np.floor(cols).astype(np.int64), 0, max(width - 2, 0))
    r1 = np.minimum(r0 + 1, height - 1)
    c1 = np.minimum(c0 + 1, width - 1)
    return r0, r1, c0, c1, rows - r0, cols - c0


def sample_vertex_features(feature_map: np.ndarray, mesh: "CuboidMesh", pose: Pose,
                           camera: Camera, mode: str = "bilinear"
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Read one feature vector per mesh vertex out of a feature map.

    Returns (features, visible): an (R, C) array with zero rows for occluded
    or out-of-grid vertices, and the visibility mask itself.  ``mode`` selects
    bilinear interpolation (default) or nearest-cell lookup.
    """
    feature_map = np.asarray(feature_map, dtype=float)
    if feature_map.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {feature_map.shape}")
    height, width = feature_map.shape[:2]
    visible = visible_vertices(mesh, pose, camera, (height, width))
    rows, cols, _ = project_to_grid(mesh, pose, camera)
    out = np.zeros((mesh.vertex_count, feature_map.shape[2]))
    idx = np.nonzero(visible)[0]
    if idx.size:
        if mode == "bilinear":
            out[idx] = sample_bilinear(feature_map, rows[idx], cols[idx])
        elif mode == "nearest":
            h = np.clip(np.floor(rows[idx] + 0.5).astype(np.int64), 0, height - 1)
            w = np.clip(np.floor(cols[idx] + 0.5).astype(np.int64), 0, width - 1)
            out[idx] = feature_map[h, w]
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
    return out, visible


class RasterCache:
    """Memoizes raster buffers per pose for repeated renders of one mesh setup."""

    def __init__(self, mesh: "CuboidMesh", camera: Camera, grid: tuple[int, int]):
        self.mesh = mesh
        self.camera = camera
        self.grid = _validate_grid(grid)
        self._buffers: dict[tuple[float, float, float], RasterBuffers] = {}

    def __len__(self) -> int:
        return len(self._buffers)

    def buffers(self, pose: Pose) -> RasterBuffers:
        key = (pose.azimuth, pose.elevation, pose.inplane)
        cached = self._buffers.get(key)
        if cached is None:
            cached = rasterize(self.mesh, pose, self.camera, self.grid)
            self._buffers[key] = cached
        return cached

    def render(self, bank: "VertexFeatureBank", pose: Pose) -> np.ndarray:
        if bank.vertex_count != self.mesh.vertex_count:
            raise ValueError("bank row count does not match the cached mesh")
        return render_from_buffers(self.mesh, bank, self.buffers(pose))
