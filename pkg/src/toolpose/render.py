"""Deterministic z-buffer rasterizer for triangle meshes.

Pixel (col i, row j) is covered when the projected point (i, j) lies inside
a triangle; ties on an edge go to the triangle for which that edge is a top
or left edge. Depth is interpolated perspective-correctly (1/z is affine in
screen space) and the closest surface wins with a strict less-than test, so
on exact ties the earlier triangle (and earlier mesh) keeps the pixel.
Triangles crossing the near plane are clipped; there is no far plane and no
back-face culling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from toolpose.geometry import CameraIntrinsics, RigidTransform
from toolpose.maps import BinaryMask, DepthMap, write_depth_png, write_mask_png
from toolpose.mesh import TriangleMesh

NEAR_PLANE = 1.0  # mm
NO_OWNER = -1


@numba.njit(cache=True, nogil=True, inline="always")
def _edge(ax, ay, bx, by, px, py):
    # evaluated from the lexicographically smaller endpoint so that
    # edge(a, b, p) == -edge(b, a, p) bit-for-bit
    if ax > bx or (ax == bx and ay > by):
        return -((ax - bx) * (py - by) - (ay - by) * (px - bx))
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


@numba.njit(cache=True, nogil=True, inline="always")
def _top_left(ax, ay, bx, by):
    dy = by - ay
    return dy < 0.0 or (dy == 0.0 and bx - ax > 0.0)


@numba.njit(cache=True, nogil=True)
def _raster_triangle(p0, p1, p2, fx, fy, cx, cy, near, depth, owner, mesh_id, x0, y0):
    hb, wb = depth.shape
    u0 = fx * p0[0] / p0[2] + cx
    v0 = fy * p0[1] / p0[2] + cy
    u1 = fx * p1[0] / p1[2] + cx
    v1 = fy * p1[1] / p1[2] + cy
    u2 = fx * p2[0] / p2[2] + cx
    v2 = fy * p2[1] / p2[2] + cy
    # inverse depths relative to vertex 0: equal-depth vertices give exactly 1.0,
    # so fronto-parallel triangles reproduce their depth bit-exactly
    zr = p0[2]
    w0 = 1.0
    w1 = zr / p1[2]
    w2 = zr / p2[2]
    area = _edge(u0, v0, u1, v1, u2, v2)
    if area == 0.0 or not np.isfinite(area):
        return
    if area < 0.0:
        u1, u2 = u2, u1
        v1, v2 = v2, v1
        w1, w2 = w2, w1
    tl0 = _top_left(u1, v1, u2, v2)
    tl1 = _top_left(u2, v2, u0, v0)
    tl2 = _top_left(u0, v0, u1, v1)

    umin = min(u0, min(u1, u2))
    umax = max(u0, max(u1, u2))
    vmin = min(v0, min(v1, v2))
    vmax = max(v0, max(v1, v2))
    ilo = max(x0, int(np.ceil(max(umin, -1e9))))
    ihi = min(x0 + wb - 1, int(np.floor(min(umax, 1e9))))
    jlo = max(y0, int(np.ceil(max(vmin, -1e9))))
    jhi = min(y0 + hb - 1, int(np.floor(min(vmax, 1e9))))
    for j in range(jlo, jhi + 1):
        py = float(j)
        for i in range(ilo, ihi + 1):
            px = float(i)
            e0 = _edge(u1, v1, u2, v2, px, py)
            if e0 < 0.0 or (e0 == 0.0 and not tl0):
                continue
            e1 = _edge(u2, v2, u0, v0, px, py)
            if e1 < 0.0 or (e1 == 0.0 and not tl1):
                continue
            e2 = _edge(u0, v0, u1, v1, px, py)
            if e2 < 0.0 or (e2 == 0.0 and not tl2):
                continue
            s = e0 + e1 + e2
            if s <= 0.0:
                continue
            z = zr * (s / (e0 * w0 + e1 * w1 + e2 * w2))
            if z < near:
                z = near
            if z < depth[j - y0, i - x0]:
                depth[j - y0, i - x0] = z
                owner[j - y0, i - x0] = mesh_id


@numba.njit(cache=True, nogil=True)
def _rasterize(cam_verts, tris, fx, fy, cx, cy, near, depth, owner, mesh_id, x0, y0):
    poly = np.empty((4, 3))
    tmp = np.empty((3, 3))
    for t in range(tris.shape[0]):
        for k in range(3):
            for c in range(3):
                tmp[k, c] = cam_verts[tris[t, k], c]
        n_in = 0
        for k in range(3):
            if tmp[k, 2] >= near:
                n_in += 1
        if n_in == 0:
            continue
        if n_in == 3:
            _raster_triangle(tmp[0], tmp[1], tmp[2], fx, fy, cx, cy, near, depth, owner, mesh_id, x0, y0)
            continue
        # Sutherland-Hodgman against z >= near
        n = 0
        for k in range(3):
            a = tmp[k]
            b = tmp[(k + 1) % 3]
            a_in = a[2] >= near
            b_in = b[2] >= near
            if a_in:
                for c in range(3):
                    poly[n, c] = a[c]
                n += 1
            if a_in != b_in:
                s = (near - a[2]) / (b[2] - a[2])
                poly[n, 0] = a[0] + s * (b[0] - a[0])
                poly[n, 1] = a[1] + s * (b[1] - a[1])
                poly[n, 2] = near
                n += 1
        for k in range(1, n - 1):
            _raster_triangle(poly[0], poly[k], poly[k + 1], fx, fy, cx, cy, near, depth, owner, mesh_id, x0, y0)


@dataclass(frozen=True)
class RenderOutput:
    depth: DepthMap
    mask: BinaryMask


class FrameBuffer:
    """Depth + owner buffers for a window of the image (whole image by default)."""

    def __init__(self, intr: CameraIntrinsics, window: tuple[int, int, int, int] | None = None):
        self.intr = intr
        x0, y0, x1, y1 = window or (0, 0, intr.width, intr.height)
        self.x0, self.y0 = x0, y0
        self.depth = np.full((max(y1 - y0, 0), max(x1 - x0, 0)), np.inf)
        self.owner = np.full(self.depth.shape, NO_OWNER, dtype=np.int32)

    def draw(self, mesh: TriangleMesh, pose: RigidTransform, mesh_id: int = 0, near: float = NEAR_PLANE):
        self.draw_camera_vertices(pose.apply(mesh.vertices), mesh.triangles, mesh_id, near)

    def draw_camera_vertices(self, cam_verts, triangles, mesh_id: int = 0, near: float = NEAR_PLANE):
        if self.depth.size == 0:
            return
        i = self.intr
        _rasterize(
            np.ascontiguousarray(cam_verts, dtype=np.float64),
            np.ascontiguousarray(triangles, dtype=np.int64),
            float(i.fx), float(i.fy), float(i.cx), float(i.cy), float(near),
            self.depth, self.owner, int(mesh_id), int(self.x0), int(self.y0),
        )


def projected_window(cam_verts, intr: CameraIntrinsics, near: float = NEAR_PLANE):
    """Pixel window (x0, y0, x1, y1) guaranteed to contain every pixel the vertices can cover.

    Falls back to the whole image when a vertex is behind the near plane.
    """
    z = cam_verts[:, 2]
    if (z < near).any():
        return 0, 0, intr.width, intr.height
    u = intr.fx * cam_verts[:, 0] / z + intr.cx
    v = intr.fy * cam_verts[:, 1] / z + intr.cy
    x0 = int(np.clip(np.ceil(u.min()), 0, intr.width))
    x1 = int(np.clip(np.floor(u.max()) + 1, 0, intr.width))
    y0 = int(np.clip(np.ceil(v.min()), 0, intr.height))
    y1 = int(np.clip(np.floor(v.max()) + 1, 0, intr.height))
    return x0, y0, max(x0, x1), max(y0, y1)


def render_depth(mesh: TriangleMesh, pose: RigidTransform, intr: CameraIntrinsics,
                 near: float = NEAR_PLANE) -> RenderOutput:
    """Depth map and coverage mask of `mesh` placed at `pose`."""
    fb = FrameBuffer(intr)
    fb.draw(mesh, pose, 0, near)
    covered = np.isfinite(fb.depth)
    return RenderOutput(DepthMap(np.where(covered, fb.depth, 0.0), covered), BinaryMask(covered))


def render_scene(scene, intr: CameraIntrinsics, near: float = NEAR_PLANE) -> tuple[DepthMap, np.ndarray]:
    """Joint z-buffer of several (mesh, pose) items.

    Returns the scene depth and an int32 owner raster holding, per pixel, the
    index of the item that won the depth test (-1 where nothing is drawn).
    """
    fb = FrameBuffer(intr)
    for k, (mesh, pose) in enumerate(scene):
        fb.draw(mesh, pose, k, near)
    covered = np.isfinite(fb.depth)
    return DepthMap(np.where(covered, fb.depth, 0.0), covered), fb.owner


def render_visible_mask(scene_meshes, target_index: int, intr: CameraIntrinsics,
                        near: float = NEAR_PLANE) -> BinaryMask:
    """Pixels where item `target_index` is the closest surface in the joint scene."""
    if not 0 <= target_index < len(scene_meshes):
        raise IndexError(f"target_index {target_index} out of range for {len(scene_meshes)} meshes")
    _, owner = render_scene(scene_meshes, intr, near)
    return BinaryMask(owner == target_index)


def dump_render(out: RenderOutput, depth_path, mask_path, scale: float = 0.1) -> None:
    """Debug dump: 16-bit depth PNG and 0/255 mask PNG."""
    write_depth_png(out.depth, Path(depth_path), scale)
    write_mask_png(out.mask, Path(mask_path))
