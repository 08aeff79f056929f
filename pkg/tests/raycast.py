"""Brute-force ray-casting depth oracle, independent of the rasterizer."""

from __future__ import annotations

import numpy as np


def pixel_rays(intr) -> np.ndarray:
    """Ray direction with unit z through every pixel centre, shape (H, W, 3)."""
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def raycast_depth(cam_verts: np.ndarray, triangles: np.ndarray, intr) -> np.ndarray:
    """Nearest hit z per pixel (Moller-Trumbore), inf where the ray misses."""
    d = pixel_rays(intr).reshape(-1, 3)
    best = np.full(len(d), np.inf)
    for a, b, c in cam_verts[triangles]:
        e1, e2 = b - a, c - a
        p = np.cross(d, e2)
        det = p @ e1
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            s = -a
            bu = (p @ s) * inv
            q = np.cross(s, e1)
            bv = (d @ q) * inv
            t = (q @ e2) * inv
        hit = (np.abs(det) > 1e-12) & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 0)
        best = np.where(hit & (t < best), t, best)
    return best.reshape(intr.height, intr.width)


def slab_box_depth(lo, hi, pose, intr) -> np.ndarray:
    """Analytic ray/box entry depth for an axis-aligned box in the model frame."""
    d_cam = pixel_rays(intr).reshape(-1, 3)
    R, t = pose.rotation, pose.translation
    o = R.T @ (-t)
    d = d_cam @ R  # R^T d per row
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (np.asarray(lo) - o) / d
        t2 = (np.asarray(hi) - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 0)
    # ray parameter equals camera z because the direction has unit z
    return np.where(hit, np.maximum(tmin, 0), np.inf).reshape(intr.height, intr.width)
