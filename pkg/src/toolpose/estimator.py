"""Classical render-and-compare pose estimation with ICP refinement.

Hypotheses are camera-facing orientations from icosphere directions crossed
with in-plane rotations, placed at a translation estimated from the mask.
Each is scored by rendering its depth and comparing it with the observed
depth; the best few are refined by point-to-point ICP against the masked
depth back-projected to 3-D, and the refined pose that renders best wins.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from toolpose.geometry import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    back_project,
    rotation_angle,
)
from toolpose.maps import BinaryMask, DepthMap
from toolpose.mesh import TriangleMesh, sample_surface
from toolpose.render import FrameBuffer, projected_window

log = logging.getLogger(__name__)

TOP_K = 5
ROTATION_CONVERGE_DEG = 0.01


class EstimationError(RuntimeError):
    """Pose estimation could not produce an answer for this frame."""


class EmptyMaskError(EstimationError):
    pass


class NoValidDepthError(EstimationError):
    pass


class DegenerateCorrespondenceError(EstimationError):
    pass


@dataclass(frozen=True)
class EstimatorParams:
    n_viewpoints: int = 162
    n_inplane: int = 12
    score_tau: float = 3.0
    icp_max_iters: int = 60
    icp_corr_dist: float = 10.0
    icp_converge_tol: float = 1e-3
    min_mask_pixels: int = 50
    top_k: int = TOP_K
    n_model_points: int = 5000
    max_observed_points: int = 3000
    align_translation: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_viewpoints", "n_inplane", "icp_max_iters", "min_mask_pixels", "top_k",
                     "n_model_points", "max_observed_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("score_tau", "icp_corr_dist", "icp_converge_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PoseHypothesis:
    pose: RigidTransform
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"hypothesis score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class EstimateResult:
    pose: RigidTransform
    score: float
    n_icp_iters: int
    inlier_fraction: float
    hypothesis_index: int = -1
    seed: int = 0


@dataclass(frozen=True)
class IcpResult:
    pose: RigidTransform
    n_iters: int
    inlier_fraction: float
    residuals: tuple  # mean inlier residual of every accepted pose, initial first

    def __iter__(self):
        # unpacks as (pose, n_iters, inlier_fraction)
        return iter((self.pose, self.n_iters, self.inlier_fraction))


# ---------------------------------------------------------------- viewpoints


def icosphere(level: int) -> np.ndarray:
    """Unit vertices of an icosahedron subdivided `level` times (12, 42, 162, 642, ...)."""
    p = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [
        (-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0),
        (0, -1, p), (0, 1, p), (0, -1, -p), (0, 1, -p),
        (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = V[a] + V[b]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(V)


def _viewpoint_directions(n: int) -> np.ndarray:
    level = 0
    while 10 * 4**level + 2 < n:
        level += 1
    dirs = icosphere(level)
    if len(dirs) == n:
        return dirs
    # deterministic farthest-point subset when n is not an icosphere size
    chosen = [0]
    dist = np.linalg.norm(dirs - dirs[0], axis=1)
    while len(chosen) < n:
        k = int(np.argmax(dist))
        chosen.append(k)
        dist = np.minimum(dist, np.linalg.norm(dirs - dirs[k], axis=1))
    return dirs[chosen]


def look_at_rotation(direction) -> np.ndarray:
    """Model-to-camera rotation for a camera sitting along `direction` (model frame) looking at the origin."""
    d = np.asarray(direction, dtype=np.float64)
    z = -d / np.linalg.norm(d)
    helper = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])  # rows: camera axes in model coordinates


def sample_viewpoints(params: EstimatorParams | None = None) -> list[RigidTransform]:
    """n_viewpoints * n_inplane rotations, viewpoint-major, in-plane angles 0, 360/n, ..."""
    params = params or EstimatorParams()
    out = []
    for d in _viewpoint_directions(params.n_viewpoints):
        R_view = look_at_rotation(d)
        for k in range(params.n_inplane):
            a = 2.0 * math.pi * k / params.n_inplane
            c, s = math.cos(a), math.sin(a)
            Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            out.append(RigidTransform(Rz @ R_view))
    return out


# ---------------------------------------------------------------- observation


def masked_points(mask: BinaryMask, depth: DepthMap, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points of masked pixels with valid depth, row-major order."""
    if mask.shape != depth.shape or mask.shape != intr.shape:
        raise ValueError(f"mask {mask.shape}, depth {depth.shape} and camera {intr.shape} differ")
    rows, cols = np.nonzero(mask.bits & depth.valid)
    if len(rows) == 0:
        return np.zeros((0, 3))
    return back_project(intr, cols, rows, depth.values[rows, cols])


def init_translation(mask: BinaryMask, depth: DepthMap, intr: CameraIntrinsics,
                     min_mask_pixels: int = 1) -> np.ndarray:
    """Component-wise median of the back-projected masked depth."""
    n = mask.count()
    if n == 0 or n < min_mask_pixels:
        raise EmptyMaskError(f"mask has {n} pixels, need at least {max(min_mask_pixels, 1)}")
    pts = masked_points(mask, depth, intr)
    if len(pts) == 0:
        raise NoValidDepthError("no masked pixel has valid depth")
    return np.median(pts, axis=0)


class _Observation:
    """Observed depth + mask with its bounding box, for fast repeated scoring."""

    def __init__(self, intr: CameraIntrinsics, depth: DepthMap, mask: BinaryMask):
        if depth.shape != intr.shape or mask.shape != intr.shape:
            raise ValueError(f"mask {mask.shape}, depth {depth.shape} and camera {intr.shape} differ")
        self.intr = intr
        self.depth = depth
        self.mask = mask
        rows, cols = np.nonzero(mask.bits)
        if len(rows):
            self.bbox = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
        else:
            self.bbox = None
        # half-resolution camera for the cheap alignment render; pixel k spans full-res 2k, 2k+1
        try:
            self.coarse = CameraIntrinsics(intr.fx / 2, intr.fy / 2, (intr.cx - 0.5) / 2, (intr.cy - 0.5) / 2,
                                           max(1, intr.width // 2), max(1, intr.height // 2))
        except ValueError:  # principal point at the very edge
            self.coarse = intr

    def _render(self, mesh: TriangleMesh, R, t, intr: CameraIntrinsics, with_mask: bool):
        cam = mesh.vertices @ R.T + t
        x0, y0, x1, y1 = projected_window(cam, intr)
        if with_mask and self.bbox is not None:
            if x1 <= x0 or y1 <= y0:
                x0, y0, x1, y1 = self.bbox
            else:
                bx0, by0, bx1, by1 = self.bbox
                x0, y0, x1, y1 = min(x0, bx0), min(y0, by0), max(x1, bx1), max(y1, by1)
        fb = FrameBuffer(intr, (x0, y0, x1, y1))
        fb.draw_camera_vertices(cam, mesh.triangles)
        return (x0, y0, x1, y1), fb.depth

    def score(self, mesh: TriangleMesh, R, t, tau: float) -> float:
        (x0, y0, x1, y1), rdepth = self._render(mesh, R, t, self.intr, True)
        rvalid = np.isfinite(rdepth)
        obs_mask = self.mask.bits[y0:y1, x0:x1]
        union = np.count_nonzero(rvalid | obs_mask)
        if union == 0:
            return 0.0
        ovalid = self.depth.valid[y0:y1, x0:x1]
        ovals = self.depth.values[y0:y1, x0:x1]
        with np.errstate(invalid="ignore"):
            agree = rvalid & ovalid & (np.abs(rdepth - ovals) < tau)
        return np.count_nonzero(agree) / union

    def align(self, mesh: TriangleMesh, R, t, target: np.ndarray) -> np.ndarray:
        """Translation moving the median of the rendered visible surface onto `target`."""
        (x0, y0, _, _), rdepth = self._render(mesh, R, t, self.coarse, False)
        rows, cols = np.nonzero(np.isfinite(rdepth))
        if len(rows) == 0:
            return t
        pts = back_project(self.coarse, cols + x0, rows + y0, rdepth[rows, cols])
        return t + (target - np.median(pts, axis=0))


def score_hypothesis(mesh: TriangleMesh, hyp_pose: RigidTransform, intr: CameraIntrinsics,
                     observed_depth: DepthMap, mask: BinaryMask, score_tau: float) -> float:
    """Fraction of the rendered-or-observed region where both depths exist and agree within tau."""
    obs = _Observation(intr, observed_depth, mask)
    return obs.score(mesh, hyp_pose.rotation, hyp_pose.translation, score_tau)


# ---------------------------------------------------------------- ICP


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares R, t with R @ src_i + t ~= dst_i."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def icp_refine(model_points: PointCloud, observed_points: PointCloud, init: RigidTransform,
               params: EstimatorParams | None = None, _tree: cKDTree | None = None) -> IcpResult:
    """Point-to-point ICP aligning model-frame points to camera-frame observations.

    Correspondences run from each observed point to its nearest transformed
    model point; pairs farther than icp_corr_dist are dropped. An update is
    accepted only if it does not increase the mean inlier residual, so the
    residual history is non-increasing.
    """
    params = params or EstimatorParams()
    model = model_points.points
    obs = observed_points.points
    if len(model) < 3 or len(obs) < 3:
        raise DegenerateCorrespondenceError(
            f"ICP needs >= 3 points per cloud, got {len(model)} model / {len(obs)} observed"
        )
    tree = _tree if _tree is not None else cKDTree(model)

    def correspond(pose: RigidTransform):
        # query in the model frame: equivalent to transforming the model, but the tree is reused
        q = (obs - pose.translation) @ pose.rotation
        dist, idx = tree.query(q)
        inl = dist < params.icp_corr_dist
        if inl.sum() < 3:
            raise DegenerateCorrespondenceError(f"only {int(inl.sum())} inlier pairs within "
                                                f"{params.icp_corr_dist} mm")
        return dist, idx, inl

    pose = init
    dist, idx, inl = correspond(pose)
    residual = float(np.mean(dist[inl]))
    residuals = [residual]
    n_iters = 0
    for _ in range(params.icp_max_iters):
        n_iters += 1
        R, t = kabsch(model[idx[inl]], obs[inl])
        new_pose = RigidTransform.from_approx(R, t, tol=1e-6)
        try:
            new_dist, new_idx, new_inl = correspond(new_pose)
        except DegenerateCorrespondenceError:
            break
        new_res = float(np.mean(new_dist[new_inl]))
        if new_res > residual:
            break
        dt = float(np.linalg.norm(new_pose.translation - pose.translation))
        dr = math.degrees(rotation_angle(new_pose.rotation @ pose.rotation.T))
        pose, dist, idx, inl, residual = new_pose, new_dist, new_idx, new_inl, new_res
        residuals.append(residual)
        if dt < params.icp_converge_tol and dr < ROTATION_CONVERGE_DEG:
            break
    return IcpResult(pose, n_iters, float(inl.mean()), tuple(residuals))


# ---------------------------------------------------------------- pipeline


def _subsample(pts: np.ndarray, n_max: int) -> np.ndarray:
    if len(pts) <= n_max:
        return pts
    idx = np.linspace(0, len(pts) - 1, n_max).round().astype(np.int64)
    return pts[idx]


def estimate_pose(mesh: TriangleMesh, intr: CameraIntrinsics, observed_depth: DepthMap,
                  mask: BinaryMask, params: EstimatorParams | None = None, jobs: int = 1,
                  rotations: list[RigidTransform] | None = None) -> EstimateResult:
    params = params or EstimatorParams()
    t0 = init_translation(mask, observed_depth, intr, params.min_mask_pixels)
    obs = _Observation(intr, observed_depth, mask)
    if rotations is None:
        rotations = sample_viewpoints(params)

    def place(rot: RigidTransform) -> tuple[np.ndarray, float]:
        R = rot.rotation
        t = obs.align(mesh, R, t0, t0) if params.align_translation else t0
        return t, obs.score(mesh, R, t, params.score_tau)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            placed = list(ex.map(place, rotations))
    else:
        placed = [place(r) for r in rotations]

    scores = np.array([sc for _, sc in placed])
    if not (scores > 0).any():
        raise EstimationError("every pose hypothesis scored zero")
    # stable sort: equal scores keep the lower hypothesis index first
    top = np.argsort(-scores, kind="stable")[: params.top_k]
    hyps = {int(i): PoseHypothesis(RigidTransform(rotations[i].rotation, placed[i][0]), float(scores[i]))
            for i in top}

    model_pts = sample_surface(mesh, params.n_model_points, params.seed)
    tree = cKDTree(model_pts)
    observed = PointCloud(_subsample(masked_points(mask, observed_depth, intr), params.max_observed_points))
    model_cloud = PointCloud(model_pts, "model")

    best: EstimateResult | None = None
    for hi in map(int, top):
        try:
            icp = icp_refine(model_cloud, observed, hyps[hi].pose, params, _tree=tree)
        except DegenerateCorrespondenceError as e:
            log.debug("hypothesis %d: ICP failed: %s", hi, e)
            continue
        score = obs.score(mesh, icp.pose.rotation, icp.pose.translation, params.score_tau)
        log.debug("hypothesis %d: coarse %.3f -> refined %.3f in %d iters", hi, hyps[hi].score, score, icp.n_iters)
        if best is None or score > best.score:
            best = EstimateResult(icp.pose, score, icp.n_iters, icp.inlier_fraction, int(hi), params.seed)
    if best is None:
        raise EstimationError("ICP failed for every top hypothesis")
    return best
