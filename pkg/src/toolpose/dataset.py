"""BOP-style scene directories, a synthetic scene generator, and results files.

Layout of a scene directory::

    scene_camera.json      {"<frame>": {"fx", "fy", "cx", "cy", "width", "height",
                                        "baseline", "depth_scale"}}
    scene_gt.json          {"<frame>": [{"cam_R_m2c": [9], "cam_t_m2c": [3], "obj_id": n}]}
    depth/000000.png       16-bit, value * depth_scale = mm, 0 = invalid
    mask_visib/000000.png  visible object mask, 0/255
    mask_full/000000.png   unoccluded object mask, 0/255
    disparity/000000.pfm   optional external disparity
    rgb_left/, rgb_right/  optional stereo images (PNG)

Rotations are row-major 3x3 model-to-camera, translations in millimetres.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from toolpose.geometry import CameraIntrinsics, RigidTransform, StereoRig, orthonormality_error
from toolpose.maps import (
    DEFAULT_DEPTH_SCALE,
    BinaryMask,
    DepthMap,
    read_depth_png,
    read_mask_png,
    write_depth_png,
    write_mask_png,
)
from toolpose.mesh import TriangleMesh
from toolpose.render import render_depth, render_scene

ORTHO_LOAD_TOL = 1e-5  # text-serialised rotations carry rounding


class SceneError(ValueError):
    """A scene directory is missing files or violates its schema."""


def frame_name(frame_id: int) -> str:
    return f"{frame_id:06d}"


# ---------------------------------------------------------------- loading


@dataclass(frozen=True)
class SceneFrame:
    frame_id: int
    camera: StereoRig
    gt_pose: RigidTransform
    object_id: int = 1
    depth_path: Path | None = None
    left_path: Path | None = None
    right_path: Path | None = None
    mask_visib_path: Path | None = None
    mask_full_path: Path | None = None
    disparity_path: Path | None = None
    depth_scale: float = DEFAULT_DEPTH_SCALE

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.camera.intrinsics

    def load_depth(self) -> DepthMap:
        if self.depth_path is None:
            raise SceneError(f"frame {self.frame_id}: no depth file")
        depth = read_depth_png(self.depth_path, self.depth_scale)
        if depth.shape != self.intrinsics.shape:
            raise SceneError(f"{self.depth_path}: size {depth.width}x{depth.height} does not match "
                             f"camera {self.intrinsics.width}x{self.intrinsics.height}")
        return depth

    def load_mask(self, which: str = "visib") -> BinaryMask:
        path = self.mask_visib_path if which == "visib" else self.mask_full_path
        if path is None:
            raise SceneError(f"frame {self.frame_id}: no mask_{which} file")
        return read_mask_png(path)


def _read_json(path: Path):
    if not path.is_file():
        raise SceneError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneError(f"{path}: invalid JSON: {e}") from None


def _number(obj, key, where, positive=False):
    if key not in obj:
        raise SceneError(f"{where}: missing field '{key}'")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise SceneError(f"{where}.{key}: expected a finite number, got {v!r}")
    if positive and v <= 0:
        raise SceneError(f"{where}.{key}: must be positive, got {v}")
    return v


def _numbers(obj, key, n, where):
    if key not in obj:
        raise SceneError(f"{where}: missing field '{key}'")
    v = obj[key]
    if (not isinstance(v, list) or len(v) != n
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v)):
        raise SceneError(f"{where}.{key}: expected {n} finite numbers")
    return [float(x) for x in v]


def _parse_camera(entry, where) -> tuple[StereoRig, float]:
    if not isinstance(entry, dict):
        raise SceneError(f"{where}: expected an object")
    if "cam_K" in entry and "fx" not in entry:
        K = _numbers(entry, "cam_K", 9, where)
        fx, fy, cx, cy = K[0], K[4], K[2], K[5]
    else:
        fx, fy = _number(entry, "fx", where, True), _number(entry, "fy", where, True)
        cx, cy = _number(entry, "cx", where), _number(entry, "cy", where)
    w, h = _number(entry, "width", where, True), _number(entry, "height", where, True)
    if int(w) != w or int(h) != h:
        raise SceneError(f"{where}: width/height must be integers")
    baseline = _number(entry, "baseline", where, True)
    scale = _number(entry, "depth_scale", where, True) if "depth_scale" in entry else DEFAULT_DEPTH_SCALE
    try:
        intr = CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
        return StereoRig(intr, float(baseline)), float(scale)
    except ValueError as e:
        raise SceneError(f"{where}: {e}") from None


def _parse_pose(entry, where) -> RigidTransform:
    R = np.array(_numbers(entry, "cam_R_m2c", 9, where)).reshape(3, 3)
    t = _numbers(entry, "cam_t_m2c", 3, where)
    ortho, det = orthonormality_error(R)
    if ortho > ORTHO_LOAD_TOL or det > ORTHO_LOAD_TOL:
        raise SceneError(f"{where}.cam_R_m2c: rotation is not orthonormal with det +1 "
                         f"(|R^T R - I| = {ortho:.3g}, det = {np.linalg.det(R):.6g})")
    return RigidTransform.from_approx(R, t, tol=ORTHO_LOAD_TOL)


def _optional(path: Path) -> Path | None:
    return path if path.is_file() else None


def load_scene(scene_dir, object_id: int | None = None) -> list[SceneFrame]:
    """Parse and validate a scene directory; unknown JSON fields are ignored."""
    root = Path(scene_dir)
    if not root.is_dir():
        raise SceneError(f"scene directory not found: {root}")
    cams = _read_json(root / "scene_camera.json")
    gts = _read_json(root / "scene_gt.json")
    if not isinstance(cams, dict):
        raise SceneError("scene_camera.json: expected an object keyed by frame id")
    if not isinstance(gts, dict):
        raise SceneError("scene_gt.json: expected an object keyed by frame id")

    frames = []
    for key in sorted(gts, key=lambda k: (len(k), k)):
        where = f"scene_gt.json:$['{key}']"
        try:
            fid = int(key)
        except ValueError:
            raise SceneError(f"{where}: frame id is not an integer") from None
        if key not in cams:
            raise SceneError(f"scene_camera.json: no entry for frame {key}")
        rig, scale = _parse_camera(cams[key], f"scene_camera.json:$['{key}']")
        entries = gts[key]
        if isinstance(entries, dict):
            entries = [entries]
        if not isinstance(entries, list) or not entries:
            raise SceneError(f"{where}: expected a non-empty list of object annotations")
        idx = 0
        if object_id is not None:
            matches = [i for i, e in enumerate(entries) if isinstance(e, dict) and e.get("obj_id") == object_id]
            if not matches:
                raise SceneError(f"{where}: no annotation with obj_id {object_id}")
            idx = matches[0]
        entry = entries[idx]
        if not isinstance(entry, dict):
            raise SceneError(f"{where}[{idx}]: expected an object")
        try:
            pose = _parse_pose(entry, f"{where}[{idx}]")
        except SceneError as e:
            raise SceneError(f"frame {fid}: {e}") from None
        name = frame_name(fid)
        depth = _optional(root / "depth" / f"{name}.png")
        disparity = _optional(root / "disparity" / f"{name}.pfm")
        if depth is None and disparity is None:
            raise SceneError(f"frame {fid}: referenced file missing: {root / 'depth' / (name + '.png')}")
        frames.append(SceneFrame(
            frame_id=fid,
            camera=rig,
            gt_pose=pose,
            object_id=int(entry.get("obj_id", 1)),
            depth_path=depth,
            left_path=_optional(root / "rgb_left" / f"{name}.png"),
            right_path=_optional(root / "rgb_right" / f"{name}.png"),
            mask_visib_path=_optional(root / "mask_visib" / f"{name}.png"),
            mask_full_path=_optional(root / "mask_full" / f"{name}.png"),
            disparity_path=disparity,
            depth_scale=scale,
        ))
    return frames


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class SynthParams:
    n_frames: int = 10
    width: int = 960
    height: int = 540
    fx: float = 800.0
    fy: float = 800.0
    baseline: float = 5.0
    x_range: tuple[float, float] = (-40.0, 40.0)
    y_range: tuple[float, float] = (-25.0, 25.0)
    z_range: tuple[float, float] = (200.0, 320.0)
    n_occluders: int = 0
    occluder_scale: tuple[float, float] = (0.5, 1.0)
    occlusion_fraction: tuple[float, float] = (0.05, 0.6)
    min_occluder_gap: float = 10.0  # mm between occluder back and tool front
    depth_noise: float = 0.0  # Gaussian sigma, mm
    dropout: float = 0.0
    depth_scale: float = DEFAULT_DEPTH_SCALE
    max_retries: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.n_frames < 0:
            raise ValueError("resolution must be positive and n_frames >= 0")
        for name in ("x_range", "y_range", "z_range", "occluder_scale", "occlusion_fraction"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: {lo} > {hi}")
        if self.z_range[0] <= 0:
            raise ValueError("z_range must lie in front of the camera")
        if not (0.0 <= self.dropout <= 1.0):
            raise ValueError("dropout probability must be in [0, 1]")
        lo, hi = self.occlusion_fraction
        if not (0.0 <= lo and hi <= 1.0):
            raise ValueError("occlusion_fraction bounds must be in [0, 1]")
        if self.depth_noise < 0 or self.occluder_scale[0] <= 0 or self.min_occluder_gap < 0:
            raise ValueError("noise, occluder scale and gap must be non-negative (scale positive)")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.width / 2.0, self.height / 2.0, self.width, self.height)

    @property
    def rig(self) -> StereoRig:
        return StereoRig(self.intrinsics, self.baseline)


@dataclass(frozen=True)
class SynthFrame:
    frame_id: int
    gt_pose: RigidTransform
    occluders: list = field(default_factory=list)  # [(mesh index, scale, RigidTransform)]
    clean_depth: DepthMap | None = None
    depth: DepthMap | None = None
    mask_visib: BinaryMask | None = None
    mask_full: BinaryMask | None = None


class SynthesisError(RuntimeError):
    pass


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation (normalised Gaussian quaternion)."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def _in_frustum(cam_verts: np.ndarray, intr: CameraIntrinsics) -> bool:
    z = cam_verts[:, 2]
    if (z <= 1.0).any():
        return False
    u = intr.fx * cam_verts[:, 0] / z + intr.cx
    v = intr.fy * cam_verts[:, 1] / z + intr.cy
    return bool((u >= 0).all() and (u <= intr.width - 1).all() and (v >= 0).all() and (v <= intr.height - 1).all())


def sample_object_pose(mesh: TriangleMesh, params: SynthParams, rng: np.random.Generator) -> RigidTransform:
    intr = params.intrinsics
    for _ in range(params.max_retries):
        R = RigidTransform.from_approx(random_rotation(rng), np.zeros(3), tol=1e-9).rotation
        t = [rng.uniform(*params.x_range), rng.uniform(*params.y_range), rng.uniform(*params.z_range)]
        pose = RigidTransform(R, t)
        if _in_frustum(pose.apply(mesh.vertices), intr):
            return pose
    raise SynthesisError(
        f"no in-frustum object pose after {params.max_retries} tries with x {params.x_range}, "
        f"y {params.y_range}, z {params.z_range} mm"
    )


def _place_occluders(mesh, pose, full_mask, occluder_meshes, params, rng):
    intr = params.intrinsics
    tool_front = pose.apply(mesh.vertices)[:, 2].min()
    rows, cols = np.nonzero(full_mask.bits)
    lo, hi = params.occlusion_fraction
    n_full = len(rows)
    for _ in range(params.max_retries):
        placed = []
        for _k in range(params.n_occluders):
            mi = int(rng.integers(len(occluder_meshes)))
            scale = float(rng.uniform(*params.occluder_scale))
            occ = occluder_meshes[mi].scaled(scale)
            R = RigidTransform.from_approx(random_rotation(rng), np.zeros(3), tol=1e-9).rotation
            local = occ.vertices - occ.vertices.mean(axis=0)
            z_ext = (local @ R.T)[:, 2].max()
            back = tool_front - params.min_occluder_gap - rng.uniform(0.0, 30.0)
            z_c = back - z_ext
            a = int(rng.integers(n_full))
            u, v = cols[a] + rng.uniform(-0.5, 0.5), rows[a] + rng.uniform(-0.5, 0.5)
            centre = np.array([(u - intr.cx) * z_c / intr.fx, (v - intr.cy) * z_c / intr.fy, z_c])
            placed.append((mi, scale, RigidTransform(R, centre - R @ occ.vertices.mean(axis=0))))
        ok = all(
            (pl.apply(occluder_meshes[mi].scaled(s).vertices)[:, 2].min() > 2.0) for mi, s, pl in placed
        )
        if not ok:
            continue
        scene = [(mesh, pose)] + [(occluder_meshes[mi].scaled(s), pl) for mi, s, pl in placed]
        depth, owner = render_scene(scene, intr)
        visible = owner == 0
        frac = 1.0 - visible.sum() / n_full
        if lo <= frac <= hi:
            return placed, depth, BinaryMask(visible)
    raise SynthesisError(
        f"could not place {params.n_occluders} occluder(s) hiding {lo:.0%}-{hi:.0%} of the object "
        f"after {params.max_retries} tries"
    )


def synthesize_frame(mesh: TriangleMesh, occluder_meshes, params: SynthParams, frame_id: int) -> SynthFrame:
    """Generate one frame in memory. The RNG stream depends only on (seed, frame_id)."""
    rng = np.random.default_rng([params.seed, frame_id])
    intr = params.intrinsics
    pose = sample_object_pose(mesh, params, rng)
    solo = render_depth(mesh, pose, intr)
    full = solo.mask
    occluders = []
    if params.n_occluders > 0 and occluder_meshes:
        occluders, clean, visible = _place_occluders(mesh, pose, full, occluder_meshes, params, rng)
    else:
        clean, visible = solo.depth, full

    vals = clean.values.copy()
    valid = clean.valid.copy()
    if params.depth_noise > 0:
        vals = vals + np.where(valid, rng.normal(0.0, params.depth_noise, vals.shape), 0.0)
    if params.dropout > 0:
        valid &= rng.random(vals.shape) >= params.dropout
    noisy = DepthMap(vals, valid)
    return SynthFrame(frame_id, pose, occluders, clean, noisy, visible, full)


def _camera_entry(params: SynthParams) -> dict:
    i = params.intrinsics
    return {
        "fx": i.fx, "fy": i.fy, "cx": i.cx, "cy": i.cy,
        "width": i.width, "height": i.height,
        "cam_K": i.K.reshape(-1).tolist(),
        "baseline": params.baseline,
        "depth_scale": params.depth_scale,
    }


def _pose_entry(pose: RigidTransform, obj_id: int) -> dict:
    return {
        "cam_R_m2c": pose.rotation.reshape(-1).tolist(),
        "cam_t_m2c": pose.translation.tolist(),
        "obj_id": obj_id,
    }


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def generate_synthetic(mesh: TriangleMesh, occluder_meshes, params: SynthParams, out_dir,
                       jobs: int = 1) -> Path:
    """Render `params.n_frames` frames and write them as a scene directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    occluder_meshes = list(occluder_meshes or [])

    def one(fid: int) -> SynthFrame:
        f = synthesize_frame(mesh, occluder_meshes, params, fid)
        name = frame_name(fid)
        write_depth_png(f.depth, out / "depth" / f"{name}.png", params.depth_scale)
        write_mask_png(f.mask_visib, out / "mask_visib" / f"{name}.png")
        write_mask_png(f.mask_full, out / "mask_full" / f"{name}.png")
        return f

    ids = range(params.n_frames)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            frames = list(ex.map(one, ids))
    else:
        frames = [one(i) for i in ids]

    cam = {str(f.frame_id): _camera_entry(params) for f in frames}
    gt = {str(f.frame_id): [_pose_entry(f.gt_pose, 1)] for f in frames}
    occ = {
        str(f.frame_id): [
            {**_pose_entry(pl, 100 + mi), "scale": s} for mi, s, pl in f.occluders
        ]
        for f in frames
    }
    _dump_json(cam, out / "scene_camera.json")
    _dump_json(gt, out / "scene_gt.json")
    _dump_json(occ, out / "scene_occluders.json")
    return out


# ---------------------------------------------------------------- results


@dataclass(frozen=True)
class ResultRecord:
    frame_id: int
    pose: RigidTransform | None
    score: float = 0.0
    status: str = "ok"
    message: str = ""
    n_icp_iters: int = 0
    inlier_fraction: float = 0.0

    @property
    def failed(self) -> bool:
        return self.status != "ok"


def write_results(records, path) -> None:
    rows = []
    for r in records:
        row = {
            "frame_id": r.frame_id,
            "R": None if r.pose is None else r.pose.rotation.reshape(-1).tolist(),
            "t": None if r.pose is None else r.pose.translation.tolist(),
            "score": r.score,
            "status": r.status,
            "n_icp_iters": r.n_icp_iters,
            "inlier_fraction": r.inlier_fraction,
        }
        if r.message:
            row["message"] = r.message
        rows.append(row)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def load_results(path) -> list[ResultRecord]:
    data = _read_json(Path(path))
    if not isinstance(data, list):
        raise SceneError(f"{path}: results must be a JSON array")
    out = []
    for i, row in enumerate(data):
        where = f"{path}:$[{i}]"
        if not isinstance(row, dict):
            raise SceneError(f"{where}: expected an object")
        if not isinstance(row.get("frame_id"), int) or isinstance(row.get("frame_id"), bool):
            raise SceneError(f"{where}.frame_id: expected an integer")
        status = row.get("status", "ok")
        if status not in ("ok", "failed"):
            raise SceneError(f"{where}.status: expected 'ok' or 'failed', got {status!r}")
        pose = None
        if status == "ok":
            R = np.array(_numbers(row, "R", 9, where)).reshape(3, 3)
            t = _numbers(row, "t", 3, where)
            try:
                pose = RigidTransform(R, t)
            except ValueError:
                try:
                    pose = RigidTransform.from_approx(R, t, tol=ORTHO_LOAD_TOL)
                except ValueError as e:
                    raise SceneError(f"{where}.R: {e}") from None
        score = _number(row, "score", where) if "score" in row else 0.0
        out.append(ResultRecord(
            frame_id=row["frame_id"],
            pose=pose,
            score=float(score),
            status=status,
            message=str(row.get("message", "")),
            n_icp_iters=int(row.get("n_icp_iters", 0)),
            inlier_fraction=float(row.get("inlier_fraction", 0.0)),
        ))
    return out
