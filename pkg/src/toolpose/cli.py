"""Command-line entry point: ``toolpose <subcommand> ...``.

Exit status is 0 when every requested output was written and 2 on any
configuration or input error. Per-frame estimation failures are recorded
in the results file and do not change the exit status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from toolpose.dataset import (
    ResultRecord,
    SceneError,
    SynthParams,
    frame_name,
    generate_synthetic,
    load_results,
    load_scene,
    write_results,
)
from toolpose.estimator import EstimationError, EstimatorParams, estimate_pose, sample_viewpoints
from toolpose.geometry import BehindCameraError, CameraIntrinsics, StereoRig
from toolpose.maps import (
    DEFAULT_DEPTH_SCALE,
    read_gray_png,
    read_mask_png,
    write_depth_png,
    write_mask_png,
)
from toolpose.mesh import MeshError, resolve_mesh
from toolpose.metrics import (
    PoseMetricRecord,
    add_metric,
    projection_metric,
    seg_ap_ar,
    summarize_pose,
)
from toolpose.pseudolabel import PseudoLabelParams, generate_pseudo_mask
from toolpose.stereo import (
    MIN_DISPARITY_FLOOR,
    MatcherParams,
    disparity_to_depth,
    load_disparity_pfm,
    match_block,
    save_disparity_pfm,
)

log = logging.getLogger("toolpose")


class UsageError(Exception):
    """Bad flags, missing inputs or inconsistent files."""


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _frame_depth(frame):
    """Observed depth of a scene frame: the depth PNG, else converted PFM disparity."""
    if frame.depth_path is not None:
        return frame.load_depth()
    return disparity_to_depth(load_disparity_pfm(frame.disparity_path), frame.camera)


# ---------------------------------------------------------------- depth


def _load_rig(args, width: int, height: int) -> StereoRig:
    if args.camera:
        data = json.loads(_require_file(args.camera, "camera file").read_text())
        if "fx" not in data and "cam_K" not in data and data:
            data = data[sorted(data, key=lambda k: (len(k), k))[0]]  # scene_camera.json: first frame
        if "cam_K" in data and "fx" not in data:
            K = data["cam_K"]
            data = {**data, "fx": K[0], "fy": K[4], "cx": K[2], "cy": K[5]}
        try:
            intr = CameraIntrinsics(float(data["fx"]), float(data["fy"]), float(data["cx"]), float(data["cy"]),
                                    int(data.get("width", width)), int(data.get("height", height)))
            return StereoRig(intr, float(data["baseline"]))
        except KeyError as e:
            raise UsageError(f"camera file lacks field {e}") from None
    if args.fx is None or args.baseline is None:
        raise UsageError("give --camera, or both --fx and --baseline")
    fy = args.fy if args.fy is not None else args.fx
    cx = args.cx if args.cx is not None else width / 2.0
    cy = args.cy if args.cy is not None else height / 2.0
    return StereoRig(CameraIntrinsics(args.fx, fy, cx, cy, width, height), args.baseline)


def cmd_depth(args) -> int:
    if args.disparity_in:
        disp = load_disparity_pfm(_require_file(args.disparity_in, "disparity file"))
    else:
        if not (args.left and args.right):
            raise UsageError("need --left and --right images (or --disparity-in)")
        left = read_gray_png(_require_file(args.left, "left image"))
        right = read_gray_png(_require_file(args.right, "right image"))
        params = MatcherParams(window=args.window, max_disparity=args.max_disparity,
                               lr_tolerance=args.lr_tolerance, uniqueness_ratio=args.uniqueness)
        disp = match_block(left, right, params)
        if args.disparity_out:
            save_disparity_pfm(disp, args.disparity_out)
    rig = _load_rig(args, disp.width, disp.height)
    if rig.intrinsics.shape != disp.shape:
        raise UsageError(f"camera is {rig.intrinsics.width}x{rig.intrinsics.height} "
                         f"but disparity is {disp.width}x{disp.height}")
    depth = disparity_to_depth(disp, rig, args.min_disparity)
    out = Path(args.out)
    write_depth_png(depth, out, args.depth_scale)
    meta = {
        "depth_scale": args.depth_scale,
        "width": depth.width,
        "height": depth.height,
        "valid_fraction": depth.valid_fraction(),
        "fx": rig.intrinsics.fx,
        "baseline": rig.baseline,
    }
    _write_json(meta, out.with_suffix(".json"))
    print(f"valid depth pixels: {100 * depth.valid_fraction():.2f}%")
    return 0


# ---------------------------------------------------------------- pseudomask


def cmd_pseudomask(args) -> int:
    mesh = resolve_mesh(args.mesh)
    frames = load_scene(args.scene)
    out = Path(args.out) if args.out else Path(args.scene) / "mask_pseudo"
    params = PseudoLabelParams(args.epsilon)
    for f in frames:
        mask, report = generate_pseudo_mask(mesh, f.gt_pose, f.intrinsics, _frame_depth(f), params)
        write_mask_png(mask, out / f"{frame_name(f.frame_id)}.png")
        report.to_json(out / f"{frame_name(f.frame_id)}.json")
        log.info("frame %d: kept %d of %d projected pixels", f.frame_id,
                 report.retained_pixels, report.projected_pixels)
    print(f"wrote {len(frames)} pseudo-label masks to {out}")
    return 0


# ---------------------------------------------------------------- estimate


def _estimator_params(args) -> EstimatorParams:
    return EstimatorParams(
        n_viewpoints=args.n_viewpoints,
        n_inplane=args.n_inplane,
        score_tau=args.score_tau,
        icp_max_iters=args.icp_max_iters,
        icp_corr_dist=args.icp_corr_dist,
        icp_converge_tol=args.icp_converge_tol,
        min_mask_pixels=args.min_mask_pixels,
        top_k=args.top_k,
        n_model_points=args.n_model_points,
        seed=args.seed,
    )


def cmd_estimate(args) -> int:
    mesh = resolve_mesh(args.mesh)
    frames = load_scene(args.scene)
    params = _estimator_params(args)
    mask_dir = Path(args.mask_dir) if args.mask_dir else Path(args.scene) / "mask_visib"
    if args.mask_source == "file":
        missing = [str(mask_dir / f"{frame_name(f.frame_id)}.png") for f in frames
                   if not (mask_dir / f"{frame_name(f.frame_id)}.png").is_file()]
        if missing:
            raise UsageError(f"--mask-source file: missing mask file(s): {', '.join(missing)}")
    rotations = sample_viewpoints(params)
    pl_params = PseudoLabelParams(args.epsilon)
    records = []
    for f in frames:
        depth = _frame_depth(f)
        if args.mask_source == "file":
            mask = read_mask_png(mask_dir / f"{frame_name(f.frame_id)}.png")
        else:
            mask, _ = generate_pseudo_mask(mesh, f.gt_pose, f.intrinsics, depth, pl_params)
        try:
            if mask.shape != f.intrinsics.shape:
                raise EstimationError(f"mask is {mask.width}x{mask.height}, camera is "
                                      f"{f.intrinsics.width}x{f.intrinsics.height}")
            res = estimate_pose(mesh, f.intrinsics, depth, mask, params, jobs=args.jobs, rotations=rotations)
        except (EstimationError, ValueError) as e:
            log.warning("frame %d: estimation failed: %s", f.frame_id, e)
            records.append(ResultRecord(f.frame_id, None, 0.0, "failed", str(e)))
            continue
        log.info("frame %d: score %.3f after %d ICP iterations", f.frame_id, res.score, res.n_icp_iters)
        records.append(ResultRecord(f.frame_id, res.pose, res.score, "ok", "",
                                    res.n_icp_iters, res.inlier_fraction))
    write_results(records, args.out)
    n_failed = sum(r.failed for r in records)
    print(f"estimated {len(records) - n_failed} of {len(records)} frames; results in {args.out}")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    mesh = resolve_mesh(args.mesh)
    frames = {f.frame_id: f for f in load_scene(args.scene)}
    results = load_results(_require_file(args.results, "results file"))
    unknown = sorted({r.frame_id for r in results} - frames.keys())
    if unknown:
        raise UsageError(f"results reference frames absent from the scene: {unknown}")
    records, excluded = [], 0
    for r in results:
        if r.failed:
            excluded += 1
            continue
        f = frames[r.frame_id]
        try:
            proj = projection_metric(mesh, f.gt_pose, r.pose, f.intrinsics)
        except BehindCameraError as e:
            log.warning("frame %d excluded: %s", r.frame_id, e)
            excluded += 1
            continue
        records.append(PoseMetricRecord(r.frame_id, add_metric(mesh, f.gt_pose, r.pose), proj))
    if not records:
        raise UsageError("no frame could be evaluated")
    summary = summarize_pose(records, n_excluded=excluded)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(summary.to_json())
        per_frame = [{"frame_id": r.frame_id, "add_mm": r.add_mm, "proj_px": r.proj_px} for r in records]
        _write_json(per_frame, out.with_name(out.stem + "_frames.json"))
    sys.stdout.write(summary.to_json() if args.report == "json" else summary.to_table())
    return 0


def _read_seg_dir(gt_dir: Path) -> dict[int, list[Path]]:
    out: dict[int, list[Path]] = {}
    for p in sorted(gt_dir.glob("*.png")):
        head = p.stem.split("_", 1)[0]
        try:
            fid = int(head)
        except ValueError:
            raise UsageError(f"cannot parse a frame id from {p.name}") from None
        out.setdefault(fid, []).append(p)
    return out


def cmd_eval_seg(args) -> int:
    pred_dir = Path(args.pred_dir)
    conf = json.loads(_require_file(args.confidences, "confidences file").read_text())
    if not isinstance(conf, dict):
        raise UsageError("confidences JSON must map frame id -> list of {mask, score}")
    gt = _read_seg_dir(Path(args.gt_dir))
    pred_ids = {int(k) for k in conf}
    if pred_ids != set(gt):
        raise UsageError(
            f"prediction and ground-truth frames do not align: only in predictions "
            f"{sorted(pred_ids - set(gt))}, only in ground truth {sorted(set(gt) - pred_ids)}"
        )
    data = []
    for key in sorted(conf, key=int):
        preds = []
        for i, item in enumerate(conf[key]):
            if not isinstance(item, dict) or "mask" not in item or "score" not in item:
                raise UsageError(f"confidences[{key}][{i}]: expected {{'mask': ..., 'score': ...}}")
            preds.append((read_mask_png(_require_file(pred_dir / item["mask"], "prediction mask")), item["score"]))
        data.append((preds, [read_mask_png(p) for p in gt[int(key)]]))
    summary = seg_ap_ar(data)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(summary.to_json())
    sys.stdout.write(summary.to_json() if args.report == "json" else summary.to_table())
    return 0


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    mesh = resolve_mesh(args.mesh)
    occluders = [resolve_mesh(m) for m in args.occluder]
    if args.n_occluders > 0 and not occluders:
        raise UsageError("--n-occluders > 0 needs at least one --occluder mesh")
    params = SynthParams(
        n_frames=args.n_frames, width=args.width, height=args.height, fx=args.fx,
        fy=args.fy if args.fy is not None else args.fx, baseline=args.baseline,
        x_range=tuple(args.x_range), y_range=tuple(args.y_range), z_range=tuple(args.z_range),
        n_occluders=args.n_occluders, occluder_scale=tuple(args.occluder_scale),
        occlusion_fraction=tuple(args.occlusion_fraction), min_occluder_gap=args.min_occluder_gap,
        depth_noise=args.depth_noise, dropout=args.dropout, depth_scale=args.depth_scale,
        max_retries=args.max_retries, seed=args.seed,
    )
    out = generate_synthetic(mesh, occluders, params, args.out, jobs=args.jobs)
    print(f"wrote {params.n_frames} frames to {out}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="toolpose", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, jobs=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0, help="seed for every random choice")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1,
                            help="worker threads; outputs do not depend on it")

    # depth
    d = sub.add_parser("depth", formatter_class=fmt,
                       help="stereo pair (or external PFM disparity) -> depth PNG")
    d.add_argument("--left", help="rectified left image (PNG)")
    d.add_argument("--right", help="rectified right image (PNG)")
    d.add_argument("--disparity-in", help="PFM disparity to convert instead of matching")
    d.add_argument("--disparity-out", help="also write the matched disparity as PFM")
    d.add_argument("--out", required=True, help="output 16-bit depth PNG; metadata goes to <out>.json")
    d.add_argument("--camera", help="JSON with fx, fy, cx, cy, width, height, baseline (StereoRig)")
    d.add_argument("--fx", type=float, help="horizontal focal length, px (CameraIntrinsics.fx)")
    d.add_argument("--fy", type=float, help="vertical focal length, px; defaults to --fx")
    d.add_argument("--cx", type=float, help="principal point x, px; defaults to width/2")
    d.add_argument("--cy", type=float, help="principal point y, px; defaults to height/2")
    d.add_argument("--baseline", type=float, help="stereo baseline, mm (StereoRig.baseline)")
    d.add_argument("--window", type=int, default=9, help="ZNCC window side, px (MatcherParams.window)")
    d.add_argument("--max-disparity", type=int, default=128, help="px (MatcherParams.max_disparity)")
    d.add_argument("--lr-tolerance", type=float, default=1.0, help="px (MatcherParams.lr_tolerance)")
    d.add_argument("--uniqueness", type=float, default=0.95,
                   help="best/second-best cost ratio (MatcherParams.uniqueness_ratio)")
    d.add_argument("--min-disparity", type=float, default=MIN_DISPARITY_FLOOR,
                   help="px; smaller disparities become invalid (disparity_to_depth floor)")
    d.add_argument("--depth-scale", type=float, default=DEFAULT_DEPTH_SCALE, help="mm per PNG unit")
    d.add_argument("--seed", type=int, default=0, help="accepted for uniformity; matching is deterministic")
    d.add_argument("--jobs", type=int, default=1, help="accepted for uniformity; matching is vectorised")
    d.set_defaults(func=cmd_depth)

    # pseudomask
    pm = sub.add_parser("pseudomask", formatter_class=fmt,
                        help="visible-object masks from CAD model, GT pose and observed depth")
    pm.add_argument("scene", help="scene directory")
    pm.add_argument("--mesh", required=True, help="object mesh (.ply/.obj, mm) or builtin:<name>")
    pm.add_argument("--epsilon", type=float, default=1.0,
                    help="depth agreement threshold, mm (PseudoLabelParams.epsilon)")
    pm.add_argument("--out", help="output directory; defaults to <scene>/mask_pseudo")
    common(pm)
    pm.set_defaults(func=cmd_pseudomask)

    # estimate
    e = sub.add_parser("estimate", formatter_class=fmt, help="per-frame 6DoF pose estimation")
    e.add_argument("scene", help="scene directory")
    e.add_argument("--mesh", required=True, help="object mesh (.ply/.obj, mm) or builtin:<name>")
    e.add_argument("--out", required=True, help="results JSON")
    e.add_argument("--mask-source", choices=("pseudo", "file"), default="file",
                   help="'file' reads masks from --mask-dir; 'pseudo' builds them from GT pose + depth")
    e.add_argument("--mask-dir", help="mask directory for --mask-source file; defaults to <scene>/mask_visib")
    e.add_argument("--epsilon", type=float, default=1.0, help="mm, for --mask-source pseudo")
    e.add_argument("--n-viewpoints", type=int, default=162, help="icosphere directions (EstimatorParams.n_viewpoints)")
    e.add_argument("--n-inplane", type=int, default=12, help="in-plane rotations per direction (EstimatorParams.n_inplane)")
    e.add_argument("--score-tau", type=float, default=3.0, help="depth agreement for scoring, mm (EstimatorParams.score_tau)")
    e.add_argument("--top-k", type=int, default=5, help="hypotheses refined by ICP (EstimatorParams.top_k)")
    e.add_argument("--icp-max-iters", type=int, default=60, help="(EstimatorParams.icp_max_iters)")
    e.add_argument("--icp-corr-dist", type=float, default=10.0, help="inlier gate, mm (EstimatorParams.icp_corr_dist)")
    e.add_argument("--icp-converge-tol", type=float, default=1e-3,
                   help="translation change to stop, mm (EstimatorParams.icp_converge_tol)")
    e.add_argument("--min-mask-pixels", type=int, default=50, help="(EstimatorParams.min_mask_pixels)")
    e.add_argument("--n-model-points", type=int, default=5000,
                   help="surface samples for ICP, drawn with --seed (EstimatorParams.n_model_points)")
    common(e)
    e.set_defaults(func=cmd_estimate)

    # eval
    ev = sub.add_parser("eval", formatter_class=fmt, help="ADD / 2D projection summary of a results file")
    ev.add_argument("scene", help="scene directory with ground truth")
    ev.add_argument("--results", required=True, help="results JSON from 'estimate'")
    ev.add_argument("--mesh", required=True, help="object mesh (.ply/.obj, mm) or builtin:<name>")
    ev.add_argument("--report", choices=("table", "json"), default="table", help="stdout format")
    ev.add_argument("--out", help="also write the summary JSON here (per-frame values to <out>_frames.json)")
    common(ev)
    ev.set_defaults(func=cmd_eval)

    # eval-seg
    es = sub.add_parser("eval-seg", formatter_class=fmt, help="mask AP/AR over IoU 0.50:0.95")
    es.add_argument("--pred-dir", required=True, help="directory holding predicted mask PNGs")
    es.add_argument("--confidences", required=True,
                    help='JSON {"<frame>": [{"mask": "<file in pred-dir>", "score": 0..1}, ...]}')
    es.add_argument("--gt-dir", required=True, help="ground-truth masks named <frame>.png or <frame>_<k>.png")
    es.add_argument("--report", choices=("table", "json"), default="table", help="stdout format")
    es.add_argument("--out", help="also write the summary JSON here")
    common(es)
    es.set_defaults(func=cmd_eval_seg)

    # synth
    s = sub.add_parser("synth", formatter_class=fmt, help="render a synthetic scene with ground truth")
    s.add_argument("--mesh", required=True, help="object mesh (.ply/.obj, mm) or builtin:<name>")
    s.add_argument("--occluder", action="append", default=[], help="occluder mesh; repeatable")
    s.add_argument("--out", required=True, help="output scene directory")
    s.add_argument("--n-frames", type=int, default=10, help="(SynthParams.n_frames)")
    s.add_argument("--width", type=int, default=960, help="px (SynthParams.width)")
    s.add_argument("--height", type=int, default=540, help="px (SynthParams.height)")
    s.add_argument("--fx", type=float, default=800.0, help="px (SynthParams.fx)")
    s.add_argument("--fy", type=float, help="px; defaults to --fx (SynthParams.fy)")
    s.add_argument("--baseline", type=float, default=5.0, help="mm, recorded in scene_camera.json")
    s.add_argument("--x-range", type=float, nargs=2, default=[-40.0, 40.0], help="object x, mm")
    s.add_argument("--y-range", type=float, nargs=2, default=[-25.0, 25.0], help="object y, mm")
    s.add_argument("--z-range", type=float, nargs=2, default=[200.0, 320.0], help="object z, mm")
    s.add_argument("--n-occluders", type=int, default=0, help="occluders per frame (SynthParams.n_occluders)")
    s.add_argument("--occluder-scale", type=float, nargs=2, default=[0.5, 1.0], help="uniform scale range")
    s.add_argument("--occlusion-fraction", type=float, nargs=2, default=[0.05, 0.6],
                   help="accepted fraction of the object hidden by occluders")
    s.add_argument("--min-occluder-gap", type=float, default=10.0, help="mm between occluder and object")
    s.add_argument("--depth-noise", type=float, default=0.0, help="Gaussian sigma, mm")
    s.add_argument("--dropout", type=float, default=0.0, help="probability a depth pixel is dropped")
    s.add_argument("--depth-scale", type=float, default=DEFAULT_DEPTH_SCALE, help="mm per PNG unit")
    s.add_argument("--max-retries", type=int, default=500, help="pose/occluder sampling attempts")
    common(s)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, SceneError, MeshError, ValueError, OSError, EstimationError) as e:
        print(f"toolpose {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
