"""Disparity from rectified stereo pairs, PFM ingestion, and depth conversion.

The matcher is a classical ZNCC block matcher meant as a desk-scale stand-in
for a learned disparity network; real pipelines feed external disparity in
through `load_disparity_pfm`.

Disparity convention: left-image referenced and positive, i.e. left pixel x
corresponds to right pixel x - d.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from toolpose.geometry import StereoRig
from toolpose.maps import DepthMap, DisparityMap, GrayImage

MIN_DISPARITY_FLOOR = 0.5  # px


class StereoError(ValueError):
    pass


class PFMError(StereoError):
    pass


@dataclass(frozen=True)
class MatcherParams:
    window: int = 9
    max_disparity: int = 128
    lr_tolerance: float = 1.0
    uniqueness_ratio: float = 0.95
    min_variance: float = 1e-10

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise StereoError(f"window must be odd and >= 3, got {self.window}")
        if self.max_disparity < 1:
            raise StereoError(f"max_disparity must be >= 1, got {self.max_disparity}")
        if not self.lr_tolerance > 0:
            raise StereoError("lr_tolerance must be positive")
        if not 0 < self.uniqueness_ratio <= 1:
            raise StereoError("uniqueness_ratio must be in (0, 1]")


def _box_sum(a: np.ndarray, half: int) -> np.ndarray:
    """Window sum centred on each pixel; NaN where the window leaves the image.

    Summation order is fixed relative to the pixel, so results are
    bit-identical under integer translation of the input.
    """
    h, w = a.shape
    out = np.full((h, w), np.nan)
    if h <= 2 * half or w <= 2 * half:
        return out
    cols = a[:, 0 : w - 2 * half].copy()
    for k in range(1, 2 * half + 1):
        cols += a[:, k : w - 2 * half + k]
    rows = cols[0 : h - 2 * half].copy()
    for k in range(1, 2 * half + 1):
        rows += cols[k : h - 2 * half + k]
    out[half : h - half, half : w - half] = rows
    return out


def _shift_right(a: np.ndarray, d: int, fill=np.nan) -> np.ndarray:
    """out[:, x] = a[:, x - d]."""
    if d == 0:
        return a
    out = np.full_like(a, fill)
    out[:, d:] = a[:, :-d]
    return out


def zncc_cost_volume(left: np.ndarray, right: np.ndarray, params: MatcherParams) -> np.ndarray:
    """Cost 1 - ZNCC for d in [0, max_disparity]; +inf where undefined. Shape (D+1, H, W)."""
    half = params.window // 2
    n = float(params.window**2)
    mu_l = _box_sum(left, half) / n
    mu_r = _box_sum(right, half) / n
    var_l = _box_sum(left * left, half) / n - mu_l**2
    var_r = _box_sum(right * right, half) / n - mu_r**2
    h, w = left.shape
    vol = np.full((params.max_disparity + 1, h, w), np.inf, dtype=np.float32)
    with np.errstate(invalid="ignore", divide="ignore"):
        for d in range(params.max_disparity + 1):
            r_shift = _shift_right(right, d)
            cross = _box_sum(left * r_shift, half) / n
            mr = _shift_right(mu_r, d)
            vr = _shift_right(var_r, d)
            denom = np.sqrt(np.maximum(var_l, 0.0) * np.maximum(vr, 0.0))
            zncc = (cross - mu_l * mr) / denom
            ok = np.isfinite(zncc) & (var_l > params.min_variance) & (vr > params.min_variance)
            vol[d][ok] = (1.0 - np.clip(zncc[ok], -1.0, 1.0)).astype(np.float32)
    return vol


def _winner(vol: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # argmin returns the first minimum: ties go to the smallest disparity
    best = np.argmin(vol, axis=0)
    best_cost = np.take_along_axis(vol, best[None], axis=0)[0]
    return best, best_cost


def right_view_disparity(vol: np.ndarray) -> np.ndarray:
    """Integer winner-take-all disparity for the right image, -1 where undefined.

    Right pixel x pairs with left pixel x + d, whose cost is vol[d, :, x + d].
    """
    dmax, h, w = vol.shape[0] - 1, vol.shape[1], vol.shape[2]
    vol_r = np.full_like(vol, np.inf)
    for d in range(dmax + 1):
        vol_r[d, :, : w - d] = vol[d, :, d:]
    best, cost = _winner(vol_r)
    return np.where(np.isfinite(cost), best, -1)


def lr_consistent(disp_left: np.ndarray, valid: np.ndarray, disp_right: np.ndarray,
                  tolerance: float) -> np.ndarray:
    """Left pixels whose disparity agrees with the right view's within `tolerance`."""
    h, w = disp_left.shape
    xs = np.arange(w)[None, :].repeat(h, axis=0)
    xr = np.rint(xs - disp_left).astype(np.int64)
    inside = valid & (xr >= 0) & (xr < w)
    rows = np.arange(h)[:, None].repeat(w, axis=1)
    dr = np.where(inside, disp_right[rows, np.clip(xr, 0, w - 1)], -1)
    return inside & (dr >= 0) & (np.abs(disp_left - dr) <= tolerance)


def match_block(left: GrayImage, right: GrayImage, params: MatcherParams | None = None) -> DisparityMap:
    """ZNCC block matching with subpixel, left-right and uniqueness checks."""
    params = params or MatcherParams()
    if left.shape != right.shape:
        raise StereoError(f"image dimensions differ: left {left.width}x{left.height}, "
                          f"right {right.width}x{right.height}")
    h, w = left.shape
    if params.window > min(h, w):
        raise StereoError(f"window {params.window} larger than image {w}x{h}")
    if params.max_disparity >= w:
        raise StereoError(f"max_disparity {params.max_disparity} must be < image width {w}")

    vol = zncc_cost_volume(left.pixels, right.pixels, params)
    best, best_cost = _winner(vol)
    dmax = params.max_disparity
    valid = np.isfinite(best_cost)

    # uniqueness: best must beat every candidate outside d-1..d+1 by the ratio
    ds = np.arange(dmax + 1)[:, None, None]
    far = np.abs(ds - best[None]) > 1
    second = np.where(far, vol, np.inf).min(axis=0)
    valid &= ~(best_cost.astype(np.float64) >= params.uniqueness_ratio * second.astype(np.float64))

    # 3-point parabola around the winner, skipped at the search-range ends
    disp = best.astype(np.float64)
    inner = valid & (best > 0) & (best < dmax)
    bi = np.clip(best, 1, dmax - 1)
    c_m = np.take_along_axis(vol, (bi - 1)[None], axis=0)[0].astype(np.float64)
    c_0 = best_cost.astype(np.float64)
    c_p = np.take_along_axis(vol, (bi + 1)[None], axis=0)[0].astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        curv = c_m - 2.0 * c_0 + c_p
        offset = np.where(curv > 0, 0.5 * (c_m - c_p) / curv, 0.0)
    use = inner & np.isfinite(c_m) & np.isfinite(c_p) & np.isfinite(offset)
    disp = np.where(use, disp + np.clip(offset, -0.5, 0.5), disp)

    valid &= lr_consistent(disp, valid, right_view_disparity(vol), params.lr_tolerance)
    return DisparityMap(np.where(valid, disp, 0.0), valid)


# ---------------------------------------------------------------- PFM


def load_disparity_pfm(path) -> DisparityMap:
    """Read a grayscale PFM; non-positive or non-finite entries are invalid.

    PFM stores rows bottom-to-top; the returned map is top-to-bottom.
    """
    data = Path(path).read_bytes()
    # three whitespace-terminated header tokens: magic, "W H", scale
    m = re.match(rb"(P[Ff])\s+(-?\d+)\s+(-?\d+)\s+([-+0-9.eE]+)\s", data)
    if m is None:
        raise PFMError(f"{path}: malformed PFM header")
    if m.group(1) != b"Pf":
        raise PFMError(f"{path}: colour PFM ('PF') is not a disparity map; expected 'Pf'")
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise PFMError(f"{path}: bad PFM scale {m.group(4)!r}") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise PFMError(f"{path}: invalid PFM dimensions {w}x{h} or scale {scale}")
    body = data[m.end():]
    if w * h * 4 > len(body):
        raise PFMError(f"{path}: PFM declares {w}x{h} floats but holds only {len(body)} bytes")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w)[::-1].astype(np.float64)
    return DisparityMap.from_array(arr)


def save_disparity_pfm(disp: DisparityMap, path, little_endian: bool = True) -> None:
    """Write a grayscale PFM; invalid pixels are stored as 0."""
    arr = np.where(disp.valid, disp.values, 0.0)[::-1]
    dtype = "<f4" if little_endian else ">f4"
    header = f"Pf\n{disp.width} {disp.height}\n{-1.0 if little_endian else 1.0}\n".encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=dtype).tobytes())


# ---------------------------------------------------------------- conversion


def disparity_to_depth(disp: DisparityMap, rig: StereoRig,
                       min_disparity_floor: float = MIN_DISPARITY_FLOOR) -> DepthMap:
    """Z = fx * B / d on valid pixels with d >= floor; everything else invalid."""
    ok = disp.valid & (disp.values >= min_disparity_floor)
    fb = rig.intrinsics.fx * rig.baseline
    with np.errstate(divide="ignore"):
        z = np.where(ok, fb / np.where(ok, disp.values, 1.0), 0.0)
    return DepthMap(z, ok)


def depth_to_disparity(depth: DepthMap, rig: StereoRig) -> DisparityMap:
    fb = rig.intrinsics.fx * rig.baseline
    d = np.where(depth.valid, fb / np.where(depth.valid, depth.values, 1.0), 0.0)
    return DisparityMap(d, depth.valid)

