from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereo_fixtures import shifted_pair
from toolpose.geometry import CameraIntrinsics, StereoRig
from toolpose.maps import DepthMap, DisparityMap, GrayImage
from toolpose.stereo import (
    MatcherParams,
    PFMError,
    StereoError,
    depth_to_disparity,
    disparity_to_depth,
    load_disparity_pfm,
    lr_consistent,
    match_block,
    right_view_disparity,
    save_disparity_pfm,
    zncc_cost_volume,
)

PARAMS = MatcherParams(max_disparity=32)


def _rig(fx=700.0, baseline=5.0, w=4, h=4):
    return StereoRig(CameraIntrinsics(fx, fx, w / 2, h / 2, w, h), baseline)


class TestMatcher:
    def test_shift_8(self):
        left, right = shifted_pair(80, 160, 8, seed=1)
        disp = match_block(left, right, PARAMS)
        assert disp.valid.mean() > 0.5
        assert abs(np.median(disp.values[disp.valid]) - 8.0) <= 0.25

    def test_zero_shift(self):
        left, _ = shifted_pair(60, 120, 0, seed=2)
        disp = match_block(left, left, PARAMS)
        vals = disp.values[disp.valid]
        assert vals.size == 0 or np.median(vals) < 0.25

    def test_textureless(self):
        flat = GrayImage(np.full((60, 120), 0.5))
        disp = match_block(flat, flat, PARAMS)
        assert (~disp.valid).mean() >= 0.95

    def test_output_range(self):
        left, right = shifted_pair(60, 140, 13, seed=3)
        disp = match_block(left, right, PARAMS)
        v = disp.values[disp.valid]
        assert (v > 0).all() and (v < PARAMS.max_disparity + 1).all()

    def test_lr_check_idempotent(self):
        left, right = shifted_pair(60, 140, 5, seed=4)
        disp = match_block(left, right, PARAMS)
        vol = zncc_cost_volume(left.pixels, right.pixels, PARAMS)
        again = lr_consistent(disp.values, disp.valid, right_view_disparity(vol), PARAMS.lr_tolerance)
        assert np.array_equal(again, disp.valid)

    def test_translation_equivariance(self):
        m = PARAMS.window + PARAMS.max_disparity
        for k in (1, 7):
            l0, r0 = shifted_pair(50, 150, 6, seed=5)
            lk, rk = shifted_pair(50, 150, 6, seed=5, offset=k)
            d0, dk = match_block(l0, r0, PARAMS), match_block(lk, rk, PARAMS)
            a0 = np.where(d0.valid, d0.values, -1)[:, m + k : -m]
            ak = np.where(dk.valid, dk.values, -1)[:, m : -m - k]
            assert np.array_equal(a0, ak)
            h0 = np.unique(a0[a0 > 0], return_counts=True)
            hk = np.unique(ak[ak > 0], return_counts=True)
            assert all(np.array_equal(x, y) for x, y in zip(h0, hk))

    def test_deterministic(self):
        left, right = shifted_pair(40, 100, 4, seed=6)
        a, b = match_block(left, right, PARAMS), match_block(left, right, PARAMS)
        assert a == b

    def test_errors(self):
        a = GrayImage(np.zeros((20, 30)))
        with pytest.raises(StereoError, match="dimension"):
            match_block(a, GrayImage(np.zeros((20, 31))), MatcherParams(max_disparity=4))
        with pytest.raises(StereoError, match="window"):
            match_block(a, a, MatcherParams(window=21, max_disparity=4))
        with pytest.raises(StereoError):
            match_block(a, a, MatcherParams(max_disparity=30))
        with pytest.raises(StereoError):
            MatcherParams(window=4)


class TestPFM:
    def _write(self, path, arr, little=True, magic=b"Pf"):
        h, w = arr.shape
        scale = -1.0 if little else 1.0
        dt = "<f4" if little else ">f4"
        path.write_bytes(magic + f"\n{w} {h}\n{scale}\n".encode()
                         + np.asarray(arr[::-1], dtype=dt).tobytes())

    def test_values(self, tmp_path):
        p = tmp_path / "a.pfm"
        self._write(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
        d = load_disparity_pfm(p)
        assert d.valid.all() and np.array_equal(d.values, [[1, 2], [3, 4]])

    def test_negative_sentinel(self, tmp_path):
        p = tmp_path / "a.pfm"
        self._write(p, np.array([[1.0, -1.0], [np.inf, 4.0]]))
        d = load_disparity_pfm(p)
        assert d.valid.tolist() == [[True, False], [False, True]]

    def test_endianness(self, tmp_path):
        arr = np.random.default_rng(0).uniform(0.5, 90, (5, 7)).astype(np.float32)
        self._write(tmp_path / "le.pfm", arr, little=True)
        self._write(tmp_path / "be.pfm", arr, little=False)
        assert load_disparity_pfm(tmp_path / "le.pfm") == load_disparity_pfm(tmp_path / "be.pfm")

    def test_save_round_trip(self, tmp_path):
        arr = np.random.default_rng(1).uniform(0.5, 90, (5, 7)).astype(np.float32).astype(np.float64)
        arr[2, 3] = 0
        d = DisparityMap.from_array(arr)
        for little in (True, False):
            save_disparity_pfm(d, tmp_path / "x.pfm", little_endian=little)
            assert load_disparity_pfm(tmp_path / "x.pfm") == d

    @pytest.mark.parametrize("blob", [b"P5\n2 2\n-1\n", b"Pf\n2\n-1\n", b"PF\n1 1\n-1\n" + b"\0" * 12,
                                      b"Pf\n1000 1000\n-1\n" + b"\0" * 16, b"Pf\n0 2\n-1\n"])
    def test_malformed(self, tmp_path, blob):
        p = tmp_path / "bad.pfm"
        p.write_bytes(blob)
        with pytest.raises(PFMError):
            load_disparity_pfm(p)


class TestDepthConversion:
    def test_example(self):
        d = DisparityMap(np.array([[10.0, 0.0]]), np.array([[True, False]]))
        z = disparity_to_depth(d, _rig(700.0, 5.0, 2, 1))
        assert z.values[0, 0] == 350.0 and z.valid.tolist() == [[True, False]]

    def test_floor(self):
        d = DisparityMap.from_array(np.array([[0.4, 0.5, 0.6]]))
        z = disparity_to_depth(d, _rig(w=3, h=1))
        assert z.valid.tolist() == [[False, True, True]]

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0.5, 1000), st.floats(0.5, 1000))
    def test_monotone(self, d1, d2):
        z = disparity_to_depth(DisparityMap.from_array(np.array([[d1, d2]])), _rig(w=2, h=1)).values[0]
        if d1 > d2:
            assert z[0] < z[1]

    def test_round_trip(self, rng):
        rig = _rig(812.5, 4.3, 50, 40)
        depth = DepthMap.from_array(rng.uniform(50, 3000, (40, 50)))
        back = disparity_to_depth(depth_to_disparity(depth, rig), rig)
        assert np.array_equal(back.valid, depth.valid)
        assert np.abs(back.values - depth.values).max() <= 1e-9
