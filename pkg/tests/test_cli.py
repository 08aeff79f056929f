from __future__ import annotations

import json

import numpy as np
import pytest

from stereo_fixtures import shifted_pair
from toolpose.cli import build_parser, main
from toolpose.maps import BinaryMask, DisparityMap, read_depth_png, write_gray_png, write_mask_png
from toolpose.stereo import save_disparity_pfm

FAST = ["--n-viewpoints", "42", "--n-inplane", "6", "--n-model-points", "2000"]
SYNTH = ["--mesh", "builtin:tool", "--width", "320", "--height", "240", "--fx", "400",
         "--x-range", "-15", "15", "--y-range", "-10", "10", "--z-range", "250", "300"]


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["synth", *SYNTH, "--n-frames", "2", "--out", str(root)]) == 0
    return root


def _subcommands():
    p = build_parser()
    sub = next(a for a in p._actions if a.__class__.__name__ == "_SubParsersAction")
    return sub.choices


@pytest.mark.parametrize("name", ["depth", "pseudomask", "estimate", "eval", "eval-seg", "synth"])
def test_help_documents_every_flag(name, capsys):
    sp = _subcommands()[name]
    for action in sp._actions:
        if action.option_strings and action.dest != "help":
            assert action.help, f"{name} {action.option_strings} lacks help"
    with pytest.raises(SystemExit) as e:
        main([name, "--help"])
    assert e.value.code == 0
    out = capsys.readouterr().out
    assert "(default:" in out


def test_help_names_units_and_params(capsys):
    with pytest.raises(SystemExit):
        main(["estimate", "--help"])
    out = " ".join(capsys.readouterr().out.split())
    assert "EstimatorParams.score_tau" in out and "mm" in out


class TestDepth:
    def _pair(self, tmp_path, shift=8):
        left, right = shifted_pair(60, 160, shift, seed=3)
        write_gray_png(left, tmp_path / "l.png")
        write_gray_png(right, tmp_path / "r.png")

    def test_shifted_pair(self, tmp_path, capsys):
        self._pair(tmp_path)
        rc = main(["depth", "--left", str(tmp_path / "l.png"), "--right", str(tmp_path / "r.png"),
                   "--fx", "700", "--baseline", "5", "--max-disparity", "32",
                   "--out", str(tmp_path / "d.png"), "--disparity-out", str(tmp_path / "d.pfm")])
        assert rc == 0
        assert "valid depth pixels" in capsys.readouterr().out
        depth = read_depth_png(tmp_path / "d.png")
        assert abs(np.median(depth.values[depth.valid]) - 700 * 5 / 8) <= 700 * 5 / 8 - 700 * 5 / 8.25
        meta = json.loads((tmp_path / "d.json").read_text())
        assert meta["depth_scale"] == 0.1 and (tmp_path / "d.pfm").is_file()

    def test_size_mismatch(self, tmp_path, capsys):
        self._pair(tmp_path)
        write_gray_png(shifted_pair(60, 150, 0)[0], tmp_path / "r.png")
        rc = main(["depth", "--left", str(tmp_path / "l.png"), "--right", str(tmp_path / "r.png"),
                   "--fx", "700", "--baseline", "5", "--out", str(tmp_path / "d.png")])
        assert rc == 2
        assert "dimension" in capsys.readouterr().err
        assert not (tmp_path / "d.png").exists()

    def test_disparity_in(self, tmp_path):
        save_disparity_pfm(DisparityMap.from_array(np.full((4, 6), 10.0)), tmp_path / "x.pfm")
        rc = main(["depth", "--disparity-in", str(tmp_path / "x.pfm"), "--fx", "700", "--baseline", "5",
                   "--out", str(tmp_path / "d.png")])
        assert rc == 0
        assert np.allclose(read_depth_png(tmp_path / "d.png").values, 350.0)

    def test_camera_file(self, tmp_path, scene):
        save_disparity_pfm(DisparityMap.from_array(np.full((240, 320), 8.0)), tmp_path / "x.pfm")
        rc = main(["depth", "--disparity-in", str(tmp_path / "x.pfm"), "--camera", str(scene / "scene_camera.json"),
                   "--out", str(tmp_path / "d.png")])
        assert rc == 0
        assert np.allclose(read_depth_png(tmp_path / "d.png").values, 400 * 5 / 8)

    def test_no_camera(self, tmp_path):
        save_disparity_pfm(DisparityMap.from_array(np.full((4, 6), 10.0)), tmp_path / "x.pfm")
        assert main(["depth", "--disparity-in", str(tmp_path / "x.pfm"), "--out", str(tmp_path / "d.png")]) == 2


def test_pseudomask(scene, tmp_path):
    out = tmp_path / "pm"
    assert main(["pseudomask", str(scene), "--mesh", "builtin:tool", "--out", str(out)]) == 0
    rep = json.loads((out / "000000.json").read_text())
    assert rep["projected_pixels"] == rep["retained_pixels"] + rep["rejected_occluded"] + rep["rejected_no_depth"]
    # noiseless, unoccluded scene: the pseudo mask is the full mask
    from toolpose.maps import read_mask_png
    assert read_mask_png(out / "000000.png") == read_mask_png(scene / "mask_full" / "000000.png")


class TestEstimateEval:
    def test_estimate_eval(self, scene, tmp_path, capsys):
        res = tmp_path / "r.json"
        assert main(["estimate", str(scene), "--mesh", "builtin:tool", "--out", str(res), *FAST]) == 0
        rows = json.loads(res.read_text())
        assert [r["frame_id"] for r in rows] == [0, 1]
        assert {"frame_id", "R", "t", "score", "status"} <= set(rows[0])
        capsys.readouterr()
        assert main(["eval", str(scene), "--results", str(res), "--mesh", "builtin:tool",
                     "--report", "json", "--out", str(tmp_path / "e.json")]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["recalls_add"]["1mm"] == 1.0
        assert (tmp_path / "e_frames.json").is_file()
        assert main(["eval", str(scene), "--results", str(res), "--mesh", "builtin:tool"]) == 0
        assert "ADD<2.5mm" in capsys.readouterr().out

    def test_seed_reproduces(self, scene, tmp_path):
        for name in ("a.json", "b.json"):
            assert main(["estimate", str(scene), "--mesh", "builtin:tool", "--out", str(tmp_path / name),
                         "--seed", "3", *FAST]) == 0
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_missing_mask_file(self, scene, tmp_path, capsys):
        rc = main(["estimate", str(scene), "--mesh", "builtin:tool", "--out", str(tmp_path / "r.json"),
                   "--mask-source", "file", "--mask-dir", str(tmp_path / "none"), *FAST])
        assert rc == 2
        assert "000000.png" in capsys.readouterr().err
        assert not (tmp_path / "r.json").exists()

    def test_per_frame_failure_recorded(self, scene, tmp_path):
        masks = tmp_path / "masks"
        write_mask_png(BinaryMask.empty(240, 320), masks / "000000.png")
        src = (scene / "mask_visib" / "000001.png").read_bytes()
        (masks / "000001.png").write_bytes(src)
        res = tmp_path / "r.json"
        rc = main(["estimate", str(scene), "--mesh", "builtin:tool", "--out", str(res),
                   "--mask-dir", str(masks), *FAST])
        assert rc == 0
        rows = json.loads(res.read_text())
        assert rows[0]["status"] == "failed" and rows[1]["status"] == "ok"

    def test_eval_counts_failures(self, scene, tmp_path, capsys):
        res = tmp_path / "r.json"
        from toolpose.dataset import ResultRecord, load_scene, write_results
        frames = load_scene(scene)
        write_results([ResultRecord(0, None, 0.0, "failed", "x"), ResultRecord(1, frames[1].gt_pose, 1.0)], res)
        assert main(["eval", str(scene), "--results", str(res), "--mesh", "builtin:tool", "--report", "json"]) == 0
        s = json.loads(capsys.readouterr().out)
        assert s["n_excluded"] == 1 and s["n_frames"] == 1 and s["recalls_add"]["1mm"] == 0.5

    def test_eval_frame_mismatch(self, scene, tmp_path, capsys):
        res = tmp_path / "r.json"
        res.write_text(json.dumps([{"frame_id": 9, "R": [1, 0, 0, 0, 1, 0, 0, 0, 1], "t": [0, 0, 300],
                                    "score": 1.0, "status": "ok"}]))
        assert main(["eval", str(scene), "--results", str(res), "--mesh", "builtin:tool"]) == 2
        assert "[9]" in capsys.readouterr().err


class TestEvalSeg:
    def _setup(self, tmp_path):
        gt, pred = tmp_path / "gt", tmp_path / "pred"
        a = np.zeros((64, 64), bool)
        a[5:25, 5:25] = True
        b = np.zeros((64, 64), bool)
        b[40:50, 40:60] = True
        write_mask_png(BinaryMask(a), gt / "000000_0.png")
        write_mask_png(BinaryMask(b), gt / "000000_1.png")
        write_mask_png(BinaryMask(a), pred / "p0.png")
        conf = tmp_path / "conf.json"
        conf.write_text(json.dumps({"0": [{"mask": "p0.png", "score": 0.9}]}))
        return gt, pred, conf

    def test_two_gts_one_perfect(self, tmp_path, capsys):
        gt, pred, conf = self._setup(tmp_path)
        rc = main(["eval-seg", "--pred-dir", str(pred), "--confidences", str(conf), "--gt-dir", str(gt),
                   "--report", "json", "--out", str(tmp_path / "s.json")])
        assert rc == 0
        s = json.loads(capsys.readouterr().out)
        assert s["ar_5095"] == 0.5
        assert json.loads((tmp_path / "s.json").read_text()) == s

    def test_alignment_mismatch(self, tmp_path, capsys):
        gt, pred, conf = self._setup(tmp_path)
        conf.write_text(json.dumps({"0": [], "3": []}))
        assert main(["eval-seg", "--pred-dir", str(pred), "--confidences", str(conf), "--gt-dir", str(gt)]) == 2
        assert "[3]" in capsys.readouterr().err

    def test_bad_confidence(self, tmp_path):
        gt, pred, conf = self._setup(tmp_path)
        conf.write_text(json.dumps({"0": [{"mask": "p0.png", "score": 3}]}))
        assert main(["eval-seg", "--pred-dir", str(pred), "--confidences", str(conf), "--gt-dir", str(gt)]) == 2


def test_synth_errors(tmp_path):
    assert main(["synth", *SYNTH, "--n-occluders", "1", "--out", str(tmp_path / "s")]) == 2
    assert main(["synth", "--mesh", "builtin:nothing", "--out", str(tmp_path / "s")]) == 2
    assert main(["synth", *SYNTH, "--dropout", "2", "--out", str(tmp_path / "s")]) == 2
