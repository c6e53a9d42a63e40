import json

import numpy as np
import pytest

from modules.cameras import Camera, save_cameras
from modules.cli import main
from modules.field import FieldModel
from modules.images import read_image
from modules.scene import AnchorSet, Scene, fit_normalization
from modules.scene_io import load_scene, save_model, save_scene

from conftest import FORWARD_Z


@pytest.fixture
def collinear_files(tmp_path):
    scene_path = tmp_path / "scene.iris"
    model_path = tmp_path / "model.irsm"
    cameras_path = tmp_path / "transforms.json"
    code = main(["init", "--synthetic", "collinear", "--count", "3", "--seed", "7", "--out", str(scene_path),
                 "--model-out", str(model_path), "--cameras-out", str(cameras_path)])
    assert code == 0
    return scene_path, model_path, cameras_path


class TestInitAndInfo:
    def test_init_then_info(self, collinear_files, capsys):
        scene_path, _, _ = collinear_files
        capsys.readouterr()
        assert main(["info", "--scene", str(scene_path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "anchors: 3, baked: true, dim: 32"
        assert lines[1] == "bounds: min [0.0, 0.0, 2.0] max [0.0, 0.0, 9.0]"
        assert lines[2] == "edited: false"
        assert lines[3] == "confidence: min 1.0000 mean 1.0000, below prune tau: 0"

    def test_init_from_points(self, tmp_path, capsys):
        points = tmp_path / "points.xyz"
        points.write_text("0 0 0\n1 0 0\n0 1 0\n0 0 1\n1 1 1\n")
        code = main(["init", "--points", str(points), "--feature-init", "hash", "--hash-log2-size", "8",
                     "--out", str(tmp_path / "scene.iris"), "--model-out", str(tmp_path / "model.irsm")])
        assert code == 0
        assert "anchors: 5, baked: false" in capsys.readouterr().out

    def test_missing_scene_reports_error(self, tmp_path, capsys):
        assert main(["info", "--scene", str(tmp_path / "missing.iris")]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_corrupt_scene_reports_error(self, tmp_path, capsys):
        path = tmp_path / "bad.iris"
        path.write_bytes(b"JUNKJUNK")
        assert main(["info", "--scene", str(path)]) == 1
        assert "not an IRIS scene file" in capsys.readouterr().err


class TestRender:
    def test_empty_scene_renders_white(self, tmp_path):
        model = FieldModel.initialize(seed=0, hidden=8, with_hash_grid=False)
        save_scene(Scene(AnchorSet.empty(), model, fit_normalization(np.zeros((0, 3))), baked=True),
                   tmp_path / "empty.iris")
        save_model(model, tmp_path / "model.irsm")
        save_cameras([Camera(FORWARD_Z, 0.7, "r_0")], tmp_path / "transforms.json")
        out = tmp_path / "renders"
        code = main(["render", "--scene", str(tmp_path / "empty.iris"), "--model", str(tmp_path / "model.irsm"),
                     "--cameras", str(tmp_path / "transforms.json"), "--out", str(out), "--width", "4",
                     "--height", "3"])
        assert code == 0
        image = read_image(str(out / "eval_img_0000.ppm"))
        assert image.shape == (3, 4, 3)
        assert np.all(image == 255)

    def test_collinear_scene_renders(self, collinear_files, tmp_path):
        scene_path, model_path, cameras_path = collinear_files
        out = tmp_path / "renders"
        code = main(["render", "--scene", str(scene_path), "--model", str(model_path), "--cameras", str(cameras_path),
                     "--out", str(out), "--width", "8", "--height", "8", "--background", "black", "--quota", "2"])
        assert code == 0
        assert np.any(read_image(str(out / "eval_img_0000.ppm")) > 0)

    def test_quota_one_matches_first_anchor_scene(self, collinear_files, tmp_path):
        scene_path, model_path, cameras_path = collinear_files
        scene = load_scene(str(scene_path))
        scene.remove_anchors(np.array([0]))
        save_scene(scene, tmp_path / "first.iris")
        common = ["--model", str(model_path), "--cameras", str(cameras_path), "--width", "8", "--height", "8"]
        assert main(["render", "--scene", str(scene_path), "--out", str(tmp_path / "capped"), "--quota", "1",
                     *common]) == 0
        assert main(["render", "--scene", str(tmp_path / "first.iris"), "--out", str(tmp_path / "first"),
                     *common]) == 0
        capped = read_image(str(tmp_path / "capped" / "eval_img_0000.ppm"))
        first = read_image(str(tmp_path / "first" / "eval_img_0000.ppm"))
        np.testing.assert_array_equal(capped, first)


class TestTrain:
    def test_missing_images_are_listed(self, collinear_files, tmp_path, capsys):
        scene_path, model_path, cameras_path = collinear_files
        (tmp_path / "images").mkdir()
        code = main(["train", "--scene", str(scene_path), "--model", str(model_path), "--cameras", str(cameras_path),
                     "--images", str(tmp_path / "images"), "--out", str(tmp_path / "run")])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("error: no images for frames")
        assert "r_0" in err

    def test_zero_iterations_keeps_scene_bytes(self, collinear_files, tmp_path):
        scene_path, model_path, cameras_path = collinear_files
        images = tmp_path / "images"
        images.mkdir()
        (images / "r_0.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(48))
        code = main(["train", "--scene", str(scene_path), "--model", str(model_path), "--cameras", str(cameras_path),
                     "--images", str(images), "--out", str(tmp_path / "run"), "--iters", "0"])
        assert code == 0
        assert (tmp_path / "run" / "scene.iris").read_bytes() == scene_path.read_bytes()
        assert (tmp_path / "run" / "model.irsm").exists()


class TestEditAndBake:
    def test_edit_moves_anchors(self, collinear_files, tmp_path):
        scene_path, _, _ = collinear_files
        deform = tmp_path / "deform.json"
        deform.write_text(json.dumps({"transforms": [{"selection": "all", "translation": [1.0, 0.0, 0.0]}]}))
        out = tmp_path / "edited.iris"
        assert main(["edit", "--scene", str(scene_path), "--deform", str(deform), "--out", str(out)]) == 0
        edited = load_scene(str(out))
        assert edited.edited
        np.testing.assert_array_equal(edited.anchors.means[:, 0], 1.0)

    def test_edit_rejects_unbaked_scene(self, tmp_path, capsys):
        main(["init", "--synthetic", "collinear", "--feature-init", "hash", "--hash-log2-size", "8",
              "--out", str(tmp_path / "scene.iris")])
        deform = tmp_path / "deform.json"
        deform.write_text(json.dumps({"transforms": [{}]}))
        code = main(["edit", "--scene", str(tmp_path / "scene.iris"), "--deform", str(deform),
                     "--out", str(tmp_path / "edited.iris")])
        assert code == 1
        assert "baked" in capsys.readouterr().err

    def test_bake_writes_grid_free_model(self, tmp_path):
        main(["init", "--synthetic", "collinear", "--feature-init", "hash", "--hash-log2-size", "8",
              "--out", str(tmp_path / "scene.iris"), "--model-out", str(tmp_path / "model.irsm")])
        code = main(["bake", "--scene", str(tmp_path / "scene.iris"), "--model", str(tmp_path / "model.irsm"),
                     "--out", str(tmp_path / "baked.iris"), "--model-out", str(tmp_path / "baked.irsm")])
        assert code == 0
        baked = load_scene(str(tmp_path / "baked.iris"), str(tmp_path / "baked.irsm"))
        assert baked.baked
        assert baked.model.hash_grid is None
        assert np.any(baked.anchors.features != 0.0)


class TestBench:
    def test_prints_csv_header(self, collinear_files, capsys):
        scene_path, _, _ = collinear_files
        capsys.readouterr()
        code = main(["bench-sampler", "--scene", str(scene_path), "--batches", "64", "--samplers", "ris",
                     "--repeats", "1"])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "sampler,batch_size,rays_per_second,mean_samples_per_ray,wall_ms,per_ray_latency_us,memory_bytes"
        assert lines[1].startswith("ris,64,")

    def test_unknown_sampler(self, collinear_files, capsys):
        scene_path, _, _ = collinear_files
        assert main(["bench-sampler", "--scene", str(scene_path), "--samplers", "ris,magic"]) == 1
        assert "magic" in capsys.readouterr().err


class TestUsageErrors:
    @pytest.mark.parametrize("argv", [
        ["info", "--scene", "x.iris", "--bogus"],
        ["info"],
        ["render", "--scene", "s.iris"],
        ["frobnicate"],
        [],
        ["bench-sampler", "--scene", "s.iris", "--repeats", "many"],
    ])
    def test_bad_arguments_give_one_error_line(self, argv, capsys):
        assert main(argv) == 1
        captured = capsys.readouterr()
        assert captured.out == ""
        lines = captured.err.splitlines()
        assert len(lines) == 1
        assert lines[0].startswith("error: iris")

    def test_missing_required_option_is_named(self, capsys):
        assert main(["render", "--scene", "s.iris"]) == 1
        err = capsys.readouterr().err
        assert "--model" in err
        assert "required" in err
