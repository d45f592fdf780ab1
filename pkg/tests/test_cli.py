import json
import os

import numpy as np
import pytest

from crowngen.cli import main
from crowngen.meshops import load_obj
from crowngen.voxelgrid import load_volume, save_xyz, PointCloud


SMALL_SETS = [
    "--set", "n_cases=12",
    "--set", "dims=[48,48,48]",
    "--set", "crop_mm=7.2",
    "--set", "case_scale=0.35",
    "--set", "seed=3",
    "--set", "dilate_r=1",
    "--set", "iterations=8",
    "--set", "stage_boundary=0",
    "--set", "batch_size=2",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert main(["gen-data", "--output", str(ds)] + SMALL_SETS) == 0
    return root, ds


class TestGenData:
    def test_layout(self, dataset):
        _, ds = dataset
        manifest = json.loads((ds / "manifest.json").read_text())
        assert manifest["n_cases"] == 12
        assert (ds / "resolved_config.txt").exists()
        first = manifest["cases"][0]
        case_dir = ds / "cases" / first["id"]
        assert {(p.name) for p in case_dir.iterdir()} == {
            "ios.ply", "gt_mesh.ply", "gt_points.ply", "gt_margin.xyz"}


class TestTrainEvalInfer:
    def test_full_flow(self, dataset, tmp_path):
        root, ds = dataset
        ckpt = tmp_path / "ckpt.bin"
        trainrep = tmp_path / "trainrep"
        assert main(["train", "--data", str(ds), "--output", str(ckpt),
                     "--report", str(trainrep)] + SMALL_SETS) == 0
        assert ckpt.exists()
        assert (trainrep / "history.csv").exists()
        assert (trainrep / "training.png").exists()

        evalrep = tmp_path / "evalrep"
        assert main(["evaluate", "--data", str(ds), "--split", "test",
                     "--checkpoint", str(ckpt), "--report", str(evalrep)]
                    + SMALL_SETS) == 0
        payload = json.loads((evalrep / "metrics.json").read_text())
        assert "overall" in payload and "per_type" in payload
        assert (evalrep / "metrics.csv").exists()
        assert (evalrep / "metrics_hist.png").exists()
        assert (evalrep / "per_type.png").exists()

        out_a = tmp_path / "inf_a"
        out_b = tmp_path / "inf_b"
        for out in (out_a, out_b):
            assert main(["infer", "--data", str(ds), "--case", "case0000",
                         "--checkpoint", str(ckpt), "--output", str(out),
                         "--dump"] + SMALL_SETS) == 0
        # byte-identical metric JSON across reruns
        assert (out_a / "metrics.json").read_bytes() == (out_b / "metrics.json").read_bytes()
        mesh = load_obj(out_a / "crown.obj")
        assert mesh.n_faces > 0
        assert (out_a / "artifacts" / "indicator.vol").exists()


class TestUtilities:
    def test_voxelize_reconstruct(self, tmp_path):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(1200, 3))
        v /= np.linalg.norm(v, axis=1)[:, None]
        cloud = PointCloud(2.0 * v, v)
        src = tmp_path / "sphere.xyz"
        save_xyz(src, cloud)

        vol_path = tmp_path / "sphere.vol"
        assert main(["voxelize", "--input", str(src), "--output", str(vol_path),
                     "--dims", "32", "32", "32", "--spacing", "0.2"]) == 0
        vol = load_volume(vol_path, kind="occupancy")
        assert vol.occupancy_count() > 100

        mesh_path = tmp_path / "sphere.obj"
        assert main(["reconstruct", "--input", str(src), "--output", str(mesh_path),
                     "--dims", "48", "48", "48", "--spacing", "0.12"]) == 0
        mesh = load_obj(mesh_path)
        center = mesh.vertices.mean(axis=0)
        rad = np.linalg.norm(mesh.vertices - center, axis=1)
        assert abs(rad.mean() - 2.0) < 0.1

    def test_reconstruct_requires_normals(self, tmp_path):
        rng = np.random.default_rng(1)
        src = tmp_path / "bare.xyz"
        save_xyz(src, PointCloud(rng.normal(size=(50, 3))))
        assert main(["reconstruct", "--input", str(src),
                     "--output", str(tmp_path / "m.obj"),
                     "--dims", "16", "16", "16", "--spacing", "0.5"]) == 3


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        assert main(["gen-data", "--output", str(tmp_path / "x"),
                     "--set", "bogus=1"]) == 2
        assert main(["gen-data", "--output", str(tmp_path / "x"),
                     "--set", "predictor=\"unet\""]) == 2

    def test_data_error_is_3(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "missing"),
                     "--output", str(tmp_path / "c.bin")]) == 3

    def test_numeric_failure_is_4(self, dataset, tmp_path):
        _, ds = dataset
        # erosion empties the thin shell: stage-tagged EmptyVolume
        code = main(["infer", "--data", str(ds), "--case", "case0000",
                     "--output", str(tmp_path / "out")] + SMALL_SETS
                    + ["--set", "erode_r=6"])
        assert code == 4

    def test_ablate_runs(self, dataset, tmp_path):
        _, ds = dataset
        rep = tmp_path / "ab"
        code = main(["ablate", "--data", str(ds), "--report", str(rep)]
                    + SMALL_SETS + ["--set", "iterations=4"])
        assert code == 0
        assert (rep / "ablation.csv").exists()
        assert (rep / "ablation.json").exists()
        assert (rep / "ablation.png").exists()
