import collections

import numpy as np
import pytest

from crowngen.errors import DataError
from crowngen.meshops import extract_margin_line
from crowngen.refiner import FdiLabel
from crowngen.synthetic import (
    build_cases,
    case_labels,
    generate_synthetic_case,
    load_dataset,
    save_dataset,
    stratified_split,
)


class TestGenerator:
    def test_deterministic_from_seed(self):
        a = generate_synthetic_case(7, FdiLabel.from_code("36"))
        b = generate_synthetic_case(7, FdiLabel.from_code("36"))
        assert np.array_equal(a.gt_cloud.points, b.gt_cloud.points)
        assert np.array_equal(a.gt_cloud.normals, b.gt_cloud.normals)
        assert np.array_equal(a.ios_cloud.points, b.ios_cloud.points)
        c = generate_synthetic_case(8, FdiLabel.from_code("36"))
        assert not np.array_equal(a.gt_cloud.points, c.gt_cloud.points)

    def test_margin_is_one_closed_loop(self):
        case = generate_synthetic_case(3, FdiLabel.from_code("24"))
        margin = extract_margin_line(case.gt_crown_mesh)
        assert len(margin) > 0
        edges, counts = case.gt_crown_mesh.edges_unique()
        boundary = edges[counts == 1]
        degree = collections.Counter(boundary.ravel().tolist())
        assert set(degree.values()) == {2}  # a single set of closed loops
        assert len(margin) == case.gt_margin_mask.sum()

    def test_margin_mask_matches_extraction(self):
        case = generate_synthetic_case(11, FdiLabel.from_code("41"))
        from_mesh = extract_margin_line(case.gt_crown_mesh).points
        from_mask = case.gt_cloud.points[case.gt_margin_mask]
        assert np.array_equal(np.sort(from_mesh, axis=0), np.sort(from_mask, axis=0))

    def _local_maxima(self, case):
        mesh = case.gt_crown_mesh
        verts = mesh.vertices
        neighbors = collections.defaultdict(set)
        for a, b, c in mesh.faces:
            neighbors[a] |= {b, c}
            neighbors[b] |= {a, c}
            neighbors[c] |= {a, b}
        z = verts[:, 2]
        floor = z.min() + 0.5 * (z.max() - z.min())
        count = 0
        for i in range(len(verts)):
            if z[i] >= floor and all(z[i] > z[j] for j in neighbors[i]):
                count += 1
        return count

    def test_molar_has_four_cusps(self):
        for seed in (0, 5, 9):
            case = generate_synthetic_case(seed, FdiLabel.from_code("36"))
            assert self._local_maxima(case) == 4

    def test_premolar_two_canine_one(self):
        assert self._local_maxima(generate_synthetic_case(2, FdiLabel.from_code("14"))) == 2
        assert self._local_maxima(generate_synthetic_case(2, FdiLabel.from_code("13"))) == 1

    def test_geometry_fits_crop(self):
        for scale, half in ((1.0, 9.6), (0.5, 4.8)):
            for seed in range(4):
                case = generate_synthetic_case(seed, FdiLabel.from_class_index(seed * 7 % 32),
                                               scale)
                worst = max(np.abs(case.ios_cloud.points).max(),
                            np.abs(case.gt_cloud.points).max())
                assert worst < half

    def test_outward_normals(self):
        case = generate_synthetic_case(1, FdiLabel.from_code("36"))
        verts = case.gt_crown_mesh.vertices
        center = verts.mean(axis=0)
        radial = verts - center
        radial /= np.linalg.norm(radial, axis=1)[:, None]
        dots = np.einsum("ij,ij->i", case.gt_cloud.normals, radial)
        assert np.mean(dots > 0) > 0.97


class TestSplit:
    def test_proportions_within_one_case(self):
        labels = case_labels(200)
        splits = stratified_split(labels, (7, 1, 1), seed=0)
        for tooth in ("incisor", "canine", "premolar", "molar"):
            idx = [i for i, lab in enumerate(labels) if lab.tooth_type == tooth]
            n = len(idx)
            for name, ratio in (("train", 7 / 9), ("val", 1 / 9), ("test", 1 / 9)):
                got = sum(1 for i in idx if splits[i] == name)
                assert abs(got - n * ratio) <= 1.0, (tooth, name)

    def test_deterministic(self):
        labels = case_labels(60)
        assert stratified_split(labels, (7, 1, 1), 3) == stratified_split(labels, (7, 1, 1), 3)


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        cases = build_cases(4, seed=0, scale=0.5)
        splits = ["train", "train", "val", "test"]
        save_dataset(tmp_path / "ds", cases, splits)
        loaded, loaded_splits = load_dataset(tmp_path / "ds")
        assert loaded_splits == splits
        for orig, back in zip(cases, loaded):
            assert back.case_id == orig.case_id
            assert back.label == orig.label
            assert np.array_equal(back.gt_cloud.points,
                                  orig.gt_cloud.points.astype(np.float32))
            assert np.array_equal(back.gt_margin_mask, orig.gt_margin_mask)
            assert np.array_equal(back.gt_crown_mesh.faces, orig.gt_crown_mesh.faces)

    def test_split_filter(self, tmp_path):
        cases = build_cases(4, seed=0, scale=0.5)
        save_dataset(tmp_path / "ds", cases, ["train", "val", "test", "test"])
        test_cases, _ = load_dataset(tmp_path / "ds", split="test")
        assert [c.case_id for c in test_cases] == ["case0002", "case0003"]

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope")

    def test_empty_split(self, tmp_path):
        cases = build_cases(2, seed=0, scale=0.5)
        save_dataset(tmp_path / "ds", cases, ["train", "train"])
        with pytest.raises(DataError):
            load_dataset(tmp_path / "ds", split="test")
