import numpy as np
import pytest

from crowngen.errors import (
    DataError,
    EmptyVolume,
    NonFiniteLoss,
    ShapeMismatch,
    UnknownLabel,
)
from crowngen.losses import CmplWeights, cmpl_correspondences, cmpl_frozen, nearest_neighbor_indices
from crowngen.refiner import (
    AdamWState,
    FdiLabel,
    FeatureVolume,
    OracleCoarsePredictor,
    OracleNoise,
    RefinerParams,
    TrainableCoarsePredictor,
    TrainingCase,
    TrainSettings,
    fuse_tp_prompt,
    fuse_tp_prompt_backward,
    fuse_tp_prompt_gathered,
    gather_features,
    load_checkpoint,
    occupancy_descriptors,
    refine,
    refine_backward,
    refine_with_cache,
    save_checkpoint,
    train_step,
    _conv3x3,
    _conv3x3_backward,
)
from crowngen.voxelgrid import GridSpec, PointCloud, VoxelVolume, devoxelize, threshold_logits


def unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]


def simple_case(seed, n=40, channels=16):
    rng = np.random.default_rng(seed)
    gt_pts = rng.uniform(0, 2, size=(n, 3))
    gt_n = unit_rows(rng, n)
    margin = np.zeros(n, dtype=bool)
    margin[: n // 8] = True
    return TrainingCase(
        p_coarse=gt_pts + rng.normal(0, 0.04, size=(n, 3)),
        e_base=rng.normal(size=(n, channels)),
        feature_means=np.zeros(channels),
        label=FdiLabel.from_code("36"),
        gt_points=gt_pts,
        gt_normals=gt_n,
        gt_margin=margin,
        kappa_gt=np.zeros(n),
        bce_value=0.31,
    )


class TestFdiLabel:
    def test_bijection_over_32_teeth(self):
        seen = set()
        for quadrant in range(1, 5):
            for position in range(1, 9):
                label = FdiLabel(quadrant, position)
                assert FdiLabel.from_class_index(label.class_index) == label
                seen.add(label.class_index)
        assert seen == set(range(32))

    def test_code_parsing(self):
        label = FdiLabel.from_code("36")
        assert (label.quadrant, label.position) == (3, 6)
        assert label.tooth_type == "molar"
        assert FdiLabel.from_code(11).tooth_type == "incisor"
        assert FdiLabel.from_code("24").tooth_type == "premolar"
        assert FdiLabel.from_code("43").tooth_type == "canine"

    def test_invalid_labels(self):
        with pytest.raises(UnknownLabel):
            FdiLabel(5, 1)
        with pytest.raises(UnknownLabel):
            FdiLabel(1, 9)
        with pytest.raises(UnknownLabel):
            FdiLabel.from_code("361")
        with pytest.raises(UnknownLabel):
            FdiLabel.from_class_index(32)


def gt_shell_volume(seed=0, dims=(20, 20, 20)):
    rng = np.random.default_rng(seed)
    spec = GridSpec(dims, 0.3, (0, 0, 0))
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    center = np.array(dims) / 2.0
    r = np.linalg.norm(idx + 0.5 - center, axis=-1)
    shell = (np.abs(r - 6.0) < 0.6).astype(float)
    return VoxelVolume(spec, shell, kind="occupancy")


class TestOracle:
    def test_zero_noise_reproduces_gt(self):
        gt = gt_shell_volume()
        logits, feat = OracleCoarsePredictor(gt).predict(gt, FdiLabel.from_code("11"))
        occ = threshold_logits(logits)
        assert np.array_equal(occ.data, gt.data)
        assert feat.channels == 16

    def test_dilation_grows_count(self):
        gt = gt_shell_volume()
        noisy = OracleCoarsePredictor(gt, OracleNoise(dilate_r=1))
        logits, _ = noisy.predict(gt, FdiLabel.from_code("11"))
        assert threshold_logits(logits).occupancy_count() > gt.occupancy_count()

    def test_erosion_shrinks_count(self):
        gt = gt_shell_volume()
        noisy = OracleCoarsePredictor(gt, OracleNoise(erode_r=1))
        logits, _ = noisy.predict(gt, FdiLabel.from_code("11"))
        assert threshold_logits(logits).occupancy_count() < gt.occupancy_count()

    def test_seed_determinism(self):
        gt = gt_shell_volume()
        a = OracleCoarsePredictor(gt, OracleNoise(dilate_r=1, flip_prob=0.2), seed=7)
        b = OracleCoarsePredictor(gt, OracleNoise(dilate_r=1, flip_prob=0.2), seed=7)
        la, fa = a.predict(gt, FdiLabel.from_code("11"))
        lb, fb = b.predict(gt, FdiLabel.from_code("11"))
        assert np.array_equal(la.data, lb.data)
        assert np.array_equal(fa.data, fb.data)
        c = OracleCoarsePredictor(gt, OracleNoise(dilate_r=1, flip_prob=0.2), seed=8)
        lc, _ = c.predict(gt, FdiLabel.from_code("11"))
        assert not np.array_equal(la.data, lc.data)

    def test_descriptor_channels(self):
        gt = gt_shell_volume()
        feat = occupancy_descriptors(gt.data, gt.spec)
        assert feat.data.shape == (16,) + tuple(gt.spec.dims)
        assert np.array_equal(feat.data[0], gt.data)
        assert np.all(feat.data[15] == 1.0)


class TestGather:
    def test_single_voxel(self):
        spec = GridSpec((4, 4, 4), 1.0)
        rng = np.random.default_rng(0)
        feat = FeatureVolume(spec, rng.normal(size=(5, 4, 4, 4)))
        occ = np.zeros((4, 4, 4))
        occ[1, 2, 3] = 1.0
        e = gather_features(feat, VoxelVolume(spec, occ))
        assert e.shape == (1, 5)
        assert np.array_equal(e[0], feat.data[:, 1, 2, 3])

    def test_alignment_with_devoxelize(self):
        spec = GridSpec((6, 6, 6), 0.5, (0, 0, 0))
        rng = np.random.default_rng(1)
        feat = FeatureVolume(spec, rng.normal(size=(3, 6, 6, 6)))
        occ = (rng.random((6, 6, 6)) < 0.3).astype(float)
        occ[0, 0, 0] = 1.0
        vol = VoxelVolume(spec, occ)
        e = gather_features(feat, vol)
        points = devoxelize(vol).points
        assert e.shape[0] == len(points)
        idx = np.floor((points - np.asarray(spec.origin)) / spec.spacing).astype(int)
        for row in range(len(points)):
            i, j, k = idx[row]
            assert np.array_equal(e[row], feat.data[:, i, j, k])

    def test_masking_removes_row(self):
        spec = GridSpec((4, 4, 4), 1.0)
        rng = np.random.default_rng(2)
        feat = FeatureVolume(spec, rng.normal(size=(4, 4, 4, 4)))
        occ = np.zeros((4, 4, 4))
        occ[0, 0, 0] = 1.0
        occ[2, 2, 2] = 1.0
        full = gather_features(feat, VoxelVolume(spec, occ))
        occ[0, 0, 0] = 0.0
        reduced = gather_features(feat, VoxelVolume(spec, occ))
        assert full.shape[0] == 2 and reduced.shape[0] == 1
        assert np.array_equal(reduced[0], full[1])

    def test_empty_mask(self):
        spec = GridSpec((4, 4, 4), 1.0)
        feat = FeatureVolume(spec, np.zeros((2, 4, 4, 4)))
        with pytest.raises(EmptyVolume):
            gather_features(feat, VoxelVolume(spec, np.zeros((4, 4, 4))))

    def test_dims_mismatch(self):
        feat = FeatureVolume(GridSpec((4, 4, 4), 1.0), np.zeros((2, 4, 4, 4)))
        with pytest.raises(ShapeMismatch):
            gather_features(feat, VoxelVolume(GridSpec((5, 5, 5), 1.0), np.ones((5, 5, 5))))


class TestPromptFusion:
    def test_identity_at_default_init(self):
        rng = np.random.default_rng(3)
        spec = GridSpec((5, 5, 5), 1.0)
        feat = FeatureVolume(spec, rng.normal(size=(16, 5, 5, 5)))
        params = RefinerParams.initialize(seed=0)
        out = fuse_tp_prompt(feat, FdiLabel.from_code("36"), params)
        assert np.allclose(out.data, feat.data, atol=1e-12)

    def test_labels_change_output(self):
        rng = np.random.default_rng(4)
        spec = GridSpec((4, 4, 4), 1.0)
        feat = FeatureVolume(spec, rng.normal(size=(16, 4, 4, 4)))
        params = RefinerParams.initialize(seed=1)
        params.tensors["tp.eca_kernel"] = rng.normal(0, 0.5, 3)
        params.tensors["tp.proj_w"] = rng.normal(0, 0.2, (16, 144))
        a = fuse_tp_prompt(feat, FdiLabel.from_code("36"), params)
        b = fuse_tp_prompt(feat, FdiLabel.from_code("11"), params)
        assert np.abs(a.data - b.data).max() > 1e-6

    def test_zero_features_pass_embedding_only(self):
        spec = GridSpec((4, 4, 4), 1.0)
        feat = FeatureVolume(spec, np.zeros((16, 4, 4, 4)))
        params = RefinerParams.initialize(seed=2)
        params.tensors["tp.proj_w"] = np.random.default_rng(5).normal(0, 0.2, (16, 144))
        out = fuse_tp_prompt(feat, FdiLabel.from_code("36"), params)
        assert np.all(np.isfinite(out.data))
        assert np.abs(out.data).max() > 0.0

    def test_gathered_matches_volume_path(self):
        rng = np.random.default_rng(6)
        spec = GridSpec((5, 5, 5), 1.0)
        feat = FeatureVolume(spec, rng.normal(size=(16, 5, 5, 5)))
        params = RefinerParams.initialize(seed=3)
        params.tensors["tp.eca_kernel"] = rng.normal(0, 0.5, 3)
        params.tensors["tp.proj_w"] = rng.normal(0, 0.2, (16, 144))
        params.tensors["tp.proj_b"] = rng.normal(0, 0.1, 16)
        occ = (rng.random((5, 5, 5)) < 0.4).astype(float)
        occ[1, 1, 1] = 1.0
        crown = VoxelVolume(spec, occ)
        label = FdiLabel.from_code("27")
        via_volume = gather_features(fuse_tp_prompt(feat, label, params), crown)
        via_rows = fuse_tp_prompt_gathered(
            gather_features(feat, crown), feat.channel_means(), label, params)
        assert np.allclose(via_volume, via_rows, atol=1e-12)

    def test_label_outside_table(self):
        params = RefinerParams.initialize(seed=0)
        params.tensors["tp.embedding"] = params.tensors["tp.embedding"][:8]
        feat = FeatureVolume(GridSpec((4, 4, 4), 1.0), np.zeros((16, 4, 4, 4)))
        with pytest.raises(UnknownLabel):
            fuse_tp_prompt(feat, FdiLabel.from_code("36"), params)

    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        params = RefinerParams.initialize(seed=4)
        params.tensors["tp.eca_kernel"] = rng.normal(0, 0.5, 3)
        params.tensors["tp.proj_w"] = rng.normal(0, 0.2, (16, 144))
        e_base = rng.normal(size=(12, 16))
        means = rng.normal(size=16)
        label = FdiLabel.from_code("45")
        upstream = rng.normal(size=(12, 16))
        out, cache = fuse_tp_prompt_gathered(e_base, means, label, params, want_cache=True)
        grads, d_e = fuse_tp_prompt_backward(upstream, cache, params)

        def objective(p):
            return float(np.sum(fuse_tp_prompt_gathered(e_base, means, label, p) * upstream))

        h = 1e-6
        for name in ("tp.embedding", "tp.eca_kernel", "tp.proj_w", "tp.proj_b"):
            tensor = params.tensors[name]
            samples = [tuple(np.unravel_index(i, tensor.shape))
                       for i in np.random.default_rng(8).choice(tensor.size,
                                                                min(12, tensor.size),
                                                                replace=False)]
            for idx in samples:
                plus, minus = params.copy(), params.copy()
                plus.tensors[name][idx] += h
                minus.tensors[name][idx] -= h
                fd = (objective(plus) - objective(minus)) / (2 * h)
                assert abs(fd - grads[name][idx]) <= 1e-3 * max(abs(fd), 1e-7)


class TestConv:
    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 4, 5, 4))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        upstream = rng.normal(size=(3, 4, 5, 4))
        d_x, d_w, d_b = _conv3x3_backward(x, w, upstream)

        def objective(xx, ww, bb):
            return float(np.sum(_conv3x3(xx, ww, bb) * upstream))

        h = 1e-6
        for idx in [(0, 1, 2, 3), (1, 3, 4, 0)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            fd = (objective(xp, w, b) - objective(xm, w, b)) / (2 * h)
            assert abs(fd - d_x[idx]) <= 1e-4 * max(abs(fd), 1e-8)
        for idx in [(0, 0, 0, 0, 0), (2, 1, 2, 1, 2)]:
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (objective(x, wp, b) - objective(x, wm, b)) / (2 * h)
            assert abs(fd - d_w[idx]) <= 1e-4 * max(abs(fd), 1e-8)
        fd = (objective(x, w, b + h * np.eye(3)[1]) - objective(x, w, b - h * np.eye(3)[1])) / (2 * h)
        assert abs(fd - d_b[1]) <= 1e-5 * max(abs(fd), 1e-8)

    def test_trainable_predictor_shapes(self):
        params = RefinerParams.initialize(seed=0, with_coarse=True)
        spec = GridSpec((8, 8, 8), 0.5)
        occ = VoxelVolume(spec, (np.random.default_rng(0).random((8, 8, 8)) < 0.2).astype(float))
        logits, feat = TrainableCoarsePredictor(params).predict(occ, FdiLabel.from_code("11"))
        assert logits.kind == "logits"
        assert logits.data.shape == (8, 8, 8)
        assert feat.data.shape == (16, 8, 8, 8)

    def test_trainable_requires_coarse_tensors(self):
        with pytest.raises(ValueError):
            TrainableCoarsePredictor(RefinerParams.initialize(seed=0))


class TestRefine:
    def test_zero_init_is_identity(self):
        rng = np.random.default_rng(10)
        params = RefinerParams.initialize(seed=5)
        p = rng.normal(size=(30, 3))
        e = rng.normal(size=(30, 16))
        out = refine(p, e, params)
        assert np.array_equal(out.points, p)
        assert np.allclose(np.linalg.norm(out.normals, axis=1), 1.0)

    @pytest.mark.parametrize("n", [1, 10, 1000, 50_000])
    def test_output_count_matches_input(self, n):
        rng = np.random.default_rng(11)
        params = RefinerParams.initialize(seed=6)
        out = refine(rng.normal(size=(n, 3)), rng.normal(size=(n, 16)), params)
        assert len(out) == n

    def test_shape_mismatch(self):
        params = RefinerParams.initialize(seed=7)
        with pytest.raises(ShapeMismatch):
            refine(np.zeros((3, 3)), np.zeros((4, 16)), params)
        with pytest.raises(ShapeMismatch):
            refine(np.zeros((3, 3)), np.zeros((3, 12)), params)

    def test_head_gradients_match_finite_differences(self):
        # CMPL through the heads w.r.t. every trainable tensor
        rng = np.random.default_rng(12)
        params = RefinerParams.initialize(seed=8)
        params.tensors["mlp1.w3"] = rng.normal(0, 0.1, (3, 64))
        n = 10
        p_coarse = rng.normal(size=(n, 3))
        e = rng.normal(size=(n, 16))
        gt = PointCloud(rng.normal(size=(12, 3)), unit_rows(rng, 12))
        weights = CmplWeights(1.0 + rng.random(n), 1.0 + rng.random(12))

        base, cache = refine_with_cache(p_coarse, e, params)
        i_pg, i_gp = cmpl_correspondences(base, gt)
        nn_idx = nearest_neighbor_indices(base.points, gt.points)

        def frozen_loss(pp):
            cloud, _ = refine_with_cache(p_coarse, e, pp)
            value, _ = cmpl_frozen(cloud, gt, weights, i_pg, i_gp)
            diff = cloud.normals - gt.normals[nn_idx]
            return value + float(np.mean(diff * diff))

        _, d_pos = cmpl_frozen(base, gt, weights, i_pg, i_gp)
        diff = base.normals - gt.normals[nn_idx]
        d_norm = 2.0 * diff / diff.size
        grads, _ = refine_backward(d_pos, d_norm, cache, params)

        h = 1e-6
        rng2 = np.random.default_rng(13)
        for name, grad in grads.items():
            tensor = params.tensors[name]
            count = min(8, tensor.size)
            for flat in rng2.choice(tensor.size, count, replace=False):
                idx = tuple(np.unravel_index(flat, tensor.shape))
                plus, minus = params.copy(), params.copy()
                plus.tensors[name][idx] += h
                minus.tensors[name][idx] -= h
                fd = (frozen_loss(plus) - frozen_loss(minus)) / (2 * h)
                assert abs(fd - grad[idx]) <= 1e-3 * max(abs(fd), 1e-6), name


class TestTrainStep:
    def test_zero_learning_rate_keeps_params(self):
        params = RefinerParams.initialize(seed=9)
        before = {k: v.copy() for k, v in params.tensors.items()}
        losses = train_step([simple_case(0)], params, AdamWState(lr=0.0), 2,
                            TrainSettings())
        assert all(np.array_equal(before[k], params.tensors[k]) for k in before)
        assert set(losses) >= {"bce", "cmpl", "normals", "total"}

    def test_stage_one_touches_only_coarse_path(self):
        params = RefinerParams.initialize(seed=10)
        before = {k: v.copy() for k, v in params.tensors.items()}
        train_step([simple_case(1)], params, AdamWState(lr=1e-2), 1, TrainSettings())
        assert all(np.array_equal(before[k], params.tensors[k]) for k in before)

    def test_prompt_disabled_leaves_prompt_params(self):
        params = RefinerParams.initialize(seed=11)
        before = {k: v.copy() for k, v in params.tensors.items()}
        train_step([simple_case(2)], params, AdamWState(lr=1e-2), 2,
                   TrainSettings(use_tp_prompt=False))
        for name in before:
            if name.startswith("tp."):
                assert np.array_equal(before[name], params.tensors[name]), name
        changed = [name for name in before if name.startswith("mlp")
                   and not np.array_equal(before[name], params.tensors[name])]
        assert changed

    def test_deterministic_trajectory(self):
        def run():
            params = RefinerParams.initialize(seed=12)
            opt = AdamWState(lr=5e-3)
            case = simple_case(3)
            return [train_step([case], params, opt, 2, TrainSettings())["total"]
                    for _ in range(10)]

        assert run() == run()

    def test_overfit_reduces_cmpl_by_90_percent(self):
        params = RefinerParams.initialize(seed=2)
        opt = AdamWState(lr=1e-2)
        case = simple_case(100, n=50)
        settings = TrainSettings()
        first = None
        for _ in range(500):
            losses = train_step([case], params, opt, 2, settings)
            if first is None:
                first = losses["cmpl"]
        assert losses["cmpl"] <= 0.1 * first

    def test_non_finite_loss_aborts(self):
        params = RefinerParams.initialize(seed=13)
        case = simple_case(4)
        case.bce_value = float("nan")
        with pytest.raises(NonFiniteLoss) as info:
            train_step([case], params, AdamWState(lr=1e-3), 2, TrainSettings())
        assert info.value.term == "bce"

    def test_stage_validation(self):
        with pytest.raises(ValueError):
            train_step([simple_case(5)], RefinerParams.initialize(seed=0),
                       AdamWState(), 3, TrainSettings())

    def test_trainable_predictor_stage1_reduces_bce(self):
        rng = np.random.default_rng(14)
        spec = GridSpec((8, 8, 8), 0.5)
        occ_ios = VoxelVolume(spec, (rng.random((8, 8, 8)) < 0.25).astype(float))
        occ_gt = VoxelVolume(spec, (rng.random((8, 8, 8)) < 0.25).astype(float))
        params = RefinerParams.initialize(seed=14, with_coarse=True)
        case = simple_case(6)
        case.v_ios = occ_ios
        case.v_gt = occ_gt
        opt = AdamWState(lr=1e-2)
        settings = TrainSettings(predictor="trainable")
        first = last = None
        for _ in range(30):
            losses = train_step([case], params, opt, 1, settings)
            if first is None:
                first = losses["bce"]
            last = losses["bce"]
        assert last < first


class TestAdamW:
    def test_single_step_matches_formula(self):
        params = RefinerParams.initialize(seed=15)
        params.tensors["mlp1.b3"] = np.array([1.0, -2.0, 0.5])
        grad = np.array([0.1, -0.2, 0.3])
        opt = AdamWState(lr=0.01, weight_decay=0.1)
        opt.update(params, {"mlp1.b3": grad}, ["mlp1.b3"])
        m_hat = grad  # (1-b1)g / (1-b1)
        v_hat = grad * grad
        expected = np.array([1.0, -2.0, 0.5])
        expected = expected - 0.01 * (m_hat / (np.sqrt(v_hat) + 1e-8) + 0.1 * expected)
        assert np.allclose(params.tensors["mlp1.b3"], expected, rtol=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = RefinerParams.initialize(seed=16, with_coarse=True)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(path, params, {"stage": 2, "iteration": 123, "seed": 16,
                                       "config_hash": "abc"})
        loaded, meta = load_checkpoint(path)
        assert meta["stage"] == 2 and meta["iteration"] == 123
        assert set(loaded.tensors) == set(params.tensors)
        for name in params.tensors:
            assert np.array_equal(loaded.tensors[name],
                                  params.tensors[name].astype(np.float32))
        # save(load(save(x))) is byte-identical to save-of-loaded
        path2 = tmp_path / "ckpt2.bin"
        save_checkpoint(path2, loaded, meta)
        loaded2, _ = load_checkpoint(path2)
        for name in params.tensors:
            assert np.array_equal(loaded.tensors[name], loaded2.tensors[name])

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError):
            load_checkpoint(path)
