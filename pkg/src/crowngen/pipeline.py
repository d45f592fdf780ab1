"""End-to-end orchestration: voxelize, coarse prediction, refinement,
Poisson reconstruction, marching cubes, and metric evaluation.

Module errors are re-raised as StageError with the pipeline stage name so
callers (and the CLI exit codes) can tell configuration, data, and
numeric failures apart.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .dpsr import DpsrConfig, dpsr_forward
from .errors import CrownGenError, StageError
from .losses import (
    MetricReport,
    bce_loss,
    compute_metrics,
    margin_mask_by_nn,
    nearest_neighbor_indices,
)
from .meshops import Mesh, estimate_curvature, estimate_normals, marching_cubes, save_obj
from .refiner import (
    AdamWState,
    OracleCoarsePredictor,
    OracleNoise,
    RefinerParams,
    TrainSettings,
    TrainableCoarsePredictor,
    TrainingCase,
    fuse_tp_prompt_gathered,
    gather_features,
    refine,
    train_step,
)
from .synthetic import SyntheticCase
from .voxelgrid import (
    PointCloud,
    VoxelVolume,
    devoxelize,
    save_ply_points,
    save_volume,
    save_xyz,
    threshold_logits,
    voxelize,
)


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except CrownGenError as exc:
        raise StageError(name, exc) from exc


def make_predictor(config: PipelineConfig, v_gt: VoxelVolume, case_seed: int,
                   params: RefinerParams | None = None):
    if config.predictor == "oracle":
        noise = OracleNoise(config.dilate_r, config.erode_r, config.flip_prob,
                            config.flip_band)
        return OracleCoarsePredictor(v_gt, noise, seed=case_seed)
    if params is None:
        raise ValueError("trainable predictor needs parameters")
    return TrainableCoarsePredictor(params)


def prepare_training_case(case: SyntheticCase, config: PipelineConfig,
                          params: RefinerParams | None = None) -> TrainingCase:
    """Voxelize, run the coarse predictor, and gather refinement inputs."""
    grid = config.grid_spec()
    v_gt = _stage("voxelize", voxelize, PointCloud(case.gt_cloud.points), grid)
    v_ios = _stage("voxelize", voxelize, case.ios_cloud, grid)
    predictor = make_predictor(config, v_gt, case.seed, params)
    logits, feat = _stage("coarse", predictor.predict, v_ios, case.label)
    bce_value, _ = bce_loss(logits, v_gt)
    crown = _stage("threshold", threshold_logits, logits)
    p_coarse = _stage("devoxelize", devoxelize, crown).points
    e_base = _stage("gather", gather_features, feat, crown)
    kappa_gt = estimate_curvature(case.gt_cloud, config.curvature_k,
                                  config.kappa_max).kappa
    return TrainingCase(
        p_coarse=p_coarse,
        e_base=e_base,
        feature_means=feat.channel_means(),
        label=case.label,
        gt_points=case.gt_cloud.points,
        gt_normals=case.gt_cloud.normals,
        gt_margin=case.gt_margin_mask,
        kappa_gt=kappa_gt,
        bce_value=bce_value,
        v_ios=v_ios if config.predictor == "trainable" else None,
        v_gt=v_gt if config.predictor == "trainable" else None,
        case_id=case.case_id,
    )


def train_settings(config: PipelineConfig) -> TrainSettings:
    return TrainSettings(
        loss_mode=config.loss,
        use_tp_prompt=config.use_tp_prompt,
        curvature_k=config.curvature_k,
        kappa_max=config.kappa_max,
        predictor=config.predictor,
    )


def predict_cloud(case: SyntheticCase, params: RefinerParams,
                  config: PipelineConfig) -> tuple[PointCloud, dict]:
    """Run voxelize -> coarse -> threshold -> devoxelize -> gather -> refine.

    Returns the predicted crown cloud (with normals) and the intermediate
    artifacts keyed by stage name.
    """
    grid = config.grid_spec()
    artifacts: dict[str, object] = {}
    v_ios = _stage("voxelize", voxelize, case.ios_cloud, grid)
    artifacts["v_ios"] = v_ios
    v_gt = _stage("voxelize", voxelize, PointCloud(case.gt_cloud.points), grid)
    artifacts["v_gt"] = v_gt
    predictor = make_predictor(config, v_gt, case.seed, params)
    logits, feat = _stage("coarse", predictor.predict, v_ios, case.label)
    artifacts["logits"] = logits
    crown = _stage("threshold", threshold_logits, logits)
    artifacts["v_crown"] = crown
    coarse_cloud = _stage("devoxelize", devoxelize, crown)
    artifacts["p_coarse"] = coarse_cloud

    if config.use_refiner:
        e = _stage("gather", gather_features, feat, crown)
        if config.use_tp_prompt:
            e = _stage("prompt", fuse_tp_prompt_gathered, e, feat.channel_means(),
                       case.label, params)
        pred = _stage("refine", refine, coarse_cloud.points, e, params)
    else:
        # coarse-only path: geometric normals so reconstruction still works
        pred = _stage("normals", estimate_normals, coarse_cloud,
                      min(config.curvature_k, len(coarse_cloud) - 1))
    artifacts["pred"] = pred
    return pred, artifacts


def reconstruct_mesh(pred: PointCloud, config: PipelineConfig,
                     artifacts: dict | None = None) -> Mesh:
    cfg = DpsrConfig(config.grid_spec(), smoothing_sigma=config.smoothing_sigma)
    chi = _stage("dpsr", dpsr_forward, pred, cfg)
    if artifacts is not None:
        artifacts["indicator"] = chi
    return _stage("marching_cubes", marching_cubes, chi, 0.0)


def run_inference(case: SyntheticCase, params: RefinerParams, config: PipelineConfig,
                  dump_dir: str | None = None) -> tuple[Mesh, MetricReport]:
    """Full pipeline on one case, with optional artifact dumping."""
    pred, artifacts = predict_cloud(case, params, config)
    mesh = reconstruct_mesh(pred, config, artifacts)
    report = _stage("metrics", compute_metrics, pred, case.gt_cloud,
                    config.tau_mm, config.fidelity_direction)
    if dump_dir is not None:
        dump_artifacts(dump_dir, artifacts, mesh, report)
    return mesh, report


def dump_artifacts(dump_dir: str, artifacts: dict, mesh: Mesh | None = None,
                   report: MetricReport | None = None):
    os.makedirs(dump_dir, exist_ok=True)
    for name in ("v_ios", "v_gt", "logits", "v_crown", "indicator"):
        if name in artifacts:
            save_volume(os.path.join(dump_dir, f"{name}.vol"), artifacts[name])
    if "p_coarse" in artifacts:
        save_xyz(os.path.join(dump_dir, "p_coarse.xyz"), artifacts["p_coarse"])
    if "pred" in artifacts:
        save_ply_points(os.path.join(dump_dir, "pred.ply"), artifacts["pred"])
        save_xyz(os.path.join(dump_dir, "pred.xyz"), artifacts["pred"])
    if mesh is not None:
        save_obj(os.path.join(dump_dir, "crown.obj"), mesh)
    if report is not None:
        with open(os.path.join(dump_dir, "metrics.json"), "w", encoding="ascii") as fh:
            fh.write(report.to_json())


def _ring_segments(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Polyline segments of a loop-like point set via its 2-NN graph."""
    n = points.shape[0]
    if n < 2:
        return points, points
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :2]
    pairs = set()
    for i in range(n):
        for j in order[i]:
            pairs.add((min(i, int(j)), max(i, int(j))))
    idx = np.asarray(sorted(pairs), dtype=np.int64)
    return points[idx[:, 0]], points[idx[:, 1]]


def _point_to_segments(query: np.ndarray, seg_a: np.ndarray, seg_b: np.ndarray) -> np.ndarray:
    """Distance from each query point to the nearest polyline segment."""
    ab = seg_b - seg_a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom[denom == 0.0] = 1.0
    out = np.empty(query.shape[0])
    for i, q in enumerate(query):
        t = np.clip(np.einsum("ij,ij->i", q - seg_a, ab) / denom, 0.0, 1.0)
        proj = seg_a + t[:, None] * ab
        out[i] = np.sqrt(np.min(np.sum((q - proj) ** 2, axis=1)))
    return out


def margin_one_sided(pred: PointCloud, gt: PointCloud,
                     gt_margin_mask: np.ndarray) -> float:
    """Mean distance from margin-matched predicted points to the margin line.

    A predicted point belongs to the prediction's margin when its GT
    nearest neighbor is a margin point; its error is the distance to the
    margin polyline (segments from the margin loop's 2-NN graph). NaN
    when no predicted point matches the margin.
    """
    mask = margin_mask_by_nn(pred, gt, gt_margin_mask)
    if not mask.any():
        return float("nan")
    margin_pts = gt.points[np.asarray(gt_margin_mask, dtype=bool)]
    src = pred.points[mask]
    if margin_pts.shape[0] < 2:
        idx = nearest_neighbor_indices(src, margin_pts)
        return float(np.linalg.norm(src - margin_pts[idx], axis=1).mean())
    seg_a, seg_b = _ring_segments(margin_pts)
    return float(_point_to_segments(src, seg_a, seg_b).mean())


@dataclass
class CaseResult:
    case_id: str
    tooth_type: str
    report: MetricReport
    margin_distance_mm: float


@dataclass
class EvalSummary:
    results: list[CaseResult]

    def mean(self, attr: str) -> float:
        vals = [getattr(r.report, attr) for r in self.results]
        return float(np.mean(vals))

    def mean_margin(self) -> float:
        vals = [r.margin_distance_mm for r in self.results
                if np.isfinite(r.margin_distance_mm)]
        return float(np.mean(vals)) if vals else float("nan")

    def per_type(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for tooth in sorted({r.tooth_type for r in self.results}):
            rs = [r for r in self.results if r.tooth_type == tooth]
            out[tooth] = {
                "cd_l2_mm2": float(np.mean([r.report.cd_l2_mm2 for r in rs])),
                "fidelity_mm": float(np.mean([r.report.fidelity_mm for r in rs])),
                "f_score": float(np.mean([r.report.f_score for r in rs])),
                "n_cases": len(rs),
            }
        return out

    def to_dict(self) -> dict:
        return {
            "overall": {
                "cd_l2_mm2": self.mean("cd_l2_mm2"),
                "fidelity_mm": self.mean("fidelity_mm"),
                "f_score": self.mean("f_score"),
                "margin_mm": self.mean_margin(),
                "n_cases": len(self.results),
            },
            "per_type": self.per_type(),
            "cases": [
                {
                    "case_id": r.case_id,
                    "tooth_type": r.tooth_type,
                    "margin_mm": r.margin_distance_mm,
                    **r.report.to_dict(),
                }
                for r in self.results
            ],
        }


def evaluate_cases(cases: list[SyntheticCase], params: RefinerParams,
                   config: PipelineConfig) -> EvalSummary:
    """Point-cloud metrics (no meshing) for a list of cases."""
    results = []
    for case in cases:
        pred, _ = predict_cloud(case, params, config)
        report = compute_metrics(pred, case.gt_cloud, config.tau_mm,
                                 config.fidelity_direction)
        margin = margin_one_sided(pred, case.gt_cloud, case.gt_margin_mask)
        results.append(CaseResult(case.case_id, case.label.tooth_type, report, margin))
    return EvalSummary(results)


def train_refiner(train_cases: list[TrainingCase], config: PipelineConfig,
                  params: RefinerParams | None = None
                  ) -> tuple[RefinerParams, list[dict[str, float]]]:
    """Run the two-stage schedule over prepared cases.

    Stage 1 (iterations below stage_boundary) trains the coarse path;
    stage 2 adds the refinement heads, embedding table, and attention.
    """
    if params is None:
        params = RefinerParams.initialize(
            channels=config.channels, hidden=config.hidden, seed=config.seed,
            with_coarse=config.predictor == "trainable")
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    settings = train_settings(config)
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    history = []
    for it in range(config.iterations):
        if len(order) < config.batch_size:
            order += [int(i) for i in rng.permutation(len(train_cases))]
        batch = [train_cases[order.pop(0)] for _ in range(config.batch_size)]
        stage = 1 if it < config.stage_boundary else 2
        losses = train_step(batch, params, opt, stage, settings)
        losses["iteration"] = it
        losses["stage"] = stage
        history.append(losses)
    return params, history


def train_pipeline(cases: list[SyntheticCase], config: PipelineConfig
                   ) -> tuple[RefinerParams, list[dict[str, float]]]:
    """Initialize parameters, prepare the cases, and run the schedule."""
    params = RefinerParams.initialize(
        channels=config.channels, hidden=config.hidden, seed=config.seed,
        with_coarse=config.predictor == "trainable")
    prepared = [
        prepare_training_case(c, config, params if config.predictor == "trainable" else None)
        for c in cases
    ]
    return train_refiner(prepared, config, params)


@dataclass
class AblationRow:
    use_refiner: bool
    use_tp_prompt: bool
    loss: str
    cd_l2_mm2: float = float("nan")
    fidelity_mm: float = float("nan")
    f_score: float = float("nan")
    margin_mm: float = float("nan")
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "pcr": self.use_refiner,
            "tp_prompt": self.use_tp_prompt,
            "cmpl": self.loss == "cmpl",
            "loss": self.loss,
            "cd_l2_mm2": self.cd_l2_mm2,
            "fidelity_mm": self.fidelity_mm,
            "f_score": self.f_score,
            "margin_mm": self.margin_mm,
            "error": self.error,
        }


DEFAULT_ABLATION_ROWS = (
    {"use_refiner": False, "use_tp_prompt": False, "loss": "cpl"},
    {"use_refiner": True, "use_tp_prompt": False, "loss": "cpl"},
    {"use_refiner": True, "use_tp_prompt": False, "loss": "cmpl"},
    {"use_refiner": True, "use_tp_prompt": True, "loss": "cpl"},
    {"use_refiner": True, "use_tp_prompt": True, "loss": "cmpl"},
)


def run_ablation(train_cases: list[SyntheticCase], test_cases: list[SyntheticCase],
                 config: PipelineConfig, rows=DEFAULT_ABLATION_ROWS
                 ) -> list[AblationRow]:
    """Train and evaluate each toggle combination; failures stay per-row."""
    if len(rows) < 2:
        raise ValueError("an ablation needs at least two rows")
    out = []
    for row in rows:
        row_config = PipelineConfig(**{**config.to_dict(), **row})
        result = AblationRow(row_config.use_refiner, row_config.use_tp_prompt,
                             row_config.loss)
        try:
            if row_config.use_refiner:
                params, _ = train_pipeline(train_cases, row_config)
            else:
                params = RefinerParams.initialize(
                    channels=row_config.channels, hidden=row_config.hidden,
                    seed=row_config.seed)
            summary = evaluate_cases(test_cases, params, row_config)
            result.cd_l2_mm2 = summary.mean("cd_l2_mm2")
            result.fidelity_mm = summary.mean("fidelity_mm")
            result.f_score = summary.mean("f_score")
            result.margin_mm = summary.mean_margin()
        except Exception as exc:  # isolate per-row failures
            result.error = f"{type(exc).__name__}: {exc}"
        out.append(result)
    return out
