"""Training losses and evaluation metrics for point clouds and voxel grids.

All distances are in physical mm. Chamfer-style reductions are means over
each cloud, summed over the two directions. Gradients follow the standard
piecewise-smooth convention: nearest-neighbor correspondences (and any
per-point weights) are frozen at the evaluation point.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import NormalsMissing, ShapeMismatch, WeightLengthMismatch
from .meshops import DEFAULT_KAPPA_MAX
from .voxelgrid import PointCloud, VoxelVolume

# above this many query*reference pairs the NN search switches from the
# blockwise exact scan to a kd-tree
BRUTE_FORCE_PAIR_LIMIT = 262_144
_BLOCK_ROWS = 2048


def nearest_neighbor_indices(query: np.ndarray, ref: np.ndarray, method: str = "auto") -> np.ndarray:
    """Index into ref of each query point's nearest neighbor.

    The brute-force path breaks distance ties toward the lowest reference
    index; the kd-tree path is used for large problems.
    """
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if method == "auto":
        method = "brute" if query.shape[0] * ref.shape[0] <= BRUTE_FORCE_PAIR_LIMIT else "kdtree"
    if method == "kdtree":
        _, idx = cKDTree(ref).query(query)
        return idx.astype(np.int64)
    if method != "brute":
        raise ValueError(f"unknown NN method {method!r}")
    out = np.empty(query.shape[0], dtype=np.int64)
    step = max(1, _BLOCK_ROWS * 1000 // max(ref.shape[0], 1))
    for start in range(0, query.shape[0], step):
        stop = min(start + step, query.shape[0])
        d2 = np.sum((query[start:stop, None, :] - ref[None, :, :]) ** 2, axis=2)
        out[start:stop] = np.argmin(d2, axis=1)
    return out


def _nn_distances(query: np.ndarray, ref: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Squared distances recomputed from coordinates for the given matches."""
    diff = query - ref[idx]
    return np.einsum("ij,ij->i", diff, diff)


def bce_loss(logits: VoxelVolume, target: VoxelVolume) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of sigmoid(logits) against a binary target.

    Returns the scalar loss and the per-voxel gradient d(loss)/d(logit).
    """
    if logits.spec.dims != target.spec.dims:
        raise ShapeMismatch(f"logits dims {logits.spec.dims} != target dims {target.spec.dims}")
    if target.kind != "occupancy":
        raise ValueError("BCE target must be an occupancy volume")
    lg = logits.data
    t = target.data
    # max(l,0) - l*t + log(1 + exp(-|l|)) is the stable per-voxel form
    per_voxel = np.maximum(lg, 0.0) - lg * t + np.log1p(np.exp(-np.abs(lg)))
    count = lg.size
    sigma = 1.0 / (1.0 + np.exp(-lg))
    grad = (sigma - t) / count
    return float(per_voxel.mean()), grad


def chamfer_l2(pred: PointCloud, gt: PointCloud, method: str = "auto") -> float:
    """Sum of the two directional means of squared NN distances (mm^2)."""
    pred.require_nonempty()
    gt.require_nonempty()
    i_pg = nearest_neighbor_indices(pred.points, gt.points, method)
    i_gp = nearest_neighbor_indices(gt.points, pred.points, method)
    d_pg = _nn_distances(pred.points, gt.points, i_pg)
    d_gp = _nn_distances(gt.points, pred.points, i_gp)
    return float(d_pg.mean() + d_gp.mean())


def fidelity(pred: PointCloud, gt: PointCloud, direction: str = "pred_to_gt",
             method: str = "auto") -> float:
    """One-sided mean NN distance in mm.

    pred_to_gt (default) penalizes artifact points in the prediction;
    gt_to_pred measures coverage of the ground truth instead.
    """
    pred.require_nonempty()
    gt.require_nonempty()
    if direction == "pred_to_gt":
        src, dst = pred, gt
    elif direction == "gt_to_pred":
        src, dst = gt, pred
    else:
        raise ValueError(f"unknown fidelity direction {direction!r}")
    idx = nearest_neighbor_indices(src.points, dst.points, method)
    return float(np.sqrt(_nn_distances(src.points, dst.points, idx)).mean())


def f_score(pred: PointCloud, gt: PointCloud, tau: float, method: str = "auto") -> float:
    """Harmonic mean of precision and recall at distance threshold tau (mm)."""
    pred.require_nonempty()
    gt.require_nonempty()
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    i_pg = nearest_neighbor_indices(pred.points, gt.points, method)
    i_gp = nearest_neighbor_indices(gt.points, pred.points, method)
    d_pg = np.sqrt(_nn_distances(pred.points, gt.points, i_pg))
    d_gp = np.sqrt(_nn_distances(gt.points, pred.points, i_gp))
    precision = float(np.mean(d_pg <= tau))
    recall = float(np.mean(d_gp <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class CmplWeights:
    """Per-point weights exp(|kappa|) + margin indicator for both clouds."""

    pred_weights: np.ndarray
    gt_weights: np.ndarray
    kappa_max: float = DEFAULT_KAPPA_MAX

    def __post_init__(self):
        pw = np.asarray(self.pred_weights, dtype=np.float64)
        gw = np.asarray(self.gt_weights, dtype=np.float64)
        upper = np.exp(self.kappa_max) + 1.0 + 1e-9
        for name, arr in (("pred_weights", pw), ("gt_weights", gw)):
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            if arr.size and (arr.min() < 1.0 - 1e-12 or arr.max() > upper):
                raise ValueError(f"{name} outside [1, exp(kappa_max)+1]")
        object.__setattr__(self, "pred_weights", pw)
        object.__setattr__(self, "gt_weights", gw)

    @classmethod
    def uniform(cls, n_pred: int, n_gt: int) -> "CmplWeights":
        return cls(np.ones(n_pred), np.ones(n_gt))


def build_cmpl_weights(kappa_pred: np.ndarray, kappa_gt: np.ndarray,
                       pred_margin: np.ndarray, gt_margin: np.ndarray,
                       mode: str = "cmpl",
                       kappa_max: float = DEFAULT_KAPPA_MAX) -> CmplWeights:
    """Weights for the refinement loss variants.

    cmpl: exp(|kappa|) + margin indicator; cpl: exp(|kappa|) only;
    chamfer: all ones.
    """
    n_pred, n_gt = len(kappa_pred), len(kappa_gt)
    if mode == "chamfer":
        return CmplWeights.uniform(n_pred, n_gt)
    pw = np.exp(np.abs(np.asarray(kappa_pred, dtype=np.float64)))
    gw = np.exp(np.abs(np.asarray(kappa_gt, dtype=np.float64)))
    if mode == "cmpl":
        pw = pw + np.asarray(pred_margin, dtype=np.float64)
        gw = gw + np.asarray(gt_margin, dtype=np.float64)
    elif mode != "cpl":
        raise ValueError(f"unknown weight mode {mode!r}")
    return CmplWeights(pw, gw, kappa_max=kappa_max)


def margin_mask_by_nn(pred: PointCloud, gt: PointCloud, gt_margin: np.ndarray,
                      method: str = "auto") -> np.ndarray:
    """Predicted points whose GT nearest neighbor is a margin point."""
    idx = nearest_neighbor_indices(pred.points, gt.points, method)
    return np.asarray(gt_margin, dtype=bool)[idx]


def cmpl_correspondences(pred: PointCloud, gt: PointCloud,
                         method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Frozen NN matches (pred->gt, gt->pred) for one loss evaluation."""
    i_pg = nearest_neighbor_indices(pred.points, gt.points, method)
    i_gp = nearest_neighbor_indices(gt.points, pred.points, method)
    return i_pg, i_gp


def cmpl_frozen(pred: PointCloud, gt: PointCloud, weights: CmplWeights,
                i_pg: np.ndarray, i_gp: np.ndarray) -> tuple[float, np.ndarray]:
    """CMPL value and d/d(pred positions) for fixed matches and weights."""
    n_pred, n_gt = len(pred), len(gt)
    if len(weights.pred_weights) != n_pred or len(weights.gt_weights) != n_gt:
        raise WeightLengthMismatch(
            f"weights ({len(weights.pred_weights)}, {len(weights.gt_weights)}) "
            f"do not match clouds ({n_pred}, {n_gt})"
        )
    diff_pg = pred.points - gt.points[i_pg]
    d_pg = np.linalg.norm(diff_pg, axis=1)
    diff_gp = pred.points[i_gp] - gt.points
    d_gp = np.linalg.norm(diff_gp, axis=1)
    value = float(np.mean(weights.pred_weights * d_pg) + np.mean(weights.gt_weights * d_gp))

    grad = np.zeros_like(pred.points)
    safe_pg = d_pg > 0.0
    grad[safe_pg] += (
        (weights.pred_weights[safe_pg] / n_pred / d_pg[safe_pg])[:, None] * diff_pg[safe_pg]
    )
    safe_gp = d_gp > 0.0
    contrib = np.zeros_like(diff_gp)
    contrib[safe_gp] = (
        (weights.gt_weights[safe_gp] / n_gt / d_gp[safe_gp])[:, None] * diff_gp[safe_gp]
    )
    np.add.at(grad, i_gp, contrib)
    return value, grad


def cmpl(pred: PointCloud, gt: PointCloud, weights: CmplWeights,
         method: str = "auto") -> tuple[float, np.ndarray]:
    """Curvature/margin weighted two-sided mean of unsquared NN distances.

    Returns the scalar loss and its gradient w.r.t. predicted positions,
    holding correspondences and weights fixed (lowest-index NN at ties).
    """
    pred.require_nonempty()
    gt.require_nonempty()
    i_pg, i_gp = cmpl_correspondences(pred, gt, method)
    return cmpl_frozen(pred, gt, weights, i_pg, i_gp)


def normals_mse_frozen(pred_normals: np.ndarray,
                       target_normals: np.ndarray) -> tuple[float, np.ndarray]:
    """Componentwise MSE and gradient for an already-matched normal pair."""
    diff = np.asarray(pred_normals) - np.asarray(target_normals)
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


def normals_loss(pred: PointCloud, gt: PointCloud,
                 method: str = "auto") -> tuple[float, np.ndarray]:
    """MSE between predicted normals and the normals of their GT matches.

    Matching is by position; the mean runs over points and components.
    Returns the loss and its gradient w.r.t. predicted normals.
    """
    if not pred.has_normals or not gt.has_normals:
        raise NormalsMissing("normals_loss requires normals on both clouds")
    pred.require_nonempty()
    gt.require_nonempty()
    idx = nearest_neighbor_indices(pred.points, gt.points, method)
    return normals_mse_frozen(pred.normals, gt.normals[idx])


def total_loss(bce: float, cmpl_value: float, normals: float, stage: int) -> float:
    """Stage 1 trains the coarse path only; stage 2 sums all three terms."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 1:
        return float(bce)
    return float(bce + cmpl_value + normals)


@dataclass
class MetricReport:
    """Evaluation metrics for one prediction, physical units."""

    cd_l2_mm2: float
    fidelity_mm: float
    f_score: float
    tau_mm: float
    n_pred: int
    n_gt: int
    per_type: dict[str, dict[str, float]] | None = None

    def to_dict(self) -> dict:
        out = {
            "cd_l2_mm2": self.cd_l2_mm2,
            "fidelity_mm": self.fidelity_mm,
            "f_score": self.f_score,
            "tau_mm": self.tau_mm,
            "n_pred": self.n_pred,
            "n_gt": self.n_gt,
        }
        if self.per_type is not None:
            out["per_type"] = self.per_type
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    CSV_FIELDS = ("cd_l2_mm2", "fidelity_mm", "f_score", "tau_mm", "n_pred", "n_gt")

    @classmethod
    def write_csv(cls, path, reports: list["MetricReport"], labels: list[str] | None = None):
        with open(path, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            header = (["case"] if labels else []) + list(cls.CSV_FIELDS)
            writer.writerow(header)
            for i, rep in enumerate(reports):
                row = ([labels[i]] if labels else []) + [
                    repr(getattr(rep, f)) if isinstance(getattr(rep, f), float)
                    else getattr(rep, f)
                    for f in cls.CSV_FIELDS
                ]
                writer.writerow(row)


def compute_metrics(pred: PointCloud, gt: PointCloud, tau: float,
                    fidelity_direction: str = "pred_to_gt",
                    method: str = "auto") -> MetricReport:
    return MetricReport(
        cd_l2_mm2=chamfer_l2(pred, gt, method),
        fidelity_mm=fidelity(pred, gt, fidelity_direction, method),
        f_score=f_score(pred, gt, tau, method),
        tau_mm=float(tau),
        n_pred=len(pred),
        n_gt=len(gt),
    )
