"""Procedural synthetic crown cases.

Each case is built in a local frame centered on the prepared tooth: a
parametric crown surface (superellipse cross-section, cusp bumps keyed to
the tooth type, open at the margin plane), the stump it would seat on,
and two neighbor teeth for context. Everything is deterministic from
(seed, label).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .meshops import Mesh, load_ply_mesh, mesh_vertex_normals, save_ply_mesh
from .refiner import FdiLabel
from .voxelgrid import (
    PointCloud,
    load_ply_points,
    save_ply_points,
    save_xyz,
)

# cusp counts per tooth type; incisors get a ridge (two elongated bumps)
_CUSPS = {"incisor": 2, "canine": 1, "premolar": 2, "molar": 4}

_N_PHI = 96
_N_ROWS = 32


@dataclass
class SyntheticCase:
    """One benchmark case: context scan, open GT crown, margin, label."""

    case_id: str
    ios_cloud: PointCloud
    gt_crown_mesh: Mesh
    gt_cloud: PointCloud  # mesh vertices with outward normals
    gt_margin_mask: np.ndarray  # bool per GT point
    label: FdiLabel
    seed: int
    scale: float = 1.0

    @property
    def gt_margin(self) -> PointCloud:
        return PointCloud(self.gt_cloud.points[self.gt_margin_mask])


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def _case_rotation(rng) -> np.ndarray:
    """Random yaw plus a small tilt, like an arbitrarily seated scan."""
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    tilt = rng.uniform(-0.08, 0.08, 2)
    cz, sz = np.cos(yaw), np.sin(yaw)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    cx, sx = np.cos(tilt[0]), np.sin(tilt[0])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    cy, sy = np.cos(tilt[1]), np.sin(tilt[1])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    return rz @ rx @ ry


def generate_synthetic_case(seed: int, label: FdiLabel, scale: float = 1.0,
                            case_id: str | None = None) -> SyntheticCase:
    """Build one deterministic synthetic case.

    scale multiplies all lengths; the default geometry stays inside a
    +-7 mm envelope so it fits the default 19.2 mm crop cube.
    """
    rng = np.random.default_rng([int(seed), label.class_index])
    tooth = label.tooth_type
    n_cusps = _CUSPS[tooth]

    base_r = {"incisor": 2.6, "canine": 2.5, "premolar": 3.0, "molar": 3.6}[tooth]
    r0 = scale * (base_r + rng.uniform(-0.2, 0.2))
    aspect = rng.uniform(0.45, 0.55) if tooth == "incisor" else rng.uniform(0.85, 1.0)
    height = scale * rng.uniform(2.4, 3.2)
    z_margin = scale * rng.uniform(0.5, 0.9)
    cusp_amp = scale * (0.35 if tooth != "canine" else 0.55) * rng.uniform(0.8, 1.2)
    fossa = 0.5 * cusp_amp
    wave2, wave3 = rng.uniform(0.04, 0.08), rng.uniform(0.02, 0.05)
    ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
    top_frac = rng.uniform(0.30, 0.40)
    sq = rng.uniform(3.0, 4.0) if tooth == "molar" else rng.uniform(2.0, 2.6)

    phi = np.arange(_N_PHI) * (2.0 * np.pi / _N_PHI)
    t = np.linspace(0.0, 1.0, _N_ROWS + 1)

    # superellipse cross-section direction scaling
    cosp, sinp = np.cos(phi), np.sin(phi)
    super_r = (np.abs(cosp) ** sq + np.abs(sinp / aspect) ** sq) ** (-1.0 / sq)
    wav = 1.0 + wave2 * np.sin(2 * phi + ph1) + wave3 * np.sin(3 * phi + ph2)
    rim = r0 * super_r * wav  # margin loop radius per phi

    # radial profile: slight equator bulge, tapering to the occlusal table
    prof = (1.0 + 0.10 * np.sin(np.pi * np.minimum(t, 0.75) / 0.75)) * (
        1.0 - (1.0 - top_frac) * _smoothstep(t)
    )
    zprof = _smoothstep(t)

    rho = rim[None, :] * prof[:, None]
    cusp_env = (t ** 2)[:, None]
    cusp_field = cusp_amp * cusp_env * np.cos(n_cusps * phi)[None, :]
    z = z_margin + height * zprof[:, None] + cusp_field

    verts = np.empty(((_N_ROWS + 1) * _N_PHI + 1, 3))
    verts[:-1, 0] = (rho * cosp[None, :]).ravel()
    verts[:-1, 1] = (rho * sinp[None, :]).ravel()
    verts[:-1, 2] = z.ravel()
    # center of the occlusal table sits below the cusp tips (central fossa)
    verts[-1] = (0.0, 0.0, z_margin + height - fossa)

    faces = []
    for i in range(_N_ROWS):
        row0 = i * _N_PHI
        row1 = (i + 1) * _N_PHI
        for j in range(_N_PHI):
            jn = (j + 1) % _N_PHI
            faces.append((row0 + j, row0 + jn, row1 + jn))
            faces.append((row0 + j, row1 + jn, row1 + j))
    apex = verts.shape[0] - 1
    top = _N_ROWS * _N_PHI
    for j in range(_N_PHI):
        jn = (j + 1) % _N_PHI
        faces.append((top + j, top + jn, apex))
    rotation = _case_rotation(rng)
    verts = verts @ rotation.T
    mesh = Mesh(verts, np.asarray(faces, dtype=np.int64))

    normals = mesh_vertex_normals(mesh)
    gt_cloud = PointCloud(verts, normals)
    margin_mask = np.zeros(verts.shape[0], dtype=bool)
    margin_mask[:_N_PHI] = True

    ios = _build_ios(rng, rim, cosp, sinp, z_margin, r0, scale)
    ios = PointCloud(ios.points @ rotation.T)
    return SyntheticCase(
        case_id=case_id or f"seed{seed}_{label.code}",
        ios_cloud=ios,
        gt_crown_mesh=mesh,
        gt_cloud=gt_cloud,
        gt_margin_mask=margin_mask,
        label=label,
        seed=int(seed),
        scale=float(scale),
    )


def _build_ios(rng, rim, cosp, sinp, z_margin, r0, scale) -> PointCloud:
    """Stump under the margin plus two flanking neighbor teeth."""
    depth = scale * rng.uniform(1.6, 2.0)
    n_rows = 12
    ts = np.linspace(0.0, 1.0, n_rows)
    taper = 0.96 - 0.28 * ts
    rho = rim[None, :] * taper[:, None]
    z = z_margin - depth * ts
    stump = np.empty((n_rows * rim.size, 3))
    stump[:, 0] = (rho * cosp[None, :]).ravel()
    stump[:, 1] = (rho * sinp[None, :]).ravel()
    stump[:, 2] = np.repeat(z, rim.size)

    parts = [stump]
    n_theta, n_phi2 = 14, 28
    theta = np.linspace(-np.pi / 2 + 0.12, np.pi / 2 - 0.12, n_theta)
    phi2 = np.arange(n_phi2) * (2 * np.pi / n_phi2)
    tt, pp = np.meshgrid(theta, phi2, indexing="ij")
    for side in (-1.0, 1.0):
        a = scale * rng.uniform(1.1, 1.4)
        c = scale * rng.uniform(1.6, 2.2)
        cx = side * (r0 + scale * rng.uniform(0.7, 1.0) + a)
        blob = np.empty((tt.size, 3))
        blob[:, 0] = (cx + a * np.cos(tt) * np.cos(pp)).ravel()
        blob[:, 1] = (a * np.cos(tt) * np.sin(pp)).ravel()
        blob[:, 2] = (z_margin + 0.4 * scale + c * np.sin(tt)).ravel()
        parts.append(blob)
    return PointCloud(np.concatenate(parts, axis=0))


# ---------------------------------------------------------------------------
# Dataset assembly: labels cycle the 32 FDI codes; split is stratified by
# tooth type at the configured ratio.
# ---------------------------------------------------------------------------

def case_labels(n_cases: int) -> list[FdiLabel]:
    return [FdiLabel.from_class_index(i % 32) for i in range(n_cases)]


def build_cases(n_cases: int, seed: int, scale: float = 1.0) -> list[SyntheticCase]:
    labels = case_labels(n_cases)
    return [
        generate_synthetic_case(seed + i, labels[i], scale, case_id=f"case{i:04d}")
        for i in range(n_cases)
    ]


def stratified_split(labels: list[FdiLabel], ratio: tuple[int, int, int],
                     seed: int) -> list[str]:
    """Assign train/val/test per case, stratified by tooth type.

    Within each type the ratio is honored by largest remainder, so every
    split's per-type share is within one case of exact.
    """
    names = ("train", "val", "test")
    total = float(sum(ratio))
    out = [""] * len(labels)
    types = sorted({lab.tooth_type for lab in labels})
    for t_index, tooth in enumerate(types):
        idx = [i for i, lab in enumerate(labels) if lab.tooth_type == tooth]
        rng = np.random.default_rng([seed, t_index])
        idx = [idx[j] for j in rng.permutation(len(idx))]
        n = len(idx)
        quota = [n * r / total for r in ratio]
        counts = [int(np.floor(q)) for q in quota]
        rem = n - sum(counts)
        # remainder ties go to the smallest splits first so tiny datasets
        # still populate val/test
        order = sorted(range(3), key=lambda s: (-(quota[s] - counts[s]), -s))
        for s in order[:rem]:
            counts[s] += 1
        cursor = 0
        for split_name, count in zip(names, counts):
            for i in idx[cursor:cursor + count]:
                out[i] = split_name
            cursor += count
    return out


# ---------------------------------------------------------------------------
# On-disk dataset layout
# ---------------------------------------------------------------------------

def save_dataset(root, cases: list[SyntheticCase], splits: list[str],
                 extra_meta: dict | None = None):
    os.makedirs(root, exist_ok=True)
    entries = []
    for case, split in zip(cases, splits):
        case_dir = os.path.join(root, "cases", case.case_id)
        os.makedirs(case_dir, exist_ok=True)
        save_ply_points(os.path.join(case_dir, "ios.ply"), case.ios_cloud)
        save_ply_mesh(os.path.join(case_dir, "gt_mesh.ply"), case.gt_crown_mesh)
        save_ply_points(os.path.join(case_dir, "gt_points.ply"), case.gt_cloud)
        save_xyz(os.path.join(case_dir, "gt_margin.xyz"), case.gt_margin)
        entries.append({
            "id": case.case_id,
            "label": case.label.code,
            "tooth_type": case.label.tooth_type,
            "seed": case.seed,
            "scale": case.scale,
            "split": split,
        })
    manifest = {"n_cases": len(cases), "cases": entries}
    manifest.update(extra_meta or {})
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(root, split: str | None = None) -> tuple[list[SyntheticCase], list[str]]:
    manifest_path = os.path.join(root, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    cases, splits = [], []
    for entry in manifest["cases"]:
        if split is not None and entry["split"] != split:
            continue
        case_dir = os.path.join(root, "cases", entry["id"])
        mesh = load_ply_mesh(os.path.join(case_dir, "gt_mesh.ply"))
        gt_cloud = load_ply_points(os.path.join(case_dir, "gt_points.ply"))
        ios = load_ply_points(os.path.join(case_dir, "ios.ply"))
        # margin membership is intrinsic: boundary vertices of the GT mesh
        edges, counts = mesh.edges_unique()
        boundary_ids = np.unique(edges[counts == 1])
        mask = np.zeros(len(gt_cloud), dtype=bool)
        mask[boundary_ids] = True
        cases.append(SyntheticCase(
            case_id=entry["id"],
            ios_cloud=ios,
            gt_crown_mesh=mesh,
            gt_cloud=gt_cloud,
            gt_margin_mask=mask,
            label=FdiLabel.from_code(entry["label"]),
            seed=int(entry["seed"]),
            scale=float(entry.get("scale", 1.0)),
        ))
        splits.append(entry["split"])
    if not cases:
        raise DataError(f"no cases in {root}" + (f" for split {split!r}" if split else ""))
    return cases, splits
