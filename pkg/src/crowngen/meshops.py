"""Triangle meshes and local point-set geometry.

Marching cubes runs on the voxel-center lattice of a VoxelVolume: cell
(i, j, k) spans the eight centers (i..i+1, j..j+1, k..k+1), so a grid of
dims (D, H, W) has (D-1)(H-1)(W-1) cells. Triangle winding encloses the
region where the field exceeds the iso level; outward normals point
toward decreasing field values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .errors import DataError, NoSurface, TooFewPoints
from .voxelgrid import PointCloud, VoxelVolume

DEFAULT_CURVATURE_NEIGHBORS = 16
DEFAULT_KAPPA_MAX = 3.0


@dataclass(frozen=True)
class Mesh:
    """Indexed triangle surface in physical mm coordinates."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {verts.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {faces.shape}")
        if faces.size:
            if faces.min() < 0 or faces.max() >= verts.shape[0]:
                raise ValueError("face index out of range")
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            if np.any(degenerate):
                raise ValueError(f"{int(degenerate.sum())} degenerate faces")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def edges_unique(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted unique undirected edges and their face-incidence counts."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0, return_counts=True)


@dataclass(frozen=True)
class CurvatureField:
    """Per-point |curvature| clamped to [0, kappa_max]."""

    kappa: np.ndarray
    k_neighbors: int
    kappa_max: float = DEFAULT_KAPPA_MAX

    def __post_init__(self):
        kap = np.asarray(self.kappa, dtype=np.float64)
        if kap.ndim != 1:
            raise ValueError("kappa must be one-dimensional")
        if kap.size and (kap.min() < 0.0 or kap.max() > self.kappa_max):
            raise ValueError("kappa entries must lie in [0, kappa_max]")
        object.__setattr__(self, "kappa", kap)


def marching_cubes(volume: VoxelVolume, iso: float = 0.0) -> Mesh:
    """Extract the iso-level triangle surface of an indicator volume.

    Classic 256-case table, shared edge vertices merged, no ambiguity
    resolution. Raises NoSurface when the field never crosses iso.
    """
    if volume.kind != "indicator":
        raise ValueError(f"marching_cubes requires an indicator volume, got {volume.kind!r}")
    vals = volume.data
    D, H, W = volume.spec.dims
    below = vals < iso
    if not below.any() or below.all():
        raise NoSurface(f"field never crosses iso={iso}")

    # case index per cell from the eight corner comparisons
    case = np.zeros((D - 1, H - 1, W - 1), dtype=np.int32)
    for c, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        case |= below[dx:dx + D - 1, dy:dy + H - 1, dz:dz + W - 1].astype(np.int32) << c
    edge_mask = EDGE_TABLE[case]
    ci, cj, ck = np.nonzero(edge_mask)
    if ci.size == 0:
        raise NoSurface(f"field never crosses iso={iso}")
    acase = case[ci, cj, ck]
    amask = edge_mask[ci, cj, ck]

    corner_vals = np.stack(
        [vals[ci + dx, cj + dy, ck + dz] for (dx, dy, dz) in CORNER_OFFSETS], axis=1
    )
    cells = np.stack([ci, cj, ck], axis=1)

    # one interpolated vertex per flagged (cell, edge); shared edges merged
    # via a global key (lattice node, axis)
    vertex_id = np.full((ci.size, 12), -1, dtype=np.int64)
    keys, positions = [], []
    for e in range(12):
        rows = np.nonzero((amask >> e) & 1)[0]
        if rows.size == 0:
            continue
        a, b = EDGE_CORNERS[e]
        va = corner_vals[rows, a]
        vb = corner_vals[rows, b]
        t = (iso - va) / (vb - va)
        node_a = cells[rows] + CORNER_OFFSETS[a]
        node_b = cells[rows] + CORNER_OFFSETS[b]
        pos = node_a + t[:, None] * (node_b - node_a)
        lo = np.minimum(node_a, node_b)
        axis = np.argmax(node_a != node_b, axis=1)
        key = ((lo[:, 0] * H + lo[:, 1]) * W + lo[:, 2]) * 3 + axis
        base = sum(len(k) for k in keys)
        vertex_id[rows, e] = base + np.arange(rows.size)
        keys.append(key)
        positions.append(pos)
    all_keys = np.concatenate(keys)
    all_pos = np.concatenate(positions)
    uniq_keys, first, inverse = np.unique(all_keys, return_index=True, return_inverse=True)
    verts_idx_space = all_pos[first]

    # triangles: table entries name local edges; map through vertex ids
    tri_rows = TRI_TABLE[acase][:, :15].reshape(-1, 5, 3)
    valid = tri_rows[:, :, 0] >= 0
    cell_of_tri = np.repeat(np.arange(ci.size), 5).reshape(-1, 5)[valid]
    tri_edges = tri_rows[valid]
    faces_raw = vertex_id[cell_of_tri[:, None], tri_edges]
    faces = inverse[faces_raw]

    keep = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    faces = faces[keep]
    if faces.shape[0] == 0:
        raise NoSurface(f"field never crosses iso={iso} with nonzero area")

    spec = volume.spec
    vertices = np.asarray(spec.origin) + (verts_idx_space + 0.5) * spec.spacing
    used, faces = np.unique(faces, return_inverse=True)
    return Mesh(vertices[used], faces.reshape(-1, 3))


def extract_margin_line(mesh: Mesh) -> PointCloud:
    """Vertices incident to boundary edges (edges with exactly one face).

    Returns an empty cloud for a closed mesh; vertices are deduplicated
    and emitted in ascending vertex-index order.
    """
    if mesh.n_faces == 0:
        return PointCloud(np.zeros((0, 3)))
    edges, counts = mesh.edges_unique()
    boundary = edges[counts == 1]
    ids = np.unique(boundary)
    return PointCloud(mesh.vertices[ids])


def mesh_vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted per-vertex normals from face winding, unit length."""
    v = mesh.vertices
    f = mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    normals = np.zeros_like(v)
    for c in range(3):
        np.add.at(normals, f[:, c], fn)
    lengths = np.linalg.norm(normals, axis=1)
    lengths[lengths == 0.0] = 1.0
    return normals / lengths[:, None]


def knn_indices(points: np.ndarray, k: int, extra: int = 8) -> np.ndarray:
    """Indices of the k nearest neighbors of each point, self excluded.

    Ties at the k-th distance are broken toward the lowest point index so
    the result does not depend on input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n < k + 1:
        raise TooFewPoints(f"need at least k+1={k + 1} points, have {n}")
    m = min(n, k + 1 + extra)
    tree = cKDTree(pts)
    dist, idx = tree.query(pts, k=m)
    order = np.lexsort((idx, dist), axis=1)
    rows = np.arange(n)[:, None]
    idx = idx[rows, order]
    not_self = idx != np.arange(n)[:, None]
    rank = np.cumsum(not_self, axis=1)
    take = not_self & (rank <= k)
    if not np.all(take.sum(axis=1) == k):
        # extreme tie pile-up past the padded query; fall back to exact sort
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
        np.fill_diagonal(d2, np.inf)
        return np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx[take].reshape(n, k)


def _local_frames(pts: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Eigenvectors (ascending eigenvalue) of each neighborhood covariance."""
    hood = np.concatenate([pts[:, None, :], pts[nbr]], axis=1)
    centered = hood - hood.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    return vecs


def estimate_curvature(
    cloud: PointCloud,
    k: int = DEFAULT_CURVATURE_NEIGHBORS,
    kappa_max: float = DEFAULT_KAPPA_MAX,
) -> CurvatureField:
    """Mean-curvature magnitude from a local quadric fit over k neighbors.

    The neighborhood height field w(u, v) is fit with a full quadric and
    the mean curvature evaluated at the point itself; the magnitude is
    clamped to kappa_max.
    """
    if k < 5:
        raise ValueError(f"k must be >= 5, got {k}")
    cloud.require_nonempty()
    pts = cloud.points
    nbr = knn_indices(pts, k)
    frames = _local_frames(pts, nbr)
    rel = pts[nbr] - pts[:, None, :]
    u = np.einsum("nkj,nj->nk", rel, frames[:, :, 1])
    v = np.einsum("nkj,nj->nk", rel, frames[:, :, 2])
    w = np.einsum("nkj,nj->nk", rel, frames[:, :, 0])
    ones = np.ones_like(u)
    design = np.stack([u * u, u * v, v * v, u, v, ones], axis=2)
    ata = np.einsum("nki,nkj->nij", design, design)
    atb = np.einsum("nki,nk->ni", design, w)
    ata += 1e-12 * np.eye(6)
    coef = np.linalg.solve(ata, atb[:, :, None])[:, :, 0]
    a, b, c, d, e = coef[:, 0], coef[:, 1], coef[:, 2], coef[:, 3], coef[:, 4]
    denom = 2.0 * (1.0 + d * d + e * e) ** 1.5
    mean_curv = ((1.0 + e * e) * 2.0 * a - 2.0 * d * e * b + (1.0 + d * d) * 2.0 * c) / denom
    kappa = np.clip(np.abs(mean_curv), 0.0, kappa_max)
    return CurvatureField(kappa, k_neighbors=k, kappa_max=kappa_max)


def estimate_normals(cloud: PointCloud, k: int = DEFAULT_CURVATURE_NEIGHBORS) -> PointCloud:
    """Unit normals from local plane fits, oriented away from the centroid."""
    if k < 3:
        raise ValueError(f"k must be >= 3, got {k}")
    cloud.require_nonempty()
    pts = cloud.points
    nbr = knn_indices(pts, k)
    frames = _local_frames(pts, nbr)
    normals = frames[:, :, 0]
    centroid = pts.mean(axis=0)
    outward = np.einsum("nj,nj->n", normals, pts - centroid)
    flip = outward < 0.0
    normals = np.where(flip[:, None], -normals, normals)
    # ambiguous orientation (point at the centroid): pin the sign lexicographically
    ambiguous = outward == 0.0
    if np.any(ambiguous):
        lead = np.where(
            normals[:, 0] != 0.0,
            np.sign(normals[:, 0]),
            np.where(normals[:, 1] != 0.0, np.sign(normals[:, 1]), np.sign(normals[:, 2])),
        )
        flip2 = ambiguous & (lead < 0.0)
        normals = np.where(flip2[:, None], -normals, normals)
    lengths = np.linalg.norm(normals, axis=1)
    normals = normals / lengths[:, None]
    return PointCloud(pts, normals)


# ---------------------------------------------------------------------------
# Mesh file formats: ASCII OBJ (v/f records) and binary little-endian PLY.
# ---------------------------------------------------------------------------

def save_obj(path, mesh: Mesh):
    with open(path, "w", encoding="ascii") as fh:
        for vx, vy, vz in mesh.vertices:
            fh.write(f"v {float(vx)!r} {float(vy)!r} {float(vz)!r}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_obj(path) -> Mesh:
    verts, faces = [], []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                ids = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(ids) != 3:
                    raise DataError("only triangle faces are supported")
                faces.append(ids)
    if not verts:
        raise DataError(f"no vertices in {path}")
    return Mesh(np.asarray(verts), np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def save_ply_mesh(path, mesh: Mesh):
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {mesh.n_faces}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
        counts = np.full((mesh.n_faces, 1), 3, dtype="<u1")
        body = bytearray()
        faces = mesh.faces.astype("<i4")
        for row, cnt in zip(faces, counts):
            body += cnt.tobytes() + row.tobytes()
        fh.write(bytes(body))


def load_ply_mesh(path) -> Mesh:
    from .voxelgrid import _parse_ply_header, _PLY_SCALARS

    with open(path, "rb") as fh:
        elements = _parse_ply_header(fh)
        verts = None
        faces = []
        for name, count, props in elements:
            if name == "vertex":
                dtype = np.dtype([(p[2], _PLY_SCALARS[p[1]]) for p in props])
                raw = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
                verts = np.stack([raw[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
            elif name == "face":
                if len(props) != 1 or props[0][0] != "list":
                    raise DataError("face element must be a single list property")
                cnt_dt = np.dtype(_PLY_SCALARS[props[0][1]])
                idx_dt = np.dtype(_PLY_SCALARS[props[0][2]])
                for _ in range(count):
                    (n,) = struct.unpack("<" + {1: "B", 2: "H", 4: "I"}[cnt_dt.itemsize],
                                         fh.read(cnt_dt.itemsize))
                    row = np.frombuffer(fh.read(idx_dt.itemsize * n), dtype=idx_dt, count=n)
                    if n != 3:
                        raise DataError("only triangle faces are supported")
                    faces.append(row.astype(np.int64))
    if verts is None:
        raise DataError(f"no vertex element in {path}")
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return Mesh(verts, faces_arr)
