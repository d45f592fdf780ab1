"""Point clouds, dense voxel grids, and the conversions between them.

Physical convention used throughout the package: a grid of dims (D, H, W)
with spacing s and origin (ox, oy, oz) covers the axis-aligned box
[origin, origin + dims * s). Array axis 0 runs along x, axis 1 along y,
axis 2 along z. The scalar stored at index (i, j, k) is associated with
the voxel CENTER at origin + (index + 0.5) * s.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, EmptyCloud, EmptyVolume, OutOfBounds

VOLUME_KINDS = ("occupancy", "logits", "indicator")
OOB_POLICIES = ("reject", "clamp", "drop")

_NORMAL_TOL = 1e-6


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """Points in physical mm coordinates, with optional unit normals."""

    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = _as_points(self.normals)
            if nrm.shape[0] != pts.shape[0]:
                raise ValueError("normals must match points in length")
            lengths = np.linalg.norm(nrm, axis=1)
            if np.any(np.abs(lengths - 1.0) > _NORMAL_TOL):
                worst = float(np.max(np.abs(lengths - 1.0)))
                raise ValueError(f"normals must be unit length (worst deviation {worst:.3e})")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def require_nonempty(self):
        if len(self) == 0:
            raise EmptyCloud("point cloud is empty")
        return self

    def transformed(self, rotation: np.ndarray, translation) -> "PointCloud":
        """Apply a rigid transform; normals rotate, positions rotate + translate."""
        rot = np.asarray(rotation, dtype=np.float64)
        tr = np.asarray(translation, dtype=np.float64)
        pts = self.points @ rot.T + tr
        nrm = self.normals @ rot.T if self.normals is not None else None
        return PointCloud(pts, nrm)


@dataclass(frozen=True)
class GridSpec:
    """Dense grid geometry: dims (D, H, W), spacing in mm, origin in mm."""

    dims: tuple[int, int, int]
    spacing: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValueError(f"dims must be three integers >= 2, got {self.dims}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def extent(self) -> np.ndarray:
        """Physical edge lengths of the grid box, in mm."""
        return np.array(self.dims, dtype=np.float64) * self.spacing

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.float64)
        return np.asarray(self.origin) + (idx + 0.5) * self.spacing

    def point_to_index(self, points: np.ndarray) -> np.ndarray:
        """floor((p - origin) / spacing), without bounds checking."""
        pts = _as_points(points)
        return np.floor((pts - np.asarray(self.origin)) / self.spacing).astype(np.int64)


@dataclass
class VoxelVolume:
    """A dense D x H x W scalar grid plus its physical placement.

    kind is one of 'occupancy' (values in {0, 1}), 'logits' (reals), or
    'indicator' (reals whose zero level set is a surface).
    """

    spec: GridSpec
    data: np.ndarray
    kind: str = "occupancy"

    def __post_init__(self):
        if self.kind not in VOLUME_KINDS:
            raise ValueError(f"kind must be one of {VOLUME_KINDS}, got {self.kind!r}")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.shape != tuple(self.spec.dims):
            raise ValueError(f"data shape {arr.shape} does not match dims {self.spec.dims}")
        if self.kind == "occupancy":
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise ValueError("occupancy volume must contain only 0 and 1")
        self.data = arr

    def occupied_indices(self) -> np.ndarray:
        """Indices of nonzero voxels in lexicographic (i, then j, then k) order."""
        return np.argwhere(self.data != 0.0)

    def occupancy_count(self) -> int:
        return int(np.count_nonzero(self.data))


def voxelize(cloud: PointCloud, spec: GridSpec, oob: str = "reject") -> VoxelVolume:
    """Mark the voxel containing each point as occupied.

    Index of a point p is floor((p - origin) / spacing). Points mapping
    outside the grid are handled per `oob`: 'reject' raises OutOfBounds,
    'clamp' clips the index into range, 'drop' discards the point.
    """
    if oob not in OOB_POLICIES:
        raise ValueError(f"oob must be one of {OOB_POLICIES}, got {oob!r}")
    cloud.require_nonempty()
    idx = spec.point_to_index(cloud.points)
    dims = np.array(spec.dims, dtype=np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    if not np.all(inside):
        if oob == "reject":
            bad = int(np.argmin(inside))
            raise OutOfBounds(cloud.points[bad], idx[bad])
        if oob == "clamp":
            idx = np.clip(idx, 0, dims - 1)
        else:  # drop
            idx = idx[inside]
    data = np.zeros(spec.dims, dtype=np.float64)
    if idx.shape[0] > 0:
        data[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return VoxelVolume(spec, data, kind="occupancy")


def devoxelize(volume: VoxelVolume) -> PointCloud:
    """One point per occupied voxel, at the voxel center, in index order."""
    if volume.kind != "occupancy":
        raise ValueError(f"devoxelize requires an occupancy volume, got {volume.kind!r}")
    idx = volume.occupied_indices()
    if idx.shape[0] == 0:
        raise EmptyVolume("no occupied voxel to devoxelize")
    return PointCloud(volume.spec.voxel_centers(idx))


def threshold_logits(logits: VoxelVolume) -> VoxelVolume:
    """Binary occupancy: 1 where the logit is strictly greater than zero."""
    if logits.kind != "logits":
        raise ValueError(f"threshold_logits requires a logits volume, got {logits.kind!r}")
    return VoxelVolume(logits.spec, (logits.data > 0.0).astype(np.float64), kind="occupancy")


# ---------------------------------------------------------------------------
# Point-cloud file formats: XYZ (3 or 6 whitespace columns) and binary PLY.
# ---------------------------------------------------------------------------

def save_xyz(path, cloud: PointCloud):
    cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    with open(path, "w", encoding="ascii") as fh:
        for row in cols:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_xyz(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) not in (3, 6):
                raise DataError(f"XYZ rows must have 3 or 6 columns, got {len(vals)}")
            if rows and len(vals) != len(rows[0]):
                raise DataError("XYZ rows mix 3- and 6-column layouts")
            rows.append([float(v) for v in vals])
    if not rows:
        raise DataError(f"no points in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    if arr.shape[1] == 3:
        return PointCloud(arr)
    return PointCloud(arr[:, :3], arr[:, 3:])


_PLY_POINT_PROPS = ("x", "y", "z")
_PLY_NORMAL_PROPS = ("nx", "ny", "nz")


def save_ply_points(path, cloud: PointCloud):
    """Binary little-endian PLY with float32 vertex (and optional normal) data."""
    props = list(_PLY_POINT_PROPS) + (list(_PLY_NORMAL_PROPS) if cloud.has_normals else [])
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property float {p}" for p in props]
    header += ["end_header"]
    cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(cols, dtype="<f4").tobytes())


def _parse_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise DataError("not a PLY file")
    fmt = fh.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise DataError(f"unsupported PLY format: {fmt.decode(errors='replace')}")
    elements = []  # (name, count, [(type, prop)])
    while True:
        line = fh.readline()
        if not line:
            raise DataError("unexpected end of PLY header")
        parts = line.strip().decode("ascii").split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))
        elif parts[0] == "end_header":
            return elements


_PLY_SCALARS = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "<u1", "uint8": "<u1", "char": "<i1", "int8": "<i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}


def load_ply_points(path) -> PointCloud:
    with open(path, "rb") as fh:
        elements = _parse_ply_header(fh)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise DataError("PLY has no vertex element")
        _, count, props = vertex
        if any(p[0] != "scalar" for p in props):
            raise DataError("list properties on vertex element are not supported")
        dtype = np.dtype([(p[2], _PLY_SCALARS[p[1]]) for p in props])
        raw = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
    names = [p[2] for p in props]
    if not all(c in names for c in _PLY_POINT_PROPS):
        raise DataError("PLY vertex element lacks x/y/z")
    pts = np.stack([raw[c].astype(np.float64) for c in _PLY_POINT_PROPS], axis=1)
    nrm = None
    if all(c in names for c in _PLY_NORMAL_PROPS):
        nrm = np.stack([raw[c].astype(np.float64) for c in _PLY_NORMAL_PROPS], axis=1)
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(lengths <= 0):
            raise DataError("PLY contains zero-length normals")
        if np.any(np.abs(lengths - 1.0) > _NORMAL_TOL):
            # only repair clearly non-unit normals; f4 rounding alone stays within tolerance
            nrm = nrm / lengths[:, None]
    return PointCloud(pts, nrm)


# ---------------------------------------------------------------------------
# Volume file format: 3 x u32 dims, f32 spacing, 3 x f32 origin, then
# D*H*W f32 values in row-major (i-major) order. Little endian throughout.
# The kind is not stored; the caller states it on load.
# ---------------------------------------------------------------------------

def save_volume(path, volume: VoxelVolume):
    spec = volume.spec
    header = struct.pack("<3I f 3f", *spec.dims, spec.spacing, *spec.origin)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())


def load_volume(path, kind: str) -> VoxelVolume:
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<3I f 3f"))
        if len(header) != struct.calcsize("<3I f 3f"):
            raise DataError(f"truncated volume header in {path}")
        d, h, w, spacing, ox, oy, oz = struct.unpack("<3I f 3f", header)
        n = d * h * w
        payload = np.frombuffer(fh.read(4 * n), dtype="<f4", count=n)
        if payload.size != n:
            raise DataError(f"truncated volume payload in {path}")
    spec = GridSpec((d, h, w), spacing, (ox, oy, oz))
    return VoxelVolume(spec, payload.astype(np.float64).reshape(d, h, w), kind=kind)
