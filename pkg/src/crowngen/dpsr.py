"""Differentiable Poisson surface reconstruction on a periodic grid.

Oriented points are splatted into a voxel vector field with trilinear
weights, the Poisson equation lap(chi) = div(v) is solved in the Fourier
domain with a Gaussian spectral low-pass, and the indicator is shifted so
its mean over the input points is zero (the surface is then the zero
level set). Every stage is linear, and the backward pass composes the
exact adjoint of each stage in reverse.

The grid is periodic: splatting and sampling wrap indices at the box
faces, matching the FFT boundary conditions. Callers keep geometry away
from the faces, so wrap-around has no practical effect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NormalsMissing, PointOutsideGrid, ShapeMismatch
from .voxelgrid import GridSpec, PointCloud, VoxelVolume

_CORNERS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


@dataclass(frozen=True)
class DpsrConfig:
    """Target grid plus spectral-solve knobs."""

    grid: GridSpec
    smoothing_sigma: float = 2.0
    splat: str = "trilinear"
    zero_mean_at_points: bool = True

    def __post_init__(self):
        if self.smoothing_sigma < 0:
            raise ValueError("smoothing_sigma must be >= 0")
        if self.splat != "trilinear":
            raise ValueError(f"only trilinear splatting is supported, got {self.splat!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims


@dataclass(frozen=True)
class DpsrGradients:
    """Gradients of a scalar objective w.r.t. point positions and normals."""

    d_points: np.ndarray
    d_normals: np.ndarray

    def __post_init__(self):
        dp = np.asarray(self.d_points, dtype=np.float64)
        dn = np.asarray(self.d_normals, dtype=np.float64)
        if dp.shape != dn.shape or dp.ndim != 2 or dp.shape[1] != 3:
            raise ValueError("d_points and d_normals must both be (N, 3)")
        if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dn))):
            raise ValueError("gradients must be finite")
        object.__setattr__(self, "d_points", dp)
        object.__setattr__(self, "d_normals", dn)


def _grid_coords(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Base lattice index and fractional offset of each point.

    Lattice node (i, j, k) sits at the voxel center origin + (idx + .5) s;
    points must lie inside the physical grid box.
    """
    pts = np.asarray(points, dtype=np.float64)
    rel = (pts - np.asarray(spec.origin)) / spec.spacing
    dims = np.array(spec.dims)
    outside = np.any((rel < 0.0) | (rel >= dims), axis=1)
    if np.any(outside):
        bad = int(np.argmax(outside))
        raise PointOutsideGrid(f"point {tuple(pts[bad])} lies outside the grid box")
    g = rel - 0.5
    base = np.floor(g).astype(np.int64)
    frac = g - base
    return base, frac


def _corner_weights(frac: np.ndarray):
    """Trilinear weight and its d/d(frac) per corner; yields (corner, w, dw)."""
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    one = np.ones_like(fx)
    for dx, dy, dz in _CORNERS:
        wx, dwx = (fx, one) if dx else (1.0 - fx, -one)
        wy, dwy = (fy, one) if dy else (1.0 - fy, -one)
        wz, dwz = (fz, one) if dz else (1.0 - fz, -one)
        w = wx * wy * wz
        dw = np.stack([dwx * wy * wz, wx * dwy * wz, wx * wy * dwz], axis=1)
        yield (dx, dy, dz), w, dw


def _wrap_indices(base: np.ndarray, corner, dims) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx, dy, dz = corner
    ix = (base[:, 0] + dx) % dims[0]
    iy = (base[:, 1] + dy) % dims[1]
    iz = (base[:, 2] + dz) % dims[2]
    return ix, iy, iz


def splat_normals(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    """Trilinear scatter of the normals into a (3, D, H, W) vector field."""
    if not cloud.has_normals:
        raise NormalsMissing("splatting requires per-point normals")
    base, frac = _grid_coords(cloud.points, spec)
    field = np.zeros((3,) + tuple(spec.dims), dtype=np.float64)
    for corner, w, _ in _corner_weights(frac):
        ix, iy, iz = _wrap_indices(base, corner, spec.dims)
        for c in range(3):
            np.add.at(field[c], (ix, iy, iz), w * cloud.normals[:, c])
    return field


def _spectral_multipliers(dims, sigma):
    """Per-axis multiplier K_c with chi_hat = sum_c K_c * v_hat_c (rfft layout)."""
    D, H, W = dims
    ux = np.fft.fftfreq(D) * D
    uy = np.fft.fftfreq(H) * H
    uz = np.fft.rfftfreq(W) * W
    u2 = (
        ux[:, None, None] ** 2
        + uy[None, :, None] ** 2
        + uz[None, None, :] ** 2
    )
    # the derivative factor must vanish at the Nyquist bin to keep the full
    # multiplier Hermitian (real output, exact adjoint)
    dx, dy, dz = ux.copy(), uy.copy(), uz.copy()
    if D % 2 == 0:
        dx[D // 2] = 0.0
    if H % 2 == 0:
        dy[H // 2] = 0.0
    if W % 2 == 0:
        dz[-1] = 0.0
    max_dim = float(max(dims))
    gauss = np.exp(-(sigma ** 2) * u2 / (2.0 * max_dim ** 2))
    inv = np.zeros_like(u2)
    nonzero = u2 > 0
    inv[nonzero] = 1.0 / (-u2[nonzero])
    scale = gauss * inv
    kx = 1j * dx[:, None, None] * scale
    ky = 1j * dy[None, :, None] * scale
    kz = 1j * dz[None, None, :] * scale
    return kx, ky, kz


def _solve_poisson(field: np.ndarray, sigma: float) -> np.ndarray:
    dims = field.shape[1:]
    mult = _spectral_multipliers(dims, sigma)
    chi_hat = np.zeros((dims[0], dims[1], dims[2] // 2 + 1), dtype=np.complex128)
    for c in range(3):
        chi_hat += mult[c] * np.fft.rfftn(field[c])
    return np.fft.irfftn(chi_hat, s=dims, axes=(0, 1, 2))


def _solve_poisson_adjoint(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Adjoint of the solve: real grid -> (3, D, H, W) field gradient."""
    dims = grid.shape
    mult = _spectral_multipliers(dims, sigma)
    g_hat = np.fft.rfftn(grid)
    out = np.empty((3,) + dims, dtype=np.float64)
    for c in range(3):
        out[c] = np.fft.irfftn(np.conj(mult[c]) * g_hat, s=dims, axes=(0, 1, 2))
    return out


def _sample_values(data: np.ndarray, spec: GridSpec, pts: np.ndarray) -> np.ndarray:
    base, frac = _grid_coords(pts, spec)
    out = np.zeros(pts.shape[0], dtype=np.float64)
    for corner, w, _ in _corner_weights(frac):
        ix, iy, iz = _wrap_indices(base, corner, spec.dims)
        out += w * data[ix, iy, iz]
    return out


def sample_trilinear(volume: VoxelVolume, points) -> np.ndarray:
    """Trilinear interpolation of the volume at physical points."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    return _sample_values(volume.data, volume.spec, pts)


def _sample_gradient(data: np.ndarray, spec: GridSpec, pts: np.ndarray) -> np.ndarray:
    """d(sampled value)/d(point position), shape (N, 3)."""
    base, frac = _grid_coords(pts, spec)
    grad = np.zeros((pts.shape[0], 3), dtype=np.float64)
    for corner, _, dw in _corner_weights(frac):
        ix, iy, iz = _wrap_indices(base, corner, spec.dims)
        grad += dw * data[ix, iy, iz][:, None]
    return grad / spec.spacing


def _scatter_scalar(values: np.ndarray, spec: GridSpec, pts: np.ndarray) -> np.ndarray:
    """Adjoint of sample_trilinear: scatter per-point scalars onto the grid."""
    base, frac = _grid_coords(pts, spec)
    grid = np.zeros(spec.dims, dtype=np.float64)
    for corner, w, _ in _corner_weights(frac):
        ix, iy, iz = _wrap_indices(base, corner, spec.dims)
        np.add.at(grid, (ix, iy, iz), w * values)
    return grid


def dpsr_forward(cloud: PointCloud, cfg: DpsrConfig) -> VoxelVolume:
    """Indicator grid whose zero level set approximates the point surface."""
    if not cloud.has_normals:
        raise NormalsMissing("dpsr_forward requires per-point normals")
    cloud.require_nonempty()
    field = splat_normals(cloud, cfg.grid)
    chi = _solve_poisson(field, cfg.smoothing_sigma)
    if cfg.zero_mean_at_points:
        samples = _sample_values(chi, cfg.grid, cloud.points)
        chi = chi - samples.mean()
    return VoxelVolume(cfg.grid, chi, kind="indicator")


def dpsr_backward(cloud: PointCloud, cfg: DpsrConfig, upstream: np.ndarray) -> DpsrGradients:
    """Adjoint of dpsr_forward for a scalar objective with gradient `upstream`.

    Point-position gradients flow through both the splat weights and, when
    zero_mean_at_points is on, the sampling locations of the mean shift.
    """
    if not cloud.has_normals:
        raise NormalsMissing("dpsr_backward requires per-point normals")
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != tuple(cfg.dims):
        raise ShapeMismatch(f"upstream shape {up.shape} != grid dims {cfg.dims}")
    pts = cloud.points
    n_pts = pts.shape[0]
    d_points = np.zeros((n_pts, 3), dtype=np.float64)

    if cfg.zero_mean_at_points:
        # chi_out = chi_pre - mean_i sample(chi_pre, p_i)
        field = splat_normals(cloud, cfg.grid)
        chi_pre = _solve_poisson(field, cfg.smoothing_sigma)
        total = up.sum()
        grid_grad = up - (total / n_pts) * _scatter_scalar(
            np.ones(n_pts), cfg.grid, pts
        )
        d_points -= (total / n_pts) * _sample_gradient(chi_pre, cfg.grid, pts)
    else:
        grid_grad = up

    field_grad = _solve_poisson_adjoint(grid_grad, cfg.smoothing_sigma)

    base, frac = _grid_coords(pts, cfg.grid)
    d_normals = np.zeros((n_pts, 3), dtype=np.float64)
    for corner, w, dw in _corner_weights(frac):
        ix, iy, iz = _wrap_indices(base, corner, cfg.dims)
        g = field_grad[:, ix, iy, iz]  # (3, N)
        d_normals += (w * g).T
        # dL/dw at this corner, then the chain through w(p)
        dl_dw = np.einsum("cn,nc->n", g, cloud.normals)
        d_points += dl_dw[:, None] * dw / cfg.grid.spacing
    return DpsrGradients(d_points, d_normals)
