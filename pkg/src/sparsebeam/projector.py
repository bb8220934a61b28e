"""Ray-marching DRR projector, its exact adjoint, and the count-domain noise model.

Each detector ray runs from the source through the pixel center and is
sampled at the midpoints of steps of length ``step_frac * voxel_spacing``
across the support of the trilinear interpolant (one voxel beyond the
outermost voxel centers).  The adjoint replays the same samples and
scatters ``weight * pixel`` into the eight neighbouring voxels.
"""

from __future__ import annotations

import math
from typing import Sequence

import numba
import numpy as np
from numba import njit, prange

from .errors import ShapeMismatch
from .geometry import ScanGeometry, ViewAngleSet, detector_frame
from .volumes import ProjectionSet, Volume


def _angles(angles) -> tuple[float, ...]:
    if isinstance(angles, ViewAngleSet):
        return angles.angles
    return tuple(float(a) for a in angles)


def view_frames(geom: ScanGeometry, angles: Sequence[float]) -> np.ndarray:
    """Per-view ``[source, detector_center, u_axis, v_axis]`` as a ``(V, 4, 3)`` array."""
    out = np.empty((len(angles), 4, 3))
    for i, a in enumerate(angles):
        src, center, u, v, _ = detector_frame(geom, a)
        out[i] = (src, center, u, v)
    return out


@njit(cache=True)
def _ray(frame, iu, iv, ncols, nrows, du, dv, lo, hi):
    src = frame[0]
    u_mm = (iu - (ncols - 1) * 0.5) * du
    v_mm = (iv - (nrows - 1) * 0.5) * dv
    d = np.empty(3)
    for k in range(3):
        d[k] = frame[1, k] + u_mm * frame[2, k] + v_mm * frame[3, k] - src[k]
    norm = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    for k in range(3):
        d[k] /= norm
    t0 = -1e30
    t1 = 1e30
    for k in range(3):
        if abs(d[k]) < 1e-12:
            if src[k] < lo[k] or src[k] > hi[k]:
                return d, 0.0, -1.0
        else:
            a = (lo[k] - src[k]) / d[k]
            b = (hi[k] - src[k]) / d[k]
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
    return d, t0, t1


@njit(cache=True, inline="always")
def _sample(vol, x, y, z):
    """Trilinear read at continuous index (x, y, z); out-of-grid corners count as zero."""
    nx, ny, nz = vol.shape
    ix = int(math.floor(x))
    iy = int(math.floor(y))
    iz = int(math.floor(z))
    fx = x - ix
    fy = y - iy
    fz = z - iz
    acc = 0.0
    for cz in range(2):
        k = iz + cz
        if k < 0 or k >= nz:
            continue
        wz = fz if cz else 1.0 - fz
        for cy in range(2):
            j = iy + cy
            if j < 0 or j >= ny:
                continue
            wyz = wz * (fy if cy else 1.0 - fy)
            for cx in range(2):
                i = ix + cx
                if i < 0 or i >= nx:
                    continue
                acc += wyz * (fx if cx else 1.0 - fx) * vol[i, j, k]
    return acc


@njit(cache=True, inline="always")
def _splat(acc_vol, x, y, z, value):
    """Adjoint of :func:`_sample`: scatter ``weight * value`` into the corners."""
    nx, ny, nz = acc_vol.shape
    ix = int(math.floor(x))
    iy = int(math.floor(y))
    iz = int(math.floor(z))
    fx = x - ix
    fy = y - iy
    fz = z - iz
    for cz in range(2):
        k = iz + cz
        if k < 0 or k >= nz:
            continue
        wz = fz if cz else 1.0 - fz
        for cy in range(2):
            j = iy + cy
            if j < 0 or j >= ny:
                continue
            wyz = wz * (fy if cy else 1.0 - fy)
            for cx in range(2):
                i = ix + cx
                if i < 0 or i >= nx:
                    continue
                acc_vol[i, j, k] += wyz * (fx if cx else 1.0 - fx) * value


@njit(cache=True)
def _march_forward(vol, origin, sp, frame, iu, iv, ncols, nrows, du, dv, ds, lo, hi):
    d, t0, t1 = _ray(frame, iu, iv, ncols, nrows, du, dv, lo, hi)
    if t1 <= t0:
        return 0.0
    n_steps = int(math.ceil((t1 - t0) / ds))
    src = frame[0]
    acc = 0.0
    for s in range(n_steps):
        t = t0 + (s + 0.5) * ds
        acc += _sample(vol, (src[0] + t * d[0] - origin[0]) / sp,
                       (src[1] + t * d[1] - origin[1]) / sp,
                       (src[2] + t * d[2] - origin[2]) / sp)
    return acc * ds


@njit(cache=True)
def _march_adjoint(acc_vol, value, origin, sp, frame, iu, iv, ncols, nrows, du, dv, ds, lo, hi):
    d, t0, t1 = _ray(frame, iu, iv, ncols, nrows, du, dv, lo, hi)
    if t1 <= t0:
        return
    n_steps = int(math.ceil((t1 - t0) / ds))
    src = frame[0]
    v = value * ds
    for s in range(n_steps):
        t = t0 + (s + 0.5) * ds
        _splat(acc_vol, (src[0] + t * d[0] - origin[0]) / sp,
               (src[1] + t * d[1] - origin[1]) / sp,
               (src[2] + t * d[2] - origin[2]) / sp, v)


@njit(cache=True)
def _forward_serial(vol, origin, sp, frames, ncols, nrows, du, dv, ds, lo, hi, out):
    n_pix = frames.shape[0] * nrows * ncols
    for p in range(n_pix):
        view = p // (nrows * ncols)
        row = (p // ncols) % nrows
        col = p % ncols
        out[view, row, col] = _march_forward(vol, origin, sp, frames[view], col, row,
                                             ncols, nrows, du, dv, ds, lo, hi)


@njit(cache=True, parallel=True)
def _forward_parallel(vol, origin, sp, frames, ncols, nrows, du, dv, ds, lo, hi, out):
    n_pix = frames.shape[0] * nrows * ncols
    for p in prange(n_pix):
        view = p // (nrows * ncols)
        row = (p // ncols) % nrows
        col = p % ncols
        out[view, row, col] = _march_forward(vol, origin, sp, frames[view], col, row,
                                             ncols, nrows, du, dv, ds, lo, hi)


@njit(cache=True)
def _adjoint_view(img, origin, sp, frame, ncols, nrows, du, dv, ds, lo, hi, acc_vol):
    for row in range(nrows):
        for col in range(ncols):
            val = img[row, col]
            if val != 0.0:
                _march_adjoint(acc_vol, val, origin, sp, frame, col, row,
                               ncols, nrows, du, dv, ds, lo, hi)


@njit(cache=True, parallel=True)
def _adjoint_chunk(imgs, origin, sp, frames, ncols, nrows, du, dv, ds, lo, hi, bufs):
    for b in prange(imgs.shape[0]):
        bufs[b, :, :, :] = 0.0
        _adjoint_view(imgs[b], origin, sp, frames[b], ncols, nrows, du, dv, ds, lo, hi, bufs[b])


class _Grid:
    """Numeric arguments shared by the kernels for one (volume grid, geometry) pair."""

    def __init__(self, shape, voxel_spacing, origin, geom: ScanGeometry, step_frac: float):
        if not (0.0 < step_frac <= 1.0):
            raise ValueError("step_frac must lie in (0, 1]")
        self.shape = tuple(int(n) for n in shape)
        self.sp = float(voxel_spacing)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.lo = self.origin - self.sp
        self.hi = self.origin + np.asarray(self.shape, dtype=np.float64) * self.sp
        self.geom = geom
        self.ds = step_frac * self.sp

    @classmethod
    def of(cls, vol_or_shape, geom, step_frac):
        if isinstance(vol_or_shape, Volume):
            return cls(vol_or_shape.shape, vol_or_shape.voxel_spacing, vol_or_shape.origin,
                       geom, step_frac)
        return cls(geom.vol_shape, geom.voxel_spacing, geom.vol_origin, geom, step_frac)

    def args(self, frames):
        g = self.geom
        return (self.origin, self.sp, frames, g.det_cols, g.det_rows,
                g.det_spacing_u, g.det_spacing_v, self.ds, self.lo, self.hi)


def forward_array(data: np.ndarray, grid: _Grid, angles, parallel: bool = False) -> np.ndarray:
    """Apply the projector to a raw ``(nx, ny, nz)`` array; returns float64 ``(V, H, W)``."""
    angles = _angles(angles)
    frames = view_frames(grid.geom, angles)
    out = np.zeros((len(angles), grid.geom.det_rows, grid.geom.det_cols))
    if len(angles) == 0:
        return out
    vol = np.ascontiguousarray(data, dtype=np.float64)
    if vol.shape != grid.shape:
        raise ShapeMismatch(f"volume shape {vol.shape} != grid {grid.shape}")
    kernel = _forward_parallel if parallel else _forward_serial
    kernel(vol, *grid.args(frames), out)
    return out


def adjoint_array(imgs: np.ndarray, grid: _Grid, angles, parallel: bool = False) -> np.ndarray:
    """Transpose of :func:`forward_array`; per-view partial volumes summed in view order."""
    angles = _angles(angles)
    imgs = np.ascontiguousarray(imgs, dtype=np.float64)
    if imgs.shape != (len(angles), grid.geom.det_rows, grid.geom.det_cols):
        raise ShapeMismatch(f"projection stack {imgs.shape} does not match geometry")
    frames = view_frames(grid.geom, angles)
    total = np.zeros(grid.shape)
    if parallel:
        chunk = max(1, numba.get_num_threads())
        bufs = np.empty((chunk,) + grid.shape)
        for start in range(0, len(angles), chunk):
            stop = min(start + chunk, len(angles))
            _adjoint_chunk(imgs[start:stop], *grid.args(frames[start:stop]), bufs)
            for b in range(stop - start):
                total += bufs[b]
    else:
        buf = np.empty(grid.shape)
        for i in range(len(angles)):
            buf[...] = 0.0
            _adjoint_view(imgs[i], *grid.args(frames[i]), buf)
            total += buf
    return total


def forward_project(vol: Volume, geom: ScanGeometry, angles, step_frac: float = 0.5,
                    parallel: bool = False, mu_scale: float = 1.0) -> ProjectionSet:
    """Digitally reconstructed radiographs of ``vol``.

    ``mu_scale`` (mm^-1 per volume unit) multiplies the line integrals and is
    recorded on the result so downstream reconstructions can undo it.
    """
    angles = _angles(angles)
    grid = _Grid.of(vol, geom, step_frac)
    sino = forward_array(vol.data, grid, angles, parallel) * mu_scale
    return ProjectionSet(sino.astype(np.float32), angles, geom, None, mu_scale)


def backproject(proj: ProjectionSet, geom: ScanGeometry | None = None, step_frac: float = 0.5,
                parallel: bool = False) -> Volume:
    """Exact transpose of :func:`forward_project` (on the geometry's voxel grid)."""
    geom = proj.geom if geom is None else geom
    grid = _Grid.of(None, geom, step_frac)
    data = adjoint_array(proj.views, grid, proj.angles, parallel)
    return Volume(data.astype(np.float32), geom.voxel_spacing, geom.vol_origin)


def apply_noise(clean: ProjectionSet, i0: float = 1e5, sigma: float = 10.0,
                seed: int = 0) -> ProjectionSet:
    """Poisson photon noise plus additive Gaussian count noise, then re-log.

    View ``n`` draws from a Philox stream keyed by ``(seed, n)`` in raster
    order, so the output depends only on the seed and the view index.
    """
    if not i0 > 0:
        raise ValueError("i0 must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if clean.norm_max is not None:
        raise ValueError("noise must be applied to raw (unnormalized) projections")
    out = np.empty(clean.views.shape, dtype=np.float64)
    for n in range(len(clean)):
        rng = np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), n]))
        lam = i0 * np.exp(-clean.views[n].astype(np.float64))
        counts = rng.poisson(lam).astype(np.float64)
        if sigma > 0:
            counts += rng.normal(0.0, sigma, size=counts.shape)
        out[n] = np.log(i0 / np.maximum(counts, 1.0))
    return ProjectionSet(out.astype(np.float32), clean.angles, clean.geom, None, clean.mu_scale)
