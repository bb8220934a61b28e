"""Classical reconstructions: Feldkamp (FDK) filtered back-projection and SART."""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from .errors import InsufficientViews, InvalidRelaxation
from .geometry import ScanGeometry
from .projector import _Grid, adjoint_array, forward_array, view_frames
from .volumes import ProjectionSet, Volume

SART_EPS = 1e-8


def ramp_kernel(n_pad: int, tau: float) -> np.ndarray:
    """Band-limited spatial ramp kernel sampled at spacing ``tau`` (circular layout)."""
    n = np.arange(n_pad)
    n = np.where(n <= n_pad // 2, n, n - n_pad)
    h = np.zeros(n_pad)
    h[n == 0] = 1.0 / (4.0 * tau * tau)
    odd = (n % 2) == 1
    h[odd] = -1.0 / (np.pi * n[odd] * tau) ** 2
    return h


def ramp_response(n_pad: int, tau: float, kind: str = "ram-lak") -> np.ndarray:
    """Real frequency response of the row filter (DC gain forced to zero)."""
    resp = np.real(np.fft.fft(ramp_kernel(n_pad, tau))) * tau
    resp[0] = 0.0
    if kind == "hann-apodized":
        f = np.fft.fftfreq(n_pad)  # cycles/sample, |f| <= 0.5
        resp *= 0.5 + 0.5 * np.cos(2.0 * np.pi * f)
    elif kind != "ram-lak":
        raise ValueError(f"unknown filter {kind!r}")
    return resp


def filter_rows(rows: np.ndarray, tau: float, kind: str = "ram-lak") -> np.ndarray:
    """Ramp-filter the last axis with zero padding to the next power of two >= 2W."""
    width = rows.shape[-1]
    n_pad = 1 << max(1, math.ceil(math.log2(2 * width)))
    spec = np.fft.fft(rows, n=n_pad, axis=-1) * ramp_response(n_pad, tau, kind)
    return np.real(np.fft.ifft(spec, axis=-1))[..., :width]


def parker_weight(beta, gamma, delta):
    """Parker short-scan weight for source angle ``beta`` and fan angle ``gamma`` (radians).

    ``delta`` is the fan half-angle; the scan covers ``[0, pi + 2*delta]``.
    Uses the fan-angle sign convention in which the conjugate of
    ``(beta, gamma)`` is ``(beta + pi + 2*gamma, -gamma)``.
    """
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    w = np.zeros(np.broadcast(beta, gamma).shape)
    beta, gamma = np.broadcast_arrays(beta, gamma)
    r1 = (beta >= 0) & (beta < 2 * delta - 2 * gamma)
    r2 = (beta >= 2 * delta - 2 * gamma) & (beta <= np.pi - 2 * gamma)
    r3 = (beta > np.pi - 2 * gamma) & (beta <= np.pi + 2 * delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        w[r1] = np.sin(np.pi / 4 * beta[r1] / (delta - gamma[r1])) ** 2
        w[r3] = np.sin(np.pi / 4 * (np.pi + 2 * delta - beta[r3]) / (delta + gamma[r3])) ** 2
    w[r2] = 1.0
    return w


@njit(cache=True, parallel=True)
def _fdk_backproject(filt, frames, dso, dsd, du, dv, ncols, nrows, origin, sp, shape, weights, out):
    nx, ny, nz = shape
    for ix in prange(nx):
        for iy in range(ny):
            for iz in range(nz):
                px = origin[0] + ix * sp
                py = origin[1] + iy * sp
                pz = origin[2] + iz * sp
                acc = 0.0
                for n in range(frames.shape[0]):
                    src = frames[n, 0]
                    w0 = (frames[n, 1, 0] - src[0]) / dsd
                    w1 = (frames[n, 1, 1] - src[1]) / dsd
                    dx = px - src[0]
                    dy = py - src[1]
                    dz = pz - src[2]
                    depth = dx * w0 + dy * w1
                    if depth <= 1e-6:
                        continue
                    t = dsd / depth
                    u = t * (dx * frames[n, 2, 0] + dy * frames[n, 2, 1]) / du + (ncols - 1) * 0.5
                    v = t * dz / dv + (nrows - 1) * 0.5
                    iu = math.floor(u)
                    iv = math.floor(v)
                    fu = u - iu
                    fv = v - iv
                    val = 0.0
                    for cv in range(2):
                        r = iv + cv
                        if r < 0 or r >= nrows:
                            continue
                        wv = fv if cv == 1 else 1.0 - fv
                        for cu in range(2):
                            c = iu + cu
                            if c < 0 or c >= ncols:
                                continue
                            wu = fu if cu == 1 else 1.0 - fu
                            val += wu * wv * filt[n, r, c] * weights[n, c]
                    acc += (dso * dso) / (depth * depth) * val
                out[ix, iy, iz] = acc


def _check_views(proj: ProjectionSet) -> np.ndarray:
    if len(proj) < 2:
        raise InsufficientViews(f"FDK needs at least 2 views, got {len(proj)}")
    ang = np.asarray(proj.angles)
    if np.any(np.diff(ang) <= 0):
        raise ValueError("FDK expects sorted view angles")
    return ang


def fdk_reconstruct(proj: ProjectionSet, geom: ScanGeometry | None = None,
                    filter: str = "ram-lak", short_scan: bool = True) -> Volume:
    """Feldkamp-Davis-Kress reconstruction in volume units.

    ``short_scan`` applies Parker weights over the covered angular range; when
    the range leaves no margin beyond the fan angle (e.g. exactly 180°) the
    views are weighted uniformly.  Full scans take the conventional factor 1/2
    for doubly sampled rays.
    """
    geom = proj.geom if geom is None else geom
    ang = _check_views(proj)
    W, H = geom.det_cols, geom.det_rows
    u_mm = (np.arange(W) - (W - 1) / 2.0) * geom.det_spacing_u
    v_mm = (np.arange(H) - (H - 1) / 2.0) * geom.det_spacing_v
    cosw = geom.dsd / np.sqrt(geom.dsd ** 2 + u_mm[None, :] ** 2 + v_mm[:, None] ** 2)
    data = proj.line_integrals() * cosw
    # filter on a virtual detector through the isocenter
    tau = geom.det_spacing_u * geom.dso / geom.dsd
    filt = filter_rows(data, tau, filter)

    d_beta = float(np.median(np.diff(np.radians(ang)))) if len(ang) > 1 else 0.0
    coverage = len(ang) * d_beta
    gamma = np.arctan(u_mm / geom.dsd)
    weights = np.ones((len(ang), W))
    scale = d_beta
    if short_scan:
        delta = (coverage - np.pi) / 2.0
        fan = float(np.max(np.abs(gamma)))
        if delta > fan:
            beta = np.radians(ang - ang[0])
            # our u axis runs opposite to Parker's fan-angle sign
            weights = parker_weight(beta[:, None], -gamma[None, :], delta)
    else:
        scale *= 0.5

    frames = view_frames(geom, tuple(ang))
    out = np.zeros(geom.vol_shape)
    _fdk_backproject(filt, frames, geom.dso, geom.dsd, geom.det_spacing_u, geom.det_spacing_v,
                     W, H, np.asarray(geom.vol_origin, dtype=np.float64), geom.voxel_spacing,
                     np.asarray(geom.vol_shape, dtype=np.int64), weights, out)
    out = np.maximum(out * scale, 0.0)
    return Volume(out.astype(np.float32), geom.voxel_spacing, geom.vol_origin)


def sart_reconstruct(proj: ProjectionSet, geom: ScanGeometry | None = None, iterations: int = 10,
                     relax: float = 0.5, step_frac: float = 0.5, callback=None) -> Volume:
    """Simultaneous algebraic reconstruction, one view per sub-iteration.

    ``callback(sweep, x)`` is invoked after every sweep with the current
    estimate (volume units).
    """
    if not (0.0 <= relax <= 1.0):
        raise InvalidRelaxation(f"relaxation must lie in [0, 1], got {relax}")
    geom = proj.geom if geom is None else geom
    grid = _Grid.of(None, geom, step_frac)
    p = proj.line_integrals()
    x = np.zeros(geom.vol_shape)
    ones_vol = np.ones(geom.vol_shape)
    ones_img = np.ones((1, geom.det_rows, geom.det_cols))
    norms = []
    for a in proj.angles:
        row = forward_array(ones_vol, grid, (a,))[0]
        col = adjoint_array(ones_img, grid, (a,))
        norms.append((np.maximum(row, SART_EPS), np.maximum(col, SART_EPS)))
    for sweep in range(iterations):
        for n, a in enumerate(proj.angles):
            if relax == 0.0:
                continue
            row, col = norms[n]
            resid = (p[n] - forward_array(x, grid, (a,))[0]) / row
            x += relax * adjoint_array(resid[None], grid, (a,)) / col
        np.maximum(x, 0.0, out=x)
        if callback is not None:
            callback(sweep, x)
    return Volume(x.astype(np.float32), geom.voxel_spacing, geom.vol_origin)
