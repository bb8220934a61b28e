"""Volumetric image-quality metrics and slice export."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import correlate1d

from .errors import IndexOutOfRange, IoFailure, ShapeMismatch
from .volumes import Volume

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _arrays(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a.data if isinstance(a, Volume) else a, dtype=np.float64)
    y = np.asarray(b.data if isinstance(b, Volume) else b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    x, y = _arrays(a, b)
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(data_range ** 2 / mse))


def _gauss_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = x
    for axis in range(x.ndim):
        out = correlate1d(out, k, axis=axis, mode="constant")
    r = len(k) // 2
    return out[tuple(slice(r, n - r) for n in x.shape)]


def ssim3d(a, b, data_range: float = 1.0) -> float:
    """Mean 3-D SSIM over all positions where the 7^3 Gaussian window fits."""
    x, y = _arrays(a, b)
    if min(x.shape) < SSIM_WINDOW or x.ndim != 3:
        raise ShapeMismatch(f"volume {x.shape} smaller than the {SSIM_WINDOW}^3 window")
    k = _gauss_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def window_to_uint16(values: np.ndarray, level: float, width: float) -> np.ndarray:
    if not width > 0:
        raise ValueError("window width must be positive")
    lo = level - width / 2.0
    t = np.clip((np.asarray(values, dtype=np.float64) - lo) / width, 0.0, 1.0)
    return np.round(t * 65535.0).astype(np.uint16)


def write_pgm16(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint16)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode()
    try:
        with open(path, "wb") as f:
            f.write(header + img.astype(">u2").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_pgm16(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w).astype(np.uint16)


def export_slices(vol: Volume, axis: str, indices: Iterable[int], window: tuple[float, float],
                  out_dir) -> list[Path]:
    """Write windowed 16-bit PGM slices; returns the written paths."""
    ax = {"x": 0, "y": 1, "z": 2}.get(axis)
    if ax is None:
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    indices = list(indices)
    n = vol.shape[ax]
    for i in indices:
        if not 0 <= i < n:
            raise IndexOutOfRange(f"slice {i} outside [0, {n})")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    paths = []
    for i in indices:
        img = np.take(vol.data, i, axis=ax)
        path = out / f"slice_{axis}{i:04d}.pgm"
        write_pgm16(path, window_to_uint16(img.T, *window))
        paths.append(path)
    return paths
