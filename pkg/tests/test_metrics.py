import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebeam.errors import IndexOutOfRange, ShapeMismatch
from sparsebeam.metrics import export_slices, psnr, read_pgm16, ssim3d, window_to_uint16
from sparsebeam.volumes import Volume


def vol(data):
    return Volume(np.asarray(data, dtype=np.float32), 1.0, (0.0, 0.0, 0.0))


def test_psnr_examples(rng):
    a = rng.random((8, 8, 8))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ShapeMismatch):
        psnr(a, a[:4])


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 100.0), st.integers(0, 1000))
def test_psnr_scale_invariance(c, seed):
    r = np.random.default_rng(seed)
    a, b = r.random((4, 4, 4)), r.random((4, 4, 4))
    assert psnr(c * a, c * b, data_range=c) == pytest.approx(psnr(a, b), abs=1e-9)


def test_ssim_examples(rng):
    a = rng.random((10, 10, 10))
    b = rng.random((10, 10, 10))
    assert ssim3d(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim3d(a, b) == pytest.approx(ssim3d(b, a), abs=1e-9)
    c1 = 0.01 ** 2
    ma, mb = 0.3, 0.7
    const = ssim3d(np.full((9, 9, 9), ma), np.full((9, 9, 9), mb))
    assert const == pytest.approx((2 * ma * mb + c1) / (ma ** 2 + mb ** 2 + c1), abs=1e-9)
    with pytest.raises(ShapeMismatch):
        ssim3d(np.zeros((5, 9, 9)), np.zeros((5, 9, 9)))


def test_ssim_matches_brute_force_window(rng):
    a, b = rng.random((8, 8, 8)), rng.random((8, 8, 8))
    g = np.exp(-0.5 * (np.arange(-3, 4) / 1.5) ** 2)
    g /= g.sum()
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    vals = []
    for i, j, k in np.ndindex(2, 2, 2):
        x, y = a[i:i + 7, j:j + 7, k:k + 7], b[i:i + 7, j:j + 7, k:k + 7]
        mx, my = (w * x).sum(), (w * y).sum()
        sxx = (w * x * x).sum() - mx * mx
        syy = (w * y * y).sum() - my * my
        sxy = (w * x * y).sum() - mx * my
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        vals.append((2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    assert ssim3d(a, b) == pytest.approx(np.mean(vals), abs=1e-12)


def test_window_mapping():
    out = window_to_uint16(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]), level=0.5, width=1.0)
    assert out.tolist() == [0, 0, 32768, 65535, 65535]


def test_export_slices(tmp_path, rng):
    paths = export_slices(vol(np.full((4, 5, 6), 0.25)), "z", [0, 5], (0.5, 1.0), tmp_path)
    assert [p.name for p in paths] == ["slice_z0000.pgm", "slice_z0005.pgm"]
    img = read_pgm16(paths[0])
    assert img.shape == (5, 4) and np.all(img == window_to_uint16(np.array([0.25]), 0.5, 1.0)[0])
    data = rng.random((6, 6, 6))
    img = read_pgm16(export_slices(vol(data), "x", [2], (0.5, 1.0), tmp_path)[0])
    order = np.argsort(data[2].T, axis=None, kind="stable")
    assert np.all(np.diff(img.reshape(-1)[order].astype(int)) >= 0)
    with pytest.raises(IndexOutOfRange):
        export_slices(vol(data), "y", [6], (0.5, 1.0), tmp_path)
