import numpy as np
import pytest

from sparsebeam.baselines import fdk_reconstruct, filter_rows, parker_weight, sart_reconstruct
from sparsebeam.errors import InsufficientViews, InvalidRelaxation
from sparsebeam.geometry import ScanGeometry
from sparsebeam.metrics import psnr
from sparsebeam.projector import _Grid, forward_array, forward_project
from sparsebeam.volumes import Ellipsoid, EllipsoidPhantomSpec, ProjectionSet, generate_phantom


def sphere_setup(n=32, det=48, views=8, full=False):
    g = ScanGeometry.centered(det_cols=det, det_rows=det, det_spacing=64 / n * 1.6,
                              vol_shape=(n, n, n), voxel_spacing=64 / n)
    spec = EllipsoidPhantomSpec((Ellipsoid((0, 0, 0), (30, 30, 30), 0, 0.8),))
    vol = generate_phantom(spec, g, supersample=2)
    span = 360.0 if full else 180.0
    angles = tuple(np.arange(views) * span / views)
    return g, vol, forward_project(vol, g, angles, step_frac=0.25)


def test_ramp_filter_kills_dc():
    from sparsebeam.baselines import ramp_response

    # a constant over the whole padded period is pure DC
    n_pad = 128
    dc = np.full(n_pad, 5.0)
    out = np.real(np.fft.ifft(np.fft.fft(dc) * ramp_response(n_pad, 1.3)))
    assert np.max(np.abs(out)) <= 1e-6 * 5.0
    # a finite constant row only leaks at its edges: the filtered row integrates to ~0
    row = filter_rows(np.full((1, 64), 5.0), tau=1.0)
    assert abs(row.sum()) < 0.05 * 5.0 * 64


def test_ramp_filter_dc_response_zero():
    from sparsebeam.baselines import ramp_response

    for kind in ("ram-lak", "hann-apodized"):
        assert ramp_response(128, 0.7, kind)[0] == 0.0


def test_parker_complementary_weights_sum_to_one():
    delta = np.radians(10.0)
    rng = np.random.default_rng(0)
    beta = rng.uniform(0, np.pi + 2 * delta, 2000)
    gamma = rng.uniform(-delta, delta, 2000)
    beta2 = beta + np.pi + 2 * gamma
    beta2 = np.where(beta2 > np.pi + 2 * delta, beta2 - 2 * np.pi, beta2)
    ok = (beta2 >= 0) & (beta2 <= np.pi + 2 * delta)
    w = parker_weight(beta[ok], gamma[ok], delta) + parker_weight(beta2[ok], -gamma[ok], delta)
    np.testing.assert_allclose(w, 1.0, atol=1e-6)


def test_fdk_zero_and_errors():
    g, _, proj = sphere_setup(views=4)
    zero = ProjectionSet(np.zeros_like(proj.views), proj.angles, g)
    assert not fdk_reconstruct(zero).data.any()
    with pytest.raises(InsufficientViews):
        fdk_reconstruct(proj.subset([0]))


def test_fdk_psnr_decreases_with_sparsity():
    g, vol, proj = sphere_setup(n=32, det=48, views=360, full=True)
    scores = []
    for step in (1, 4, 12):
        sub = proj.subset(range(0, 360, step))
        scores.append(psnr(fdk_reconstruct(sub, short_scan=False), vol))
    assert scores[0] >= scores[1] >= scores[2]
    assert scores[0] >= 24.0


def test_fdk_short_scan_runs():
    g, vol, proj = sphere_setup(n=32, views=120)
    rec = fdk_reconstruct(proj, short_scan=True, filter="hann-apodized")
    assert psnr(rec, vol) > 20.0


def residual(x, grid, proj):
    return np.linalg.norm(forward_array(x, grid, proj.angles) - proj.line_integrals())


def test_sart_residual_decreases():
    g, vol, proj = sphere_setup(n=32, views=8)
    grid = _Grid.of(None, g, 0.5)
    res = []
    sart_reconstruct(proj, iterations=5, relax=0.5, callback=lambda k, x: res.append(residual(x, grid, proj)))
    assert len(res) == 5 and all(a > b for a, b in zip(res, res[1:]))


def test_sart_fixed_points_and_relaxation():
    g, vol, proj = sphere_setup(n=16, views=4)
    zero = ProjectionSet(np.zeros_like(proj.views), proj.angles, g)
    seen = []
    sart_reconstruct(zero, iterations=3, callback=lambda k, x: seen.append(x.any()))
    assert seen == [False] * 3
    assert not sart_reconstruct(proj, iterations=2, relax=0.0).data.any()
    with pytest.raises(InvalidRelaxation):
        sart_reconstruct(proj, relax=1.5)
    out = sart_reconstruct(proj, iterations=2, relax=1.0)
    assert np.all(np.isfinite(out.data)) and out.data.min() >= 0
