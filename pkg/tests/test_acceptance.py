"""Acceptance criteria 1-10, one test each; verdicts are printed in the terminal summary."""

import copy
import csv
import itertools
import time

import numpy as np
import pytest
import torch
from scipy.optimize import linear_sum_assignment

from sparsebeam.baselines import fdk_reconstruct, sart_reconstruct
from sparsebeam.dice import (
    DiCEModel,
    ModelConfig,
    backproject_features,
    encode_projections,
    ema_update_codebook,
    features_from_views,
    query_points,
    reconstruct_volume,
    vector_quantize,
    views_tensor,
)
from sparsebeam.geometry import (
    ScanGeometry,
    ViewAngleSet,
    detector_frame,
    matching_cost,
    select_aux_angles,
    uniform_half_scan_angles,
)
from sparsebeam.metrics import psnr
from sparsebeam.nn_core import (
    convolution,
    finite_difference_check,
    grid_sample,
    group_normalize,
    linear_map,
    max_reduce_over_set,
    relu,
)
from sparsebeam.projector import backproject, forward_project
from sparsebeam.study import StudyConfig, evaluation_views, run_mini_study
from sparsebeam.training import DatasetManifest, load_model, new_model
from sparsebeam.volumes import (
    Ellipsoid,
    EllipsoidPhantomSpec,
    ProjectionSet,
    Volume,
    generate_phantom,
    normalize_projections,
    random_phantom_spec,
)


def sphere_geometry():
    return ScanGeometry.centered(det_cols=96, det_rows=96, det_spacing=1.6, vol_shape=(64, 64, 64),
                                 voxel_spacing=1.0)


# ---------------------------------------------------------------- 1. projector oracle

def test_c01_projector_matches_analytic_integrals(record):
    g = sphere_geometry()
    radius, mu = 25.0, 0.8
    spec = EllipsoidPhantomSpec((Ellipsoid((0, 0, 0), (radius,) * 3, 0, mu),))
    vol = generate_phantom(spec, g, supersample=4)
    angles = tuple(np.arange(16) * 22.5)
    start = time.perf_counter()
    proj = forward_project(vol, g, angles, step_frac=0.25)
    seconds = time.perf_counter() - start

    offsets = (np.arange(96) - 47.5) * 1.6
    errs, impact = [], []
    for n, a in enumerate(angles):
        src, center, u, v, _ = detector_frame(g, a)
        pix = center + offsets[None, :, None] * u + offsets[:, None, None] * v
        d = pix - src
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        b = np.linalg.norm(np.cross(-src, d), axis=-1)  # ray distance from the sphere center
        chord = mu * 2.0 * np.sqrt(np.clip(radius ** 2 - b ** 2, 0.0, None))
        hit = chord > 0
        errs.append(np.abs(proj.views[n][hit] - chord[hit]) / chord[hit])
        impact.append(b[hit] / radius)
    errs, impact = np.concatenate(errs), np.concatenate(impact)
    # near the rim the voxelized sphere itself departs from the analytic chord
    inner = errs[impact <= 0.75].max()
    ok = record(1, inner <= 0.01 and seconds <= 60.0,
                f"max rel err {inner:.4%} on rays with impact <= 0.75 R (all rays: {errs.max():.1%}), "
                f"{seconds:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2. adjoint

def test_c02_adjoint_identity(record):
    g = ScanGeometry.centered(det_cols=48, det_rows=48, det_spacing=2.0, vol_shape=(32, 32, 32),
                              voxel_spacing=2.0)
    angles = tuple(np.arange(8) * 45.0)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        x = rng.random(g.vol_shape)
        y = rng.random((8, 48, 48))
        ax = forward_project(Volume.like(g, x), g, angles).views.astype(np.float64)
        aty = backproject(ProjectionSet(y.astype(np.float32), angles, g)).data.astype(np.float64)
        yy = y.astype(np.float32).astype(np.float64)
        xx = x.astype(np.float32).astype(np.float64)
        worst = max(worst, abs(np.vdot(ax, yy) - np.vdot(xx, aty)) / (np.linalg.norm(ax) * np.linalg.norm(yy)))
    assert record(2, worst <= 1e-4, f"worst normalized dot-product gap {worst:.2e} over 20 pairs")


# ---------------------------------------------------------------- 3. gradients

def _grad_errors(fn, inputs32, max_coords=40):
    """(64-bit error, 32-bit error); the 32-bit gradient is judged against 64-bit differences."""
    inputs64 = [x.double() for x in inputs32]
    e64 = finite_difference_check(fn, inputs64, eps=1e-6, max_coords=max_coords)
    leaves = [x.clone().requires_grad_(True) for x in inputs32]
    out = fn(*leaves)
    weights = torch.randn(out.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    grads = torch.autograd.grad((out.double() * weights).sum(), leaves)
    e32 = finite_difference_check(fn, inputs64, eps=1e-6, max_coords=max_coords, grads=grads)
    return e64, e32


def test_c03_gradient_suite(record):
    start = time.perf_counter()
    gen = torch.Generator().manual_seed(3)
    r = lambda *s: torch.randn(*s, generator=gen)
    coords2 = torch.rand(2, 20, 2, generator=gen, dtype=torch.float64) * 7 - 1
    coords3 = torch.rand(2, 20, 3, generator=gen, dtype=torch.float64) * 6 - 1
    kinked = r(40)
    kinked = kinked + 0.1 * torch.sign(kinked)
    cases = {
        "conv2d": (lambda x, w, b: convolution(x, w, b, 2, 1, 1), [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        "conv2d/stride2": (lambda x, w, b: convolution(x, w, b, 2, 2, 1), [r(2, 3, 6, 6), r(4, 3, 3, 3), r(4)]),
        "conv3d": (lambda x, w, b: convolution(x, w, b, 3, 1, 1), [r(1, 2, 4, 4, 4), r(3, 2, 3, 3, 3), r(3)]),
        "linear": (linear_map, [r(5, 6), r(4, 6), r(4)]),
        "relu": (relu, [kinked]),
        "group_norm": (lambda x, a, b: group_normalize(x, 2, a, b), [r(2, 4, 3, 3) * 2, r(4), r(4)]),
        "grid_sample2d": (lambda f: grid_sample(f, coords2), [r(2, 3, 6, 6)]),
        "grid_sample3d": (lambda f: grid_sample(f, coords3), [r(2, 3, 5, 5, 5)]),
        "max_reduce": (lambda a: max_reduce_over_set(a), [r(4, 10)]),
    }
    errors = {name: _grad_errors(fn, ins) for name, (fn, ins) in cases.items()}

    g = ScanGeometry.centered(det_cols=8, det_rows=8, det_spacing=8.0, vol_shape=(8, 8, 8), voxel_spacing=4.0)
    cfg = ModelConfig(scales=2, resolution=4, enc_widths=(2, 2), dec_width=2, codebook_size=4, embed_dim=2,
                      point_hidden=(4,), quantize=False)
    torch.manual_seed(0)
    micro = DiCEModel(cfg)
    pts = np.random.default_rng(2).uniform(-10, 10, (6, 3))

    def end_to_end(model):
        def fn(v):
            feats, vol = features_from_views(model, v, [0.0, 90.0], g)
            return query_points(pts, feats, vol, g, [0.0, 90.0], model)
        return fn

    views = torch.rand(2, 8, 8, generator=gen)
    e64 = finite_difference_check(end_to_end(micro.double()), [views.double()], eps=1e-6, max_coords=30)
    micro32 = copy.deepcopy(micro).float()
    leaf = views.clone().requires_grad_(True)
    out = end_to_end(micro32)(leaf)
    w = torch.randn(out.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    (out.double() * w).sum().backward()
    e32 = finite_difference_check(end_to_end(micro), [views.double()], eps=1e-6, max_coords=30, grads=[leaf.grad])
    errors["end_to_end"] = (e64, e32)
    seconds = time.perf_counter() - start

    worst64 = max(e[0] for e in errors.values())
    worst32 = max(e[1] for e in errors.values())
    ok = record(3, worst64 <= 1e-5 and worst32 <= 1e-3 and seconds <= 120.0,
                f"{len(errors)} checks, worst 64-bit {worst64:.1e}, worst 32-bit {worst32:.1e}, {seconds:.1f} s")
    assert ok, errors


# ---------------------------------------------------------------- 4. view matching

def _assignment_cost(a, b):
    cost = np.abs(np.asarray(a)[:, None] - np.asarray(b)[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def test_c04_matching_against_brute_force(record):
    rng = np.random.default_rng(4)
    subset_ok = 0
    while subset_ok < 100:
        n_max = int(rng.integers(2, 9))
        n = int(rng.integers(1, n_max + 1))
        dense = rng.choice(180, size=n_max, replace=False).astype(float)
        sparse = rng.choice(180, size=n, replace=False).astype(float)
        pool = [x for x in dense if x not in sparse]
        k = n_max - n
        if len(pool) < k:
            continue
        got = select_aux_angles(ViewAngleSet.of(sparse), ViewAngleSet.of(dense), n, limit=10 ** 9)
        costs = {combo: _assignment_cost(np.concatenate([sparse, combo]), dense)
                 for combo in itertools.combinations(pool, k)}
        best = min(costs.values())
        chosen = tuple(sorted(got.aux))
        if got.approximate or abs(got.cost - best) > 1e-9 or \
                abs(costs[tuple(x for x in pool if x in chosen)] - best) > 1e-9:
            break
        subset_ok += 1

    cost_ok = 0
    for _ in range(200):
        m = int(rng.integers(1, 8))
        a, b = rng.uniform(0, 360, m), rng.uniform(0, 360, m)
        perms = np.array(list(itertools.permutations(range(m))))
        brute = np.abs(a[perms] - b[None, :]).sum(axis=1).min()
        cost_ok += abs(matching_cost(a, b) - brute) <= 1e-9
    ok = record(4, subset_ok == 100 and cost_ok == 200,
                f"aux selection {subset_ok}/100 optimal, matching cost {cost_ok}/200 exact")
    assert ok


# ---------------------------------------------------------------- 5. view-order symmetry

def test_c05_view_permutation_symmetry(record):
    g = ScanGeometry.centered(det_cols=32, det_rows=32, det_spacing=3.0, vol_shape=(24, 24, 24),
                              voxel_spacing=2.5)
    rng = np.random.default_rng(5)
    vol = generate_phantom(random_phantom_spec(rng, g), g)
    angles = tuple(uniform_half_scan_angles(6).angles)
    raw = forward_project(vol, g, angles, mu_scale=0.02)
    proj = normalize_projections(raw, float(raw.views.max()))
    torch.manual_seed(5)
    model = DiCEModel(ModelConfig.mini())
    model.norm_max = float(raw.views.max())
    model.add_denoise()
    with torch.no_grad():
        for layer in model.denoise:
            layer.conv2.weight.normal_(0.0, 0.05)
    worst = 0.0
    for trial in range(10):
        model.stage, model.n_views = ("step2", 6) if trial % 2 else ("step1", None)
        ref = reconstruct_volume(proj, model).data
        perm = rng.permutation(6)
        out = reconstruct_volume(proj.subset(list(perm)), model).data
        worst = max(worst, float(np.abs(out - ref).max()))
    assert record(5, worst <= 1e-5, f"max |change| {worst:.1e} over 10 permutations")


# ---------------------------------------------------------------- mini-study runs

@pytest.fixture(scope="module")
def study(tmp_path_factory):
    return run_mini_study(tmp_path_factory.mktemp("study_a"), StudyConfig())


@pytest.fixture(scope="module")
def study_again(tmp_path_factory):
    return run_mini_study(tmp_path_factory.mktemp("study_b"), StudyConfig())


# ---------------------------------------------------------------- 6. codebook invariants

@pytest.mark.slow
def test_c06_vector_quantization_invariants(study, record):
    out = study.out_dir
    step1, step2 = load_model(out / "step1.ckpt"), load_model(out / "step2.ckpt")
    man = DatasetManifest.load(out / "data" / "manifest.json")
    sample = man.load_split("val")[0]
    proj = evaluation_views(sample.candidates, StudyConfig().m)
    rows_ok = True
    pre_features = []
    with torch.no_grad():
        feats = encode_projections(views_tensor(proj, step2), step2)
        grids = backproject_features(feats, proj.geom, proj.angles, step2.config.resolution)
        for grid, book in zip(grids, step2.codebooks):
            _, idx, pre, codes = vector_quantize(grid, book)
            rows_ok &= bool(torch.equal(codes, book.embedding[idx]))
            pre_features.append((book, pre, idx))

    gamma, worst = 0.99, 0.0
    for book, pre, idx in pre_features:
        b64 = copy.deepcopy(book).double()
        before = float(b64.ema_count.sum())
        ema_update_codebook(b64, pre.double(), idx, gamma, 1e-5)
        worst = max(worst, abs(float(b64.ema_count.sum()) - (gamma * before + (1 - gamma) * len(idx))))

    frozen = all(torch.equal(a, b) for name, a in step1.tensors().items()
                 if name.startswith("codebooks.") for b in [step2.tensors()[name]])
    ok = record(6, rows_ok and worst <= 1e-6 and frozen,
                f"rows exact: {rows_ok}, count conservation gap {worst:.1e}, codebooks frozen in step 2: {frozen}")
    assert ok


# ---------------------------------------------------------------- 7. baselines

def test_c07_baseline_sanity(record):
    g = sphere_geometry()
    spec = EllipsoidPhantomSpec((Ellipsoid((0, 0, 0), (25.0,) * 3, 0, 0.8),))
    vol = generate_phantom(spec, g, supersample=2)
    full = forward_project(vol, g, tuple(np.arange(360) * 1.0), step_frac=0.25)
    fdk_db = psnr(fdk_reconstruct(full, short_scan=False), vol)

    small = ScanGeometry.centered(det_cols=48, det_rows=48, det_spacing=2.0, vol_shape=(32, 32, 32),
                                  voxel_spacing=2.0)
    svol = generate_phantom(spec, small, supersample=2)
    proj = forward_project(svol, small, tuple(uniform_half_scan_angles(16).angles))
    residuals = [float(np.linalg.norm(proj.views))]

    def track(sweep, x):
        ax = forward_project(Volume.like(small, x), small, proj.angles).views
        residuals.append(float(np.linalg.norm(proj.views - ax)))

    sart_reconstruct(proj, iterations=5, callback=track)
    decreasing = all(a > b for a, b in zip(residuals, residuals[1:]))
    ok = record(7, fdk_db >= 28.0 and decreasing,
                f"FDK 360-view PSNR {fdk_db:.2f} dB, SART residuals "
                + " > ".join(f"{r:.3g}" for r in residuals))
    assert ok


# ---------------------------------------------------------------- 8. trend study

@pytest.mark.slow
def test_c08_mini_study_trend(study, record):
    s = study.summary()
    gain = s["dice_psnr_db"] - s["fdk_psnr_db"]
    vs_scratch = s["dice_psnr_db"] - s["scratch_psnr_db"]
    ok = record(8, gain >= 3.0 and vs_scratch >= -0.1 and study.seconds <= 7200,
                f"DiCE {s['dice_psnr_db']:.2f} dB, FDK {s['fdk_psnr_db']:.2f} dB (gain {gain:+.2f}), "
                f"scratch {s['scratch_psnr_db']:.2f} dB (diff {vs_scratch:+.2f}), {study.seconds / 60:.1f} min")
    assert ok, s


# ---------------------------------------------------------------- 9. freeze table

def _changed(a, b):
    ta, tb = a.tensors(), b.tensors()
    return {k for k in tb if k not in ta or not torch.equal(ta[k], tb[k])}


def _trainable(model, stage):
    from sparsebeam.training import FREEZE_TABLE

    prefixes = model.part_prefixes()
    want = tuple(p for part, flag in FREEZE_TABLE[stage].items() if flag for p in prefixes[part])
    return {k for k in model.tensors() if k.startswith(want)}


@pytest.mark.slow
def test_c09_freeze_table_conformance(study, record):
    cfg = StudyConfig()
    out = study.out_dir
    man = DatasetManifest.load(out / "data" / "manifest.json")
    init = new_model(cfg.model, cfg.seed, man.norm_max)
    pre, step1, step2 = (load_model(out / f"{n}.ckpt") for n in ("pretrained", "step1", "step2"))
    # denoise layers are created at the start of step 2 from the stage seed
    start2 = load_model(out / "step1.ckpt")
    torch.manual_seed(cfg.stage("step2", 2).seed)
    start2.add_denoise()
    results = {"pretrain": _changed(init, pre) == _trainable(pre, "pretrain"),
               "step1": _changed(pre, step1) == _trainable(step1, "step1"),
               "step2": _changed(start2, step2) == _trainable(step2, "step2")}
    ok = record(9, all(results.values()),
                ", ".join(f"{k}: {'exact' if v else 'MISMATCH'}" for k, v in results.items()))
    assert ok


# ---------------------------------------------------------------- 10. determinism

def _metrics_without_clock(path):
    with open(path) as f:
        return [row[:-1] for row in csv.reader(f)]


@pytest.mark.slow
def test_c10_serial_runs_are_bitwise_identical(study, study_again, record):
    a, b = study.out_dir, study_again.out_dir
    names = ["pretrained.ckpt", "step1.ckpt", "step2.ckpt", "scratch.ckpt", "eval.csv"]
    same = {n: (a / n).read_bytes() == (b / n).read_bytes() for n in names}
    for p in sorted(a.glob("metrics_*.csv")):
        same[p.name] = _metrics_without_clock(p) == _metrics_without_clock(b / p.name)
    data = sorted(p.name for p in (a / "data").iterdir())
    same["data/"] = all((a / "data" / n).read_bytes() == (b / "data" / n).read_bytes()
                        for n in data)
    ok = record(10, all(same.values()),
                f"{sum(same.values())}/{len(same)} artifacts identical"
                + ("" if all(same.values()) else f" (differ: {[k for k, v in same.items() if not v]})"))
    assert ok
