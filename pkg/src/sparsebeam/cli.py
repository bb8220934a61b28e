"""Command-line interface.  Every subcommand reads and writes files only."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from .errors import SparseBeamError

SEED_ENV = "SPARSEBEAM_SEED"


def _resolve_seed(flag) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    return int(env) if env not in (None, "") else 0


def _set_threads(n) -> None:
    if n is None:
        return
    import numba
    import torch

    torch.set_num_threads(max(1, n))
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _geometry(path):
    from .geometry import ScanGeometry

    return ScanGeometry.from_json(Path(path).read_text())


def _model_config(preset: str, path=None):
    from .dice import ModelConfig
    from .volumes import read_json

    if path:
        return ModelConfig.from_dict(read_json(path))
    return {"desk": ModelConfig.desk, "mini": ModelConfig.mini, "large": ModelConfig.large}[preset]()


# ------------------------------------------------------------------ handlers

def cmd_phantom(a) -> None:
    from .volumes import (EllipsoidPhantomSpec, generate_phantom, random_phantom_spec, read_json,
                          write_json, write_volume)

    geom = _geometry(a.geometry)
    if a.spec:
        spec = EllipsoidPhantomSpec.from_dict(read_json(a.spec))
    else:
        spec = random_phantom_spec(np.random.default_rng(a.seed), geom)
        write_json(Path(a.output).with_suffix(".phantom.json"), spec.to_dict())
    write_volume(a.output, generate_phantom(spec, geom, supersample=a.supersample))


def cmd_project(a) -> None:
    from .geometry import uniform_half_scan_angles
    from .projector import apply_noise, forward_project
    from .volumes import read_volume, write_projections

    geom = _geometry(a.geometry)
    vol = read_volume(a.volume)
    angles = a.angles if a.angles else uniform_half_scan_angles(a.views).angles
    proj = forward_project(vol, geom, angles, step_frac=a.step_frac, mu_scale=a.mu_scale)
    if a.noise:
        proj = apply_noise(proj, i0=a.i0, sigma=a.sigma, seed=a.seed)
    write_projections(a.output, proj)


def _load_views(path, views):
    from .geometry import ViewAngleSet, snap_to_candidates, uniform_half_scan_angles
    from .volumes import read_projections

    proj = read_projections(path)
    if views:
        cand = ViewAngleSet.of(sorted(proj.angles))
        proj = proj.select_angles(snap_to_candidates(uniform_half_scan_angles(views), cand))
    return proj


def cmd_fdk(a) -> None:
    from .baselines import fdk_reconstruct
    from .volumes import write_volume

    proj = _load_views(a.projections, a.views)
    write_volume(a.output, fdk_reconstruct(proj, filter=a.filter, short_scan=not a.full_scan))


def cmd_sart(a) -> None:
    from .baselines import sart_reconstruct
    from .volumes import write_volume

    proj = _load_views(a.projections, a.views)
    write_volume(a.output, sart_reconstruct(proj, iterations=a.iterations, relax=a.relax))


def _stage_config(a, stage, m=None):
    from .training import TrainStageConfig
    from .volumes import read_json

    if a.config:
        cfg = TrainStageConfig.from_dict(read_json(a.config))
        if cfg.stage != stage:
            raise SparseBeamError(f"config is for stage {cfg.stage!r}, not {stage!r}")
        return cfg
    kw = dict(n_min=a.n_min, lr=a.lr, n_points=a.n_points, epochs=a.epochs,
              batch_size=a.batch_size, seed=a.seed, task_reduction=a.task_reduction)
    return TrainStageConfig.for_stage(stage, m, n_max=a.n_max, **kw)


def cmd_pretrain(a) -> None:
    from .training import DatasetManifest, new_model, save_model, train_stage

    man = DatasetManifest.load(a.manifest)
    cfg = _stage_config(a, "pretrain")
    model = new_model(_model_config(a.preset, a.model_config), cfg.seed, man.norm_max)
    train_stage(model, man.load_split("train"), cfg, a.log, iterations=a.iterations)
    save_model(a.output, model, {"train": cfg.to_dict()})


def _finetune(a, stage) -> None:
    from .training import DatasetManifest, load_model, save_model, train_stage

    man = DatasetManifest.load(a.manifest)
    cfg = _stage_config(a, stage, a.views)
    model = load_model(a.checkpoint)
    model.norm_max = man.norm_max
    train_stage(model, man.load_split("train"), cfg, a.log, iterations=a.iterations)
    save_model(a.output, model, {"train": cfg.to_dict()})


def cmd_finetune1(a) -> None:
    _finetune(a, "step1")


def cmd_finetune2(a) -> None:
    _finetune(a, "step2")


def cmd_reconstruct(a) -> None:
    from .dice import reconstruct_volume
    from .training import load_model
    from .volumes import write_volume

    model = load_model(a.checkpoint)
    proj = _load_views(a.projections, a.views)
    shape = tuple(a.shape) if a.shape else None
    write_volume(a.output, reconstruct_volume(proj, model, shape, batch_size=a.batch_size))


def cmd_eval(a) -> None:
    from .metrics import psnr, ssim3d
    from .volumes import read_volume

    rows = []
    for sid, method, n_views, ref, rec in a.pair:
        x, y = read_volume(ref), read_volume(rec)
        rows.append([sid, method, int(n_views), f"{psnr(y, x, a.data_range):.6f}", f"{ssim3d(y, x):.6f}"])
    Path(a.output).parent.mkdir(parents=True, exist_ok=True)
    with open(a.output, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "method", "n_views", "psnr_db", "ssim"])
        w.writerows(rows)


def cmd_export_slices(a) -> None:
    from .metrics import export_slices
    from .volumes import read_volume

    export_slices(read_volume(a.volume), a.axis, a.indices, (a.level, a.width), a.output)


def cmd_make_manifest(a) -> None:
    from .geometry import ScanGeometry
    from .training import DatasetManifest, synthesize_dataset
    from .volumes import read_projections

    if a.sample:
        samples = [{"id": s, "volume": v, "projections": p, "split": sp} for s, v, p, sp in a.sample]
        root = Path(a.output).resolve().parent
        projs = [read_projections(root / s["projections"]) for s in samples]
        geom = projs[0].geom
        train = [p for p, s in zip(projs, samples) if s["split"] == "train"] or projs
        peak = max(float(np.max(p.views)) for p in train)
        for s in samples:
            s["norm_window"] = [0.0, peak]
        DatasetManifest(geom, peak, samples, root).save(a.output)
        return
    geom = _geometry(a.geometry) if a.geometry else ScanGeometry.centered(
        det_cols=64, det_rows=64, det_spacing=2.6, vol_shape=(48, 48, 48), voxel_spacing=1.5)
    out_dir = Path(a.output).resolve().parent
    man = synthesize_dataset(out_dir, geom, a.n_train, a.n_val, seed=a.seed,
                             n_candidates=a.candidates, i0=a.i0, sigma=a.sigma)
    if Path(a.output).resolve() != out_dir / "manifest.json":
        man.save(a.output)


def cmd_mini_study(a) -> None:
    from .study import StudyConfig, run_mini_study

    cfg = StudyConfig(seed=a.seed)
    if a.iterations:
        cfg.iterations = tuple(a.iterations)
    result = run_mini_study(a.output, cfg)
    for key, value in result.summary().items():
        print(f"{key}: {value}")


# ------------------------------------------------------------------ parser

def _train_flags(p, stage) -> None:
    p.add_argument("--config", help="training-stage JSON (overrides the flags below)")
    p.add_argument("--n-min", type=int, default=3)
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-points", type=int, default=2048)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--iterations", type=int, help="override epochs x batches")
    p.add_argument("--task-reduction", choices=("mean", "sum"), default="mean")
    p.add_argument("--log", help="metrics CSV path")
    if stage != "pretrain":
        p.add_argument("--views", type=int, required=True, help="target view count M")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default ${SEED_ENV} or 0)")
    common.add_argument("--threads", type=int, default=None, help="worker threads")

    parser = argparse.ArgumentParser(prog="sparsebeam", description="Sparse-view cone-beam CT toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=fn)
        return p

    p = add("phantom", cmd_phantom, "voxelize an ellipsoid phantom (random if no spec is given)")
    p.add_argument("output")
    p.add_argument("--geometry", required=True)
    p.add_argument("--spec")
    p.add_argument("--supersample", type=int, default=1)

    p = add("project", cmd_project, "simulate projections of a volume")
    p.add_argument("volume")
    p.add_argument("output")
    p.add_argument("--geometry", required=True)
    p.add_argument("--views", type=int, default=200)
    p.add_argument("--angles", type=float, nargs="+")
    p.add_argument("--step-frac", type=float, default=0.5)
    p.add_argument("--mu-scale", type=float, default=0.02)
    p.add_argument("--noise", action="store_true")
    p.add_argument("--i0", type=float, default=1e5)
    p.add_argument("--sigma", type=float, default=10.0)

    p = add("fdk", cmd_fdk, "FDK reconstruction")
    p.add_argument("projections")
    p.add_argument("output")
    p.add_argument("--views", type=int, help="use this many evenly spaced views")
    p.add_argument("--filter", choices=("ram-lak", "hann-apodized"), default="ram-lak")
    p.add_argument("--full-scan", action="store_true")

    p = add("sart", cmd_sart, "SART reconstruction")
    p.add_argument("projections")
    p.add_argument("output")
    p.add_argument("--views", type=int)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--relax", type=float, default=0.5)

    p = add("pretrain", cmd_pretrain, "hybrid view-sampling pretraining")
    p.add_argument("manifest")
    p.add_argument("output")
    p.add_argument("--preset", choices=("desk", "mini", "large"), default="mini")
    p.add_argument("--model-config")
    _train_flags(p, "pretrain")

    for name, fn, stage in (("finetune1", cmd_finetune1, "step1"), ("finetune2", cmd_finetune2, "step2")):
        p = add(name, fn, f"finetuning {stage}")
        p.add_argument("checkpoint")
        p.add_argument("manifest")
        p.add_argument("output")
        _train_flags(p, stage)

    p = add("reconstruct", cmd_reconstruct, "reconstruct a volume with a trained model")
    p.add_argument("checkpoint")
    p.add_argument("projections")
    p.add_argument("output")
    p.add_argument("--views", type=int)
    p.add_argument("--shape", type=int, nargs=3)
    p.add_argument("--batch-size", type=int, default=8192)

    p = add("eval", cmd_eval, "PSNR / SSIM table for (reference, reconstruction) pairs")
    p.add_argument("output")
    p.add_argument("--pair", nargs=5, action="append", required=True,
                   metavar=("SAMPLE_ID", "METHOD", "N_VIEWS", "REFERENCE", "RECONSTRUCTION"))
    p.add_argument("--data-range", type=float, default=1.0)

    p = add("export-slices", cmd_export_slices, "write windowed 16-bit PGM slices")
    p.add_argument("volume")
    p.add_argument("output")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--indices", type=int, nargs="+", required=True)
    p.add_argument("--level", type=float, default=0.5)
    p.add_argument("--width", type=float, default=1.0)

    p = add("make-manifest", cmd_make_manifest, "write a dataset manifest (synthetic unless --sample is given)")
    p.add_argument("output")
    p.add_argument("--sample", nargs=4, action="append", metavar=("ID", "VOLUME", "PROJECTIONS", "SPLIT"))
    p.add_argument("--geometry")
    p.add_argument("--n-train", type=int, default=40)
    p.add_argument("--n-val", type=int, default=5)
    p.add_argument("--candidates", type=int, default=200)
    p.add_argument("--i0", type=float, default=1e5)
    p.add_argument("--sigma", type=float, default=10.0)

    p = add("mini-study", cmd_mini_study, "run the 48^3 trend study")
    p.add_argument("output")
    p.add_argument("--iterations", type=int, nargs=3)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.seed = _resolve_seed(args.seed)
    try:
        _set_threads(args.threads)
        args.func(args)
    except (SparseBeamError, OSError, ValueError, KeyError) as exc:
        print(f"sparsebeam {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
