"""Scaled-down trend study: pretrain + two-step finetuning vs FDK vs training from scratch.

Everything runs at 48^3 on synthetic ellipsoid phantoms so a full study fits
on a single CPU core.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .baselines import fdk_reconstruct
from .dice import ModelConfig, reconstruct_volume
from .geometry import ScanGeometry, ViewAngleSet, snap_to_candidates, uniform_half_scan_angles
from .metrics import psnr, ssim3d
from .training import (
    TrainStageConfig,
    new_model,
    save_model,
    synthesize_dataset,
    train_stage,
)

METHODS = ("fdk", "dice", "scratch")


@dataclass
class StudyConfig:
    seed: int = 0
    n_train: int = 40
    n_val: int = 5
    vol_size: int = 48
    voxel_spacing: float = 1.5
    det_size: int = 64
    det_spacing: float = 2.6
    n_candidates: int = 200
    i0: float = 1e5
    sigma: float = 10.0
    mu_scale: float = 0.02
    m: int = 6
    n_min: int = 3
    n_max: int = 8
    iterations: tuple[int, int, int] = (1200, 400, 400)
    lr: float = 1e-3
    n_points: int = 2048
    model: ModelConfig = field(default_factory=ModelConfig.mini)

    def geometry(self) -> ScanGeometry:
        n = self.vol_size
        return ScanGeometry.centered(det_cols=self.det_size, det_rows=self.det_size,
                                     det_spacing=self.det_spacing, vol_shape=(n, n, n),
                                     voxel_spacing=self.voxel_spacing)

    def stage(self, stage: str, seed_offset: int, n_max: int | None = None) -> TrainStageConfig:
        m = None if stage == "pretrain" else self.m
        return TrainStageConfig.for_stage(stage, m, n_max=n_max or self.n_max, n_min=self.n_min,
                                          lr=self.lr, n_points=self.n_points,
                                          seed=self.seed + seed_offset)


@dataclass
class StudyResult:
    rows: list[dict]
    out_dir: Path
    seconds: float

    def mean(self, method: str, key: str = "psnr_db") -> float:
        return float(np.mean([r[key] for r in self.rows if r["method"] == method]))

    def summary(self) -> dict:
        out = {f"{m}_psnr_db": round(self.mean(m), 3) for m in METHODS}
        out.update({f"{m}_ssim": round(self.mean(m, "ssim"), 4) for m in METHODS})
        out["seconds"] = round(self.seconds, 1)
        return out


def _serial() -> None:
    import numba

    torch.set_num_threads(1)
    numba.set_num_threads(1)


def evaluation_views(sample_proj, m: int):
    cand = ViewAngleSet.of(sorted(sample_proj.angles))
    return sample_proj.select_angles(snap_to_candidates(uniform_half_scan_angles(m), cand))


def run_mini_study(out_dir, cfg: StudyConfig | None = None) -> StudyResult:
    """Generate data, train both DiCE variants, evaluate on the validation split.

    Writes ``data/``, ``pretrained.ckpt``, ``step1.ckpt``, ``step2.ckpt``,
    ``scratch.ckpt``, per-stage metrics CSVs and ``eval.csv`` under ``out_dir``.
    """
    cfg = cfg or StudyConfig()
    _serial()
    start = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = synthesize_dataset(out / "data", cfg.geometry(), cfg.n_train, cfg.n_val, seed=cfg.seed,
                             n_candidates=cfg.n_candidates, i0=cfg.i0, sigma=cfg.sigma,
                             mu_scale=cfg.mu_scale)
    train = man.load_split("train")

    model = new_model(cfg.model, cfg.seed, man.norm_max)
    for k, (stage, name) in enumerate((("pretrain", "pretrained"), ("step1", "step1"),
                                       ("step2", "step2"))):
        train_stage(model, train, cfg.stage(stage, k), out / f"metrics_{name}.csv",
                    iterations=cfg.iterations[k])
        save_model(out / f"{name}.ckpt", model)

    # same total budget, trained directly in the (M, M) regime
    scratch = new_model(cfg.model, cfg.seed, man.norm_max)
    train_stage(scratch, train, cfg.stage("step1", 10, n_max=cfg.m), out / "metrics_scratch.csv",
                iterations=sum(cfg.iterations))
    save_model(out / "scratch.ckpt", scratch)

    rows = []
    for s in man.load_split("val"):
        proj = evaluation_views(s.candidates, cfg.m)
        fdk = fdk_reconstruct(proj)
        recs = {"fdk": fdk.with_data(np.clip(fdk.data, 0.0, 1.0)),
                "dice": reconstruct_volume(proj, model),
                "scratch": reconstruct_volume(proj, scratch)}
        for method in METHODS:
            rows.append({"sample_id": s.sample_id, "method": method, "n_views": cfg.m,
                         "psnr_db": psnr(recs[method], s.volume),
                         "ssim": ssim3d(recs[method], s.volume)})
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_id", "method", "n_views", "psnr_db", "ssim"])
        for r in rows:
            w.writerow([r["sample_id"], r["method"], r["n_views"], repr(r["psnr_db"]), repr(r["ssim"])])
    return StudyResult(rows, out, time.perf_counter() - start)
