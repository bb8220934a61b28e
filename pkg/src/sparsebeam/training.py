"""Hybrid view-sampling pretraining and the two finetuning stages."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import map_coordinates

from .dice import (
    DiCEModel,
    ModelConfig,
    backproject_features,
    decode_3d,
    denoise_features,
    ema_update_codebook,
    seed_codebook,
    encode_projections,
    quantize_all,
    query_points,
)
from .errors import Infeasible, InvalidConfig, ShapeMismatch, StageMismatch
from .geometry import (
    ScanGeometry,
    ViewAngleSet,
    ViewPlan,
    select_aux_angles,
    snap_to_candidates,
    uniform_half_scan_angles,
)
from .nn_core import ParameterStore, adamw_step, read_checkpoint, write_checkpoint
from .projector import apply_noise, forward_project
from .volumes import (
    ProjectionSet,
    Volume,
    generate_phantom,
    normalize_projections,
    random_phantom_spec,
    read_json,
    read_projections,
    read_volume,
    write_json,
    write_projections,
    write_volume,
)

PARTS = ("encoder", "codebooks", "decoder3d", "point_decoder", "denoise")

# Trainable flags per stage; None marks a part that does not exist yet.
FREEZE_TABLE = {
    "pretrain": {"encoder": True, "codebooks": True, "decoder3d": True, "point_decoder": True,
                 "denoise": None},
    "step1": {"encoder": True, "codebooks": True, "decoder3d": True, "point_decoder": True,
              "denoise": None},
    "step2": {"encoder": False, "codebooks": False, "decoder3d": True, "point_decoder": True,
              "denoise": True},
}
STAGE_TAGS = {"pretrain": "pretrained", "step1": "step1", "step2": "step2"}


@dataclass
class TrainStageConfig:
    """Hyper-parameters of one training stage.

    ``n2d`` is the 2D-path view count (``"random"`` draws from
    ``[n_min, n_max]``) and ``n3d`` the 3D-path count.
    """

    stage: str
    n2d: int | str
    n3d: int
    n_min: int = 6
    n_max: int = 24
    lambda1: float = 0.1
    lambda2: float = 1.0
    n_points: int = 4096
    epochs: int = 1
    batch_size: int = 1
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    task_reduction: str = "mean"
    sparse_sampling: str = "uniform"
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    trainable: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in FREEZE_TABLE:
            raise InvalidConfig(f"unknown stage {self.stage!r}")
        if not self.trainable:
            self.trainable = dict(FREEZE_TABLE[self.stage])
        if self.trainable != FREEZE_TABLE[self.stage]:
            raise InvalidConfig(f"{self.stage} requires trainable flags {FREEZE_TABLE[self.stage]}")
        if not (1 <= self.n_min <= self.n_max):
            raise InvalidConfig("need 1 <= n_min <= n_max")
        if self.stage == "pretrain":
            if self.n2d != "random" or self.n3d != self.n_max:
                raise InvalidConfig("pretraining samples (random, N_max) views")
        else:
            if not isinstance(self.n2d, int) or isinstance(self.n2d, bool):
                raise InvalidConfig(f"{self.stage} needs a fixed view count M")
            if not (1 <= self.n2d <= self.n_max):
                raise InvalidConfig("M must lie in [1, N_max]")
            want = self.n_max if self.stage == "step1" else self.n2d
            if self.n3d != want:
                raise InvalidConfig(f"{self.stage} samples (M, {'N_max' if want == self.n_max else 'M'}) views")
        if self.task_reduction not in ("mean", "sum"):
            raise InvalidConfig("task_reduction must be 'mean' or 'sum'")
        if self.sparse_sampling not in ("uniform", "random"):
            raise InvalidConfig("sparse_sampling must be 'uniform' or 'random'")
        if self.n_points < 1 or self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidConfig("n_points, batch_size >= 1; epochs >= 0; lr > 0")

    @classmethod
    def for_stage(cls, stage: str, m: int | None = None, n_max: int = 24, **kw) -> "TrainStageConfig":
        if stage == "pretrain":
            return cls(stage, "random", n_max, n_max=n_max, **kw)
        if m is None:
            raise InvalidConfig(f"{stage} needs M")
        return cls(stage, m, n_max if stage == "step1" else m, n_max=n_max, **kw)

    @classmethod
    def full_scale(cls, stage: str, m: int | None = None, **kw) -> "TrainStageConfig":
        sched = dict(epochs=1000, batch_size=16) if stage == "pretrain" else dict(epochs=200, batch_size=2)
        sched.update(kw)
        return cls.for_stage(stage, m, n_max=24, n_min=6, **sched)

    def iterations(self, n_train: int) -> int:
        return self.epochs * math.ceil(n_train / self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainStageConfig":
        return cls(**d)


# ------------------------------------------------------------------ dataset

@dataclass
class Sample:
    sample_id: str
    volume: Volume
    candidates: ProjectionSet  # normalized


@dataclass
class DatasetManifest:
    """Samples of one dataset; paths are relative to the manifest's directory."""

    geometry: ScanGeometry
    norm_max: float
    samples: list[dict]
    root: Path = Path(".")

    def __post_init__(self):
        for s in self.samples:
            missing = {"id", "volume", "projections", "split"} - set(s)
            if missing:
                raise InvalidConfig(f"sample entry lacks {sorted(missing)}")
            if s["split"] not in ("train", "val", "test"):
                raise InvalidConfig(f"bad split {s['split']!r}")
        if not self.norm_max > 0:
            raise InvalidConfig("norm_max must be positive")

    def to_dict(self) -> dict:
        return {"version": 1, "geometry": self.geometry.to_dict(), "norm_max": self.norm_max,
                "samples": self.samples}

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = read_json(path)
        return cls(ScanGeometry.from_dict(d["geometry"]), float(d["norm_max"]), list(d["samples"]),
                   Path(path).resolve().parent)

    def entries(self, split: str) -> list[dict]:
        return [s for s in self.samples if s["split"] == split]

    def load_split(self, split: str) -> list[Sample]:
        out = []
        for s in self.entries(split):
            vol = read_volume(self.root / s["volume"])
            proj = read_projections(self.root / s["projections"])
            if proj.geom != self.geometry:
                raise ShapeMismatch(f"sample {s['id']} uses a different geometry")
            if vol.shape != self.geometry.vol_shape:
                raise ShapeMismatch(f"sample {s['id']} volume shape {vol.shape}")
            out.append(Sample(s["id"], vol, normalize_projections(proj, self.norm_max)))
        return out


def synthesize_dataset(out_dir, geom: ScanGeometry, n_train: int, n_val: int, seed: int = 0,
                       n_candidates: int = 200, i0: float = 1e5, sigma: float = 10.0,
                       mu_scale: float = 0.02, supersample: int = 2, n_test: int = 0,
                       step_frac: float = 0.5) -> DatasetManifest:
    """Random ellipsoid phantoms with noisy candidate projections, written under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    angles = uniform_half_scan_angles(n_candidates).angles
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    samples, peak = [], 0.0
    for k, split in enumerate(splits):
        rng = np.random.default_rng([seed, k])
        spec = random_phantom_spec(rng, geom)
        vol = generate_phantom(spec, geom, supersample=supersample)
        clean = forward_project(vol, geom, angles, step_frac=step_frac, mu_scale=mu_scale)
        noisy = apply_noise(clean, i0=i0, sigma=sigma, seed=seed * 100003 + k)
        sid = f"{split}{k:03d}"
        write_volume(out / f"{sid}_vol", vol)
        write_projections(out / f"{sid}_proj", noisy)
        write_json(out / f"{sid}_phantom.json", spec.to_dict())
        if split == "train":
            peak = max(peak, float(np.max(noisy.views)))
        samples.append({"id": sid, "volume": f"{sid}_vol", "projections": f"{sid}_proj",
                        "split": split, "norm_window": [0.0, None]})
    for s in samples:
        s["norm_window"] = [0.0, peak]
    manifest = DatasetManifest(geom, peak, samples, out.resolve())
    manifest.save(out / "manifest.json")
    return manifest


# ------------------------------------------------------------------ sampling

def sample_view_plan(rng: np.random.Generator, cfg: TrainStageConfig,
                     candidates: ViewAngleSet) -> ViewPlan:
    n_max = cfg.n_max
    if len(candidates) < n_max:
        raise Infeasible(f"{len(candidates)} candidates cannot supply {n_max} views")
    n = int(rng.integers(cfg.n_min, n_max + 1)) if cfg.n2d == "random" else int(cfg.n2d)
    if cfg.sparse_sampling == "random":
        idx = np.sort(rng.choice(len(candidates), size=n, replace=False))
        sparse = [candidates[int(i)] for i in idx]
    else:
        offset = float(rng.uniform(0.0, 180.0 / n))
        sparse = snap_to_candidates(uniform_half_scan_angles(n, offset), candidates)
    dense = snap_to_candidates(uniform_half_scan_angles(n_max), candidates)
    if len(set(sparse)) != n or len(set(dense)) != n_max:
        raise Infeasible("candidate grid too coarse for the requested view counts")
    sparse_set, dense_set = ViewAngleSet.of(sparse), ViewAngleSet.of(dense)
    aux = select_aux_angles(sparse_set, dense_set, n)
    plan = ViewPlan(sparse_set, aux.aux, dense_set, approximate=aux.approximate)
    plan.check(cfg.n_min if cfg.n2d == "random" else None)
    return plan


def sample_points(rng: np.random.Generator, vol: Volume, n_points: int):
    """Uniform points in the volume's bounding box and trilinearly interpolated ground truth."""
    if n_points < 1:
        raise InvalidConfig("need at least one point")
    sp = vol.voxel_spacing
    lo = np.asarray(vol.origin) - 0.5 * sp
    hi = lo + np.asarray(vol.shape) * sp
    pts = rng.uniform(lo, hi, size=(n_points, 3))
    idx = (pts - np.asarray(vol.origin)) / sp
    gt = map_coordinates(np.asarray(vol.data, dtype=np.float64), idx.T, order=1, mode="nearest")
    return pts, gt


# ------------------------------------------------------------------ losses

def compute_losses(pred: torch.Tensor, gt: torch.Tensor, vq_pairs=(), denoise_pairs=(),
                   cfg: TrainStageConfig | None = None):
    """Total stage loss and its parts.

    ``vq_pairs`` holds ``(pre_features, codes)`` per scale and
    ``denoise_pairs`` ``(sparse_grid, dense_grid)``; the second member of each
    pair is treated as a constant.
    """
    reduction = cfg.task_reduction if cfg is not None else "mean"
    stage = cfg.stage if cfg is not None else "pretrain"
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs ground truth {tuple(gt.shape)}")
    sq = (pred - gt) ** 2
    task = sq.mean() if reduction == "mean" else sq.sum()
    zero = pred.new_zeros(())
    vq = zero
    for a, b in vq_pairs:
        if a.shape != b.shape:
            raise ShapeMismatch("vq pair shapes differ")
        vq = vq + ((a - b.detach()) ** 2).mean()
    den = zero
    for a, b in denoise_pairs:
        if a.shape != b.shape:
            raise ShapeMismatch("denoise pair shapes differ")
        den = den + (a - b.detach()).abs().mean()
    if stage == "step2":
        lam2 = cfg.lambda2 if cfg is not None else 1.0
        return task + lam2 * den, {"L_task": task, "L_denoise": den}
    lam1 = cfg.lambda1 if cfg is not None else 0.1
    return task + lam1 * vq, {"L_task": task, "L_vq": vq}


# ------------------------------------------------------------------ stage loops

def _views(sample: Sample, angles: Sequence[float], dtype) -> torch.Tensor:
    return torch.tensor(np.array(sample.candidates.select_angles(angles).views), dtype=dtype)


def stage_forward(model: DiCEModel, sample: Sample, plan: ViewPlan, pts, gt, cfg: TrainStageConfig):
    """Loss of one sample under one view plan; returns ``(total, parts, ema_batches)``."""
    geom = sample.candidates.geom
    r = model.config.resolution
    gt_t = torch.as_tensor(gt, dtype=model.dtype)
    union = plan.union
    n = plan.n
    if cfg.stage in ("pretrain", "step1"):
        feats = encode_projections(_views(sample, union, model.dtype), model)
        grids = backproject_features(feats, geom, union, r)
        quantized, idx, pre, codes = quantize_all(grids, model)
        vol_feats = decode_3d(quantized, model)
        pred = query_points(pts, [f[:n] for f in feats], vol_feats, geom, union[:n], model)
        pairs = list(zip(pre, codes)) if model.config.quantize else []
        total, parts = compute_losses(pred, gt_t, vq_pairs=pairs, cfg=cfg)
        ema = [(b, e, i) for b, e, i in zip(model.codebooks, pre, idx) if i is not None]
        return total, parts, ema

    sparse = union[:n]
    feats = encode_projections(_views(sample, sparse, model.dtype), model)
    grids = backproject_features(feats, geom, sparse, r)
    quantized = quantize_all(grids, model)[0]
    refined = [denoise_features(g, layer) for g, layer in zip(quantized, model.denoise)]
    vol_feats = decode_3d(refined, model)
    with torch.no_grad():
        dense_feats = encode_projections(_views(sample, union, model.dtype), model)
        dense_q = quantize_all(backproject_features(dense_feats, geom, union, r), model)[0]
    pred = query_points(pts, feats, vol_feats, geom, sparse, model)
    total, parts = compute_losses(pred, gt_t, denoise_pairs=list(zip(refined, dense_q)), cfg=cfg)
    return total, parts, []


def configure_trainable(model: DiCEModel, cfg: TrainStageConfig) -> ParameterStore:
    if cfg.trainable["denoise"] is not None:
        model.add_denoise()
    store = ParameterStore.from_module(model)
    prefixes = model.part_prefixes()
    for part, flag in cfg.trainable.items():
        if flag is not None:
            store.set_trainable(prefixes[part], bool(flag))
    return store


def _check_stage(model: DiCEModel, cfg: TrainStageConfig) -> None:
    allowed = {"pretrain": ("init",), "step1": ("init", "pretrained", "step1"),
               "step2": ("step1", "step2")}[cfg.stage]
    if model.stage not in allowed:
        raise StageMismatch(f"{cfg.stage} cannot start from a {model.stage!r} model")


def train_stage(model: DiCEModel, train: Sequence[Sample], cfg: TrainStageConfig,
                log_path=None, iterations: int | None = None, callback=None) -> DiCEModel:
    """Run one stage in place.  ``callback(it, parts)`` observes every iteration."""
    _check_stage(model, cfg)
    if not train:
        raise InvalidConfig("no training samples")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    store = configure_trainable(model, cfg)
    candidates = ViewAngleSet.of(sorted(train[0].candidates.angles))
    total_its = cfg.iterations(len(train)) if iterations is None else iterations
    second = "L_denoise" if cfg.stage == "step2" else "L_vq"
    rows = []
    start = time.perf_counter()
    order: list[int] = []
    fresh = model.stage == "init"
    for it in range(1, total_its + 1):
        store.zero_grad()
        batch = []
        while len(batch) < min(cfg.batch_size, len(train)):
            if not order:
                order = list(rng.permutation(len(train)))
            batch.append(order.pop(0))
        sums = {"L_task": 0.0, second: 0.0, "total": 0.0}
        for k in batch:
            sample = train[k]
            plan = sample_view_plan(rng, cfg, candidates)
            pts, gt = sample_points(rng, sample.volume, cfg.n_points)
            total, parts, ema = stage_forward(model, sample, plan, pts, gt, cfg)
            (total / len(batch)).backward()
            if cfg.trainable["codebooks"]:
                for book, pre, idx in ema:
                    if fresh:
                        seed_codebook(book, pre)
                    else:
                        ema_update_codebook(book, pre, idx, cfg.ema_decay, cfg.ema_eps)
                fresh = False
            for key in ("L_task", second):
                sums[key] += float(parts[key].detach()) / len(batch)
            sums["total"] += float(total.detach()) / len(batch)
        adamw_step(store, lr=cfg.lr, weight_decay=cfg.weight_decay)
        rows.append([it, sums["L_task"], sums[second], sums["total"], time.perf_counter() - start])
        if callback is not None:
            callback(it, sums)
    model.stage = STAGE_TAGS[cfg.stage]
    if cfg.stage == "step2":
        model.n_views = int(cfg.n2d)
    if log_path is not None:
        write_metrics(log_path, ["iteration", "L_task", second, "total", "wall_clock_s"], rows)
    return model


def write_metrics(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


@torch.no_grad()
def validation_loss(model: DiCEModel, samples: Sequence[Sample], cfg: TrainStageConfig,
                    seed: int = 1234, repeats: int = 1) -> float:
    """Mean stage loss over ``samples`` with fixed plans and points; no state changes."""
    rng = np.random.default_rng(seed)
    candidates = ViewAngleSet.of(sorted(samples[0].candidates.angles))
    if cfg.stage == "step2" and model.denoise is None:
        raise StageMismatch("step-2 loss needs denoise layers")
    vals = []
    for _ in range(repeats):
        for s in samples:
            plan = sample_view_plan(rng, cfg, candidates)
            pts, gt = sample_points(rng, s.volume, cfg.n_points)
            vals.append(float(stage_forward(model, s, plan, pts, gt, cfg)[0]))
    return float(np.mean(vals))


def new_model(config: ModelConfig, seed: int = 0, norm_max: float | None = None) -> DiCEModel:
    torch.manual_seed(seed)
    model = DiCEModel(config)
    model.norm_max = norm_max
    return model


def pretrain(manifest: DatasetManifest, cfg: TrainStageConfig, model_config: ModelConfig | None = None,
             log_path=None, model: DiCEModel | None = None) -> DiCEModel:
    if cfg.stage != "pretrain":
        raise StageMismatch(f"pretrain called with a {cfg.stage} config")
    model = new_model(model_config or ModelConfig(), cfg.seed, manifest.norm_max) if model is None else model
    model.norm_max = manifest.norm_max
    return train_stage(model, manifest.load_split("train"), cfg, log_path)


def finetune_step1(model: DiCEModel, manifest: DatasetManifest, m: int, cfg: TrainStageConfig,
                   log_path=None) -> DiCEModel:
    if cfg.stage != "step1" or cfg.n2d != m:
        raise StageMismatch("finetune_step1 needs a step1 config with n2d = M")
    model.norm_max = manifest.norm_max
    return train_stage(model, manifest.load_split("train"), cfg, log_path)


def finetune_step2(model: DiCEModel, manifest: DatasetManifest, m: int, cfg: TrainStageConfig,
                   log_path=None) -> DiCEModel:
    if cfg.stage != "step2" or cfg.n2d != m:
        raise StageMismatch("finetune_step2 needs a step2 config with n2d = M")
    model.norm_max = manifest.norm_max
    return train_stage(model, manifest.load_split("train"), cfg, log_path)


# ------------------------------------------------------------------ checkpoints

def save_model(path, model: DiCEModel, extra: dict | None = None) -> None:
    manifest = model.manifest()
    if extra:
        manifest["extra"] = extra
    write_checkpoint(path, model.tensors(), manifest)


def load_model(path) -> DiCEModel:
    arrays, manifest = read_checkpoint(path)
    return DiCEModel.from_tensors(arrays, manifest)
