"""DiCE: multi-scale 2D encoder, feature back-projection, codebooks, 3D decoder, point decoder.

Tensors follow these layouts:

* projections ``(N, H, W)``; 2D features per scale ``(N, C_i, H / 2**i, W / 2**i)``
* voxel feature grids ``(C, r, r, r)`` indexed ``[c, x, y, z]`` over a cubic
  lattice spanning the volume bounding box
* query points ``(P, 3)`` world coordinates in mm
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import InvalidConfig, ShapeMismatch, SizeMismatch, StageMismatch
from .geometry import ScanGeometry, project_points
from .nn_core import (
    convolution,
    grid_sample,
    group_normalize,
    linear_map,
    max_reduce_over_set,
    relu,
)
from .volumes import ProjectionSet, Volume, normalize_projections

STAGES = ("init", "pretrained", "step1", "step2")


@dataclass
class ModelConfig:
    scales: int = 4
    resolution: int = 32
    enc_widths: tuple[int, ...] = (16, 32, 64, 128)
    dec_width: int = 64
    codebook_size: int = 256
    embed_dim: int = 32
    point_hidden: tuple[int, ...] = (128, 128, 64)
    denoise_enabled: bool = False
    quantize: bool = True
    # each decoder block sees the matching 2D-scale grid and the previous block output
    decoder_concat: str = "previous-scale"

    def __post_init__(self):
        self.enc_widths = tuple(int(w) for w in self.enc_widths)
        self.point_hidden = tuple(int(w) for w in self.point_hidden)
        if self.scales < 1 or self.resolution < 2:
            raise InvalidConfig("need scales >= 1 and resolution >= 2")
        if len(self.enc_widths) != self.scales:
            raise InvalidConfig(f"{len(self.enc_widths)} encoder widths for {self.scales} scales")
        if min(self.enc_widths + (self.dec_width, self.codebook_size, self.embed_dim)) < 1:
            raise InvalidConfig("widths must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def mini(cls, **kw) -> "ModelConfig":
        """Small preset used by the 48^3 trend study."""
        base = dict(resolution=16, enc_widths=(8, 16, 16, 32), dec_width=16, codebook_size=64,
                    embed_dim=16, point_hidden=(64, 64, 32))
        base.update(kw)
        return cls(**base)

    @classmethod
    def large(cls, **kw) -> "ModelConfig":
        base = dict(enc_widths=(64, 128, 256, 256), dec_width=128, codebook_size=1024,
                    embed_dim=64, point_hidden=(256, 256, 128))
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_widths"] = list(self.enc_widths)
        d["point_hidden"] = list(self.point_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


class Conv(nn.Module):
    def __init__(self, cin, cout, dims, stride=1, zero_init=False):
        super().__init__()
        shape = (cout, cin) + (3,) * dims
        self.dims, self.stride = dims, stride
        self.weight = nn.Parameter(torch.zeros(shape))
        self.bias = nn.Parameter(torch.zeros(cout))
        if not zero_init:
            nn.init.kaiming_normal_(self.weight, nonlinearity="relu")

    def forward(self, x):
        return convolution(x, self.weight, self.bias, self.dims, self.stride, 1)


class Linear(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin))
        self.bias = nn.Parameter(torch.zeros(cout))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x):
        return linear_map(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.groups = _groups(channels)
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_normalize(x, self.groups, self.gain, self.bias)


class ConvBlock(nn.Module):
    """Two (3^d convolution, group-norm, ReLU) layers."""

    def __init__(self, cin, cout, dims):
        super().__init__()
        self.conv1, self.norm1 = Conv(cin, cout, dims), GroupNorm(cout)
        self.conv2, self.norm2 = Conv(cout, cout, dims), GroupNorm(cout)

    def forward(self, x):
        x = relu(self.norm1(self.conv1(x)))
        return relu(self.norm2(self.conv2(x)))


class Encoder(nn.Module):
    """Shared per-view 2D encoder; downsampling only."""

    def __init__(self, widths):
        super().__init__()
        self.stem = Conv(1, widths[0], 2)
        self.blocks = nn.ModuleList(ConvBlock(w, w, 2) for w in widths)
        self.down = nn.ModuleList(Conv(a, b, 2, stride=2) for a, b in zip(widths, widths[1:]))

    def forward(self, views):
        x = self.stem(views.unsqueeze(1))
        feats = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            feats.append(x)
            if i < len(self.down):
                x = self.down[i](x)
        return feats


class _StraightThrough(torch.autograd.Function):
    """Forward returns the codebook rows exactly; backward treats quantization as identity."""

    @staticmethod
    def forward(ctx, continuous, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class Codebook(nn.Module):
    """``post ∘ quantize ∘ pre`` with an EMA-maintained embedding table."""

    def __init__(self, channels, size, dim):
        super().__init__()
        self.pre = Linear(channels, dim)
        self.post = Linear(dim, channels)
        emb = torch.randn(size, dim)
        self.register_buffer("embedding", emb)
        self.register_buffer("ema_count", torch.ones(size))
        self.register_buffer("ema_sum", emb.clone())

    def nearest(self, e: torch.Tensor, chunk: int = 2048) -> torch.Tensor:
        """Index of the nearest embedding row per vector (lowest index on ties)."""
        emb = self.embedding.to(e.dtype)
        out = []
        for start in range(0, e.shape[0], chunk):
            block = e[start:start + chunk].detach()
            d = ((block[:, None, :] - emb[None, :, :]) ** 2).sum(-1)
            out.append(torch.argmin(d, dim=1))
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)

    def forward(self, x: torch.Tensor, quantize: bool = True):
        """``x`` is ``(M, C)``; returns ``(output, indices, pre_features, quantized_rows)``."""
        e = self.pre(x)
        if not quantize:
            return self.post(e), None, e, e
        idx = self.nearest(e)
        q = self.embedding.to(e.dtype)[idx]
        return self.post(_StraightThrough.apply(e, q)), idx, e, q


class Denoise(nn.Module):
    """Residual 3D refinement, identity at creation (second conv zero-initialized)."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = Conv(channels, channels, 3)
        self.conv2 = Conv(channels, channels, 3, zero_init=True)

    def forward(self, x):
        return x + self.conv2(relu(self.conv1(x)))


class Decoder3D(nn.Module):
    def __init__(self, enc_widths, width):
        super().__init__()
        self.blocks = nn.ModuleList(
            ConvBlock(c if i == 0 else c + width, width, 3) for i, c in enumerate(enc_widths))

    def forward(self, grids):
        h = None
        for i, (g, block) in enumerate(zip(grids, self.blocks)):
            x = g.unsqueeze(0) if h is None else torch.cat([g.unsqueeze(0), h], dim=1)
            h = block(x)
        return h[0]


class PointDecoder(nn.Module):
    def __init__(self, cin, hidden):
        super().__init__()
        dims = (cin,) + tuple(hidden)
        self.layers = nn.ModuleList(Linear(a, b) for a, b in zip(dims, dims[1:]))
        self.out = Linear(dims[-1], 1)

    def forward(self, x):
        for layer in self.layers:
            x = relu(layer(x))
        return self.out(x)[:, 0]


class DiCEModel(nn.Module):
    """All DiCE parameters plus the training-stage tag."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.stage = "init"
        self.n_views: int | None = None
        self.norm_max: float | None = None
        w = config.enc_widths
        self.encoder = Encoder(w)
        self.codebooks = nn.ModuleList(
            Codebook(c, config.codebook_size, config.embed_dim) for c in w)
        self.decoder = Decoder3D(w, config.dec_width)
        self.point_decoder = PointDecoder(sum(w) + config.dec_width, config.point_hidden)
        self.denoise = nn.ModuleList(Denoise(c) for c in w) if config.denoise_enabled else None

    @property
    def dtype(self):
        return self.encoder.stem.weight.dtype

    def add_denoise(self) -> None:
        if self.denoise is None:
            self.denoise = nn.ModuleList(Denoise(c) for c in self.config.enc_widths).to(self.dtype)
            self.config.denoise_enabled = True

    def part_prefixes(self) -> dict[str, tuple[str, ...]]:
        return {"encoder": ("encoder.",), "codebooks": ("codebooks.",),
                "decoder3d": ("decoder.",), "point_decoder": ("point_decoder.",),
                "denoise": ("denoise.",)}

    def tensors(self) -> dict[str, torch.Tensor]:
        """Every parameter and buffer, keyed by qualified name."""
        out = dict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def manifest(self) -> dict:
        return {"config": self.config.to_dict(), "stage": self.stage, "n_views": self.n_views,
                "norm_max": self.norm_max}

    @classmethod
    def from_tensors(cls, arrays: dict, manifest: dict) -> "DiCEModel":
        model = cls(ModelConfig.from_dict(manifest["config"]))
        model.stage = manifest["stage"]
        model.n_views = manifest.get("n_views")
        model.norm_max = manifest.get("norm_max")
        state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
        missing = set(model.tensors()) - set(state)
        if missing:
            raise ShapeMismatch(f"checkpoint lacks {sorted(missing)}")
        model.load_state_dict(state, strict=True)
        return model


# ------------------------------------------------------------------ geometry helpers

def lattice(geom: ScanGeometry, r: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Voxel-center coordinates ``(r, r, r, 3)`` of the feature lattice, its lower corner and cell size.

    The lattice is cubic: it spans the largest bounding-box extent, centered on the box.
    """
    lo, hi = geom.bounding_box()
    extent = float(np.max(hi - lo))
    center = (lo + hi) / 2.0
    low = center - extent / 2.0
    cell = extent / r
    axis = (np.arange(r) + 0.5) * cell
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1) + low
    return grid, low, cell


def _view_coords(geom, angles, points, scale_index) -> np.ndarray:
    """Feature-map coordinates ``(N, P, 2)`` as (row, col) at the given scale."""
    out = np.empty((len(angles), len(points), 2))
    f = 2.0 ** scale_index
    for n, a in enumerate(angles):
        uv = project_points(geom, a, points)
        out[n, :, 0] = uv[:, 1] / f
        out[n, :, 1] = uv[:, 0] / f
    return out


def _as_tensor(x, dtype):
    return torch.tensor(np.array(x), dtype=dtype)


# ------------------------------------------------------------------ operations

def views_tensor(proj: ProjectionSet, model: DiCEModel) -> torch.Tensor:
    if proj.norm_max is None:
        raise ShapeMismatch("projections must be normalized before encoding")
    return _as_tensor(proj.views, model.dtype)


def encode_projections(proj: ProjectionSet | torch.Tensor, model: DiCEModel) -> list[torch.Tensor]:
    views = proj if isinstance(proj, torch.Tensor) else views_tensor(proj, model)
    if views.dim() != 3:
        raise ShapeMismatch("expected (N, H, W) projections")
    f = 2 ** (model.config.scales - 1)
    if views.shape[1] % f or views.shape[2] % f:
        raise ShapeMismatch(f"detector size must be divisible by {f}")
    return model.encoder(views)


def backproject_features(feats: Sequence[torch.Tensor], geom: ScanGeometry,
                         angles: Sequence[float], r: int) -> list[torch.Tensor]:
    """Max-pooled multi-view features at every lattice voxel, one ``(C, r, r, r)`` grid per scale."""
    pts = lattice(geom, r)[0].reshape(-1, 3)
    grids = []
    for i, f in enumerate(feats):
        if f.shape[0] != len(angles):
            raise SizeMismatch(f"{f.shape[0]} feature maps but {len(angles)} angles")
        coords = _as_tensor(_view_coords(geom, angles, pts, i), torch.float64)
        sampled = grid_sample(f, coords)  # (N, r^3, C)
        pooled = max_reduce_over_set(sampled)
        grids.append(pooled.transpose(0, 1).reshape(f.shape[1], r, r, r))
    return grids


def vector_quantize(grid: torch.Tensor, book: Codebook, quantize: bool = True):
    """Quantize one scale's grid; returns ``(quantized_grid, indices, pre_features, codes)``.

    ``pre_features`` and ``codes`` are ``(r^3, d_q)``; ``codes`` holds the
    selected embedding rows exactly.
    """
    c = grid.shape[0]
    if book.pre.weight.shape[1] != c:
        raise ShapeMismatch(f"grid has {c} channels, codebook expects {book.pre.weight.shape[1]}")
    flat = grid.reshape(c, -1).transpose(0, 1)
    out, idx, pre, codes = book(flat, quantize)
    return out.transpose(0, 1).reshape(grid.shape), idx, pre, codes


@torch.no_grad()
def seed_codebook(book: Codebook, pre_features: torch.Tensor) -> Codebook:
    """Replace the rows with randomly chosen feature vectors and reset the EMA state.

    Used on a fresh model before its first EMA step: random Gaussian rows sit
    far from the features and most of them would never be selected.
    """
    K = book.embedding.shape[0]
    e = pre_features.detach().to(book.ema_sum.dtype)
    pick = torch.randperm(len(e))[:K] if len(e) >= K else torch.randint(len(e), (K,))
    book.embedding.copy_(e[pick])
    book.ema_sum.copy_(e[pick])
    book.ema_count.fill_(1.0)
    return book


@torch.no_grad()
def ema_update_codebook(book: Codebook, pre_features: torch.Tensor, assignments: torch.Tensor,
                        decay: float = 0.99, eps: float = 1e-5) -> Codebook:
    """One exponential-moving-average step of counts, sums and embedding rows."""
    K = book.embedding.shape[0]
    e = pre_features.detach().to(book.ema_sum.dtype)
    counts = torch.bincount(assignments, minlength=K).to(book.ema_count.dtype)
    sums = torch.zeros_like(book.ema_sum).index_add_(0, assignments, e)
    book.ema_count.mul_(decay).add_(counts, alpha=1.0 - decay)
    book.ema_sum.mul_(decay).add_(sums, alpha=1.0 - decay)
    total = book.ema_count.sum()
    if total > 0:
        smoothed = (book.ema_count + eps) / (total + K * eps) * total
        book.embedding.copy_(book.ema_sum / smoothed[:, None])
    return book


def denoise_features(grid: torch.Tensor, layer: Denoise) -> torch.Tensor:
    if layer.conv1.weight.shape[1] != grid.shape[0]:
        raise ShapeMismatch("denoise layer channel count does not match the grid")
    return layer(grid.unsqueeze(0))[0]


def decode_3d(grids: Sequence[torch.Tensor], model: DiCEModel, use_denoise: bool = False) -> torch.Tensor:
    cfg = model.config
    if len(grids) != cfg.scales:
        raise ShapeMismatch(f"expected {cfg.scales} grids, got {len(grids)}")
    if use_denoise:
        if model.denoise is None:
            raise StageMismatch("model has no denoise layers")
        grids = [denoise_features(g, layer) for g, layer in zip(grids, model.denoise)]
    return model.decoder(list(grids))


def quantize_all(grids, model: DiCEModel):
    out, idx, pre, codes = [], [], [], []
    for g, book in zip(grids, model.codebooks):
        q, i, e, c = vector_quantize(g, book, model.config.quantize)
        out.append(q)
        idx.append(i)
        pre.append(e)
        codes.append(c)
    return out, idx, pre, codes


def query_points(points, feats: Sequence[torch.Tensor], volume_features: torch.Tensor,
                 geom: ScanGeometry, angles: Sequence[float], model: DiCEModel) -> torch.Tensor:
    """Attenuation predictions ``(P,)`` at world points from pixel- and voxel-aligned features."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    parts = []
    for i, f in enumerate(feats):
        if f.shape[0] != len(angles):
            raise SizeMismatch(f"{f.shape[0]} feature maps but {len(angles)} angles")
        coords = _as_tensor(_view_coords(geom, angles, pts, i), torch.float64)
        parts.append(max_reduce_over_set(grid_sample(f, coords)))
    r = volume_features.shape[-1]
    _, low, cell = lattice(geom, r)
    vcoords = _as_tensor((pts - low) / cell - 0.5, torch.float64)
    parts.append(grid_sample(volume_features, vcoords))
    return model.point_decoder(torch.cat(parts, dim=1))


def features_from_views(model: DiCEModel, views: torch.Tensor, angles, geom, dense_views=None,
                        dense_angles=None, use_denoise: bool = False):
    """Run encoder, back-projection, codebooks and decoder for inference."""
    feats = encode_projections(views, model)
    if dense_views is None:
        dense_feats, dense_angles = feats, angles
    else:
        dense_feats = encode_projections(dense_views, model)
    grids = backproject_features(dense_feats, geom, dense_angles, model.config.resolution)
    quantized = quantize_all(grids, model)[0]
    return feats, decode_3d(quantized, model, use_denoise)


def output_points(geom: ScanGeometry, out_shape) -> np.ndarray:
    """Voxel centers of an ``out_shape`` grid spanning the bounding box, x-major order."""
    lo, hi = geom.bounding_box()
    axes = [lo[k] + (np.arange(n) + 0.5) * (hi[k] - lo[k]) / n for k, n in enumerate(out_shape)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


@torch.no_grad()
def reconstruct_volume(proj: ProjectionSet, model: DiCEModel, out_shape=None,
                       batch_size: int = 8192, dense: ProjectionSet | None = None) -> Volume:
    """Evaluate the implicit function on a voxel lattice.

    Step-2 models use the given views for both the 2D and the 3D path (with
    denoising).  Earlier stages may take a separate ``dense`` set for the 3D
    path, matching their training regime.
    """
    geom = proj.geom
    if model.stage == "step2":
        if dense is not None:
            raise StageMismatch("step-2 models reconstruct from the sparse views only")
        if model.n_views is not None and len(proj) != model.n_views:
            raise StageMismatch(f"model was finetuned for {model.n_views} views, got {len(proj)}")
    if proj.norm_max is None:
        proj = normalize_projections(proj, model.norm_max)
    if dense is not None and dense.norm_max is None:
        dense = normalize_projections(dense, model.norm_max)
    out_shape = tuple(geom.vol_shape if out_shape is None else out_shape)
    feats, volume_features = features_from_views(
        model, views_tensor(proj, model), proj.angles, geom,
        None if dense is None else views_tensor(dense, model),
        None if dense is None else dense.angles,
        use_denoise=model.stage == "step2")
    pts = output_points(geom, out_shape)
    values = np.empty(len(pts), dtype=np.float32)
    for start in range(0, len(pts), batch_size):
        chunk = pts[start:start + batch_size]
        values[start:start + len(chunk)] = query_points(
            chunk, feats, volume_features, geom, proj.angles, model).float().numpy()
    data = np.clip(values.reshape(out_shape), 0.0, 1.0)
    lo, hi = geom.bounding_box()
    spacing = float((hi[0] - lo[0]) / out_shape[0])
    origin = tuple(lo + 0.5 * (hi - lo) / np.asarray(out_shape))
    return Volume(data, spacing, origin)
