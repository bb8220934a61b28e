"""Volume / projection containers, ellipsoid phantoms and raw+sidecar file I/O."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateRange, HeaderMismatch, IoFailure, ShapeMismatch, SizeMismatch
from .geometry import ScanGeometry

VOLUME_MAGIC = b"SPBMVOL1"
PROJECTION_MAGIC = b"SPBMPRJ1"
FORMAT_VERSION = 1


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float32, order="C", copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    """Normalized attenuation samples on a regular grid, indexed ``data[x, y, z]``."""

    data: np.ndarray
    voxel_spacing: float
    origin: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeMismatch(f"volume data must be 3-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if self.voxel_spacing <= 0:
            raise ValueError("voxel spacing must be positive")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def zeros(cls, geom: ScanGeometry) -> "Volume":
        return cls(np.zeros(geom.vol_shape, np.float32), geom.voxel_spacing, geom.vol_origin)

    @classmethod
    def like(cls, geom: ScanGeometry, data) -> "Volume":
        return cls(np.asarray(data, np.float32), geom.voxel_spacing, geom.vol_origin)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape ``(nx, ny, nz, 3)``."""
        axes = [o + self.voxel_spacing * np.arange(n) for o, n in zip(self.origin, self.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_data(self, data) -> "Volume":
        return replace(self, data=data)


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """Post-log projection images ``views[n, row, col]`` with their view angles.

    ``norm_max`` is ``None`` for raw line integrals; after normalization it
    holds the divisor that was applied.  ``mu_scale`` converts volume units
    to mm^-1 (line integrals are ``mu_scale * ∫ volume ds``).  Angles are
    distinct degrees but need not be sorted.
    """

    views: np.ndarray
    angles: tuple[float, ...]
    geom: ScanGeometry
    norm_max: float | None = None
    mu_scale: float = 1.0

    def __post_init__(self):
        views = np.asarray(self.views)
        if views.ndim != 3:
            raise ShapeMismatch(f"views must be (N, H, W), got {views.shape}")
        angles = tuple(float(a) for a in self.angles)
        if views.shape[0] != len(angles):
            raise SizeMismatch(f"{views.shape[0]} views but {len(angles)} angles")
        if views.shape[1:] != (self.geom.det_rows, self.geom.det_cols):
            raise ShapeMismatch(
                f"view size {views.shape[1:]} != detector {(self.geom.det_rows, self.geom.det_cols)}")
        if not np.all(np.isfinite(views)):
            raise ValueError("projections contain non-finite values")
        if len(set(angles)) != len(angles):
            raise SizeMismatch("duplicate view angles")
        object.__setattr__(self, "views", _readonly(views))
        object.__setattr__(self, "angles", angles)

    def __len__(self):
        return len(self.angles)

    def subset(self, indices: Sequence[int]) -> "ProjectionSet":
        idx = list(indices)
        return replace(self, views=self.views[idx], angles=tuple(self.angles[i] for i in idx))

    def select_angles(self, angles: Sequence[float], tol: float = 1e-6) -> "ProjectionSet":
        """Views whose angles match ``angles`` (in the requested order)."""
        own = np.asarray(self.angles)
        idx = []
        for a in angles:
            j = int(np.argmin(np.abs(own - a)))
            if abs(own[j] - a) > tol:
                raise SizeMismatch(f"angle {a} not present in the projection set")
            idx.append(j)
        return self.subset(idx)

    def line_integrals(self) -> np.ndarray:
        """Views converted back to line integrals in volume units × mm."""
        scale = (self.norm_max or 1.0) / self.mu_scale
        return np.asarray(self.views, dtype=np.float64) * scale


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    rotation_deg: float = 0.0
    density: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(c) for c in self.semi_axes))
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")

    def _frame(self):
        a = math.radians(self.rotation_deg)
        c, s = math.cos(a), math.sin(a)
        # rows map world offsets into the local frame (inverse z-rotation)
        return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class EllipsoidPhantomSpec:
    ellipsoids: tuple[Ellipsoid, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "ellipsoids", tuple(self.ellipsoids))

    def to_dict(self) -> dict:
        return {"ellipsoids": [
            {"center": list(e.center), "semi_axes": list(e.semi_axes),
             "rotation_deg": e.rotation_deg, "density": e.density}
            for e in self.ellipsoids]}

    @classmethod
    def from_dict(cls, d: dict) -> "EllipsoidPhantomSpec":
        return cls(tuple(Ellipsoid(**e) for e in d["ellipsoids"]))

    def density_at(self, points) -> np.ndarray:
        """Summed (unclamped) density at ``(..., 3)`` world points."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.zeros(pts.shape[:-1])
        for e in self.ellipsoids:
            local = (pts - np.asarray(e.center)) @ e._frame().T
            inside = np.sum((local / np.asarray(e.semi_axes)) ** 2, axis=-1) <= 1.0
            out += np.where(inside, e.density, 0.0)
        return out


def generate_phantom(spec: EllipsoidPhantomSpec, geom: ScanGeometry,
                     supersample: int = 1) -> Volume:
    """Voxelize ``spec``, clamped to [0, 1].

    With ``supersample=1`` each voxel takes the density at its center.  Larger
    values average a ``k**3`` sub-grid per voxel (partial-volume phantom).
    """
    empty = Volume.zeros(geom)
    centers = empty.voxel_centers()
    k = int(supersample)
    if k < 1:
        raise ValueError("supersample must be >= 1")
    if k == 1:
        dens = spec.density_at(centers)
    else:
        offs = ((np.arange(k) + 0.5) / k - 0.5) * geom.voxel_spacing
        dens = np.zeros(centers.shape[:-1])
        for ox in offs:
            for oy in offs:
                for oz in offs:
                    dens += spec.density_at(centers + np.array([ox, oy, oz]))
        dens /= k ** 3
    return empty.with_data(np.clip(dens, 0.0, 1.0).astype(np.float32))


def analytic_ray_integral(spec: EllipsoidPhantomSpec, ray_origin, ray_dir) -> float:
    """Exact line integral of the (unclamped) phantom along a full line."""
    o = np.asarray(ray_origin, dtype=np.float64)
    d = np.asarray(ray_dir, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("ray direction must be a unit vector")
    total = 0.0
    for e in spec.ellipsoids:
        rot = e._frame()
        axes = np.asarray(e.semi_axes)
        lo = rot @ (o - np.asarray(e.center)) / axes
        ld = rot @ d / axes
        a = ld @ ld
        b = 2.0 * (lo @ ld)
        c = lo @ lo - 1.0
        disc = b * b - 4.0 * a * c
        if disc <= 0.0:
            continue
        # |d| = 1 so parameter distance is path length
        total += e.density * math.sqrt(disc) / a
    return total


def random_phantom_spec(rng: np.random.Generator, geom: ScanGeometry,
                        n_inner: tuple[int, int] = (2, 6)) -> EllipsoidPhantomSpec:
    """A body ellipsoid with a few nested structures, density kept inside [0, 1]."""
    lo, hi = geom.bounding_box()
    center = (lo + hi) / 2.0
    half = (hi - lo) / 2.0
    for _ in range(100):
        body_axes = half * rng.uniform(0.6, 0.85, size=3)
        body = Ellipsoid(tuple(center + rng.uniform(-0.05, 0.05, 3) * half),
                         tuple(body_axes), float(rng.uniform(0, 180)),
                         float(rng.uniform(0.3, 0.5)))
        parts = [body]
        for _ in range(int(rng.integers(n_inner[0], n_inner[1] + 1))):
            axes = body_axes * rng.uniform(0.12, 0.4, size=3)
            off = rng.uniform(-0.5, 0.5, size=3) * (body_axes - axes)
            parts.append(Ellipsoid(tuple(np.asarray(body.center) + off), tuple(axes),
                                   float(rng.uniform(0, 180)),
                                   float(rng.choice([-1, 1]) * rng.uniform(0.1, 0.4))))
        spec = EllipsoidPhantomSpec(tuple(parts))
        dens = spec.density_at(Volume.zeros(geom).voxel_centers())
        if dens.min() >= 0.0 and dens.max() <= 1.0:
            return spec
    raise RuntimeError("could not draw a phantom within [0, 1]")


def normalize_projections(raw: ProjectionSet, norm_max: float | None = None) -> ProjectionSet:
    """Scale views into [0, 1] by the dataset maximum.

    An already-normalized set is returned unchanged.  Pass ``norm_max`` to
    reuse the maximum of a larger candidate set.
    """
    if raw.norm_max is not None:
        return raw
    if norm_max is None:
        norm_max = float(np.max(raw.views)) if raw.views.size else 0.0
    if not norm_max > 0.0:
        raise DegenerateRange(f"normalization maximum must be positive, got {norm_max}")
    return replace(raw, views=np.asarray(raw.views) / np.float32(norm_max), norm_max=float(norm_max))


# --------------------------------------------------------------------- file I/O

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def _write(path, magic: bytes, meta: dict, payload: np.ndarray) -> None:
    meta_path, raw_path = _paths(path)
    try:
        raw_path.parent.mkdir(parents=True, exist_ok=True)
        with open(raw_path, "wb") as f:
            f.write(magic)
            f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def _read(path, magic: bytes) -> tuple[dict, np.ndarray]:
    meta_path, raw_path = _paths(path)
    try:
        meta = json.loads(meta_path.read_text())
        blob = raw_path.read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(str(exc)) from exc
    if blob[:8] != magic or meta.get("version") != FORMAT_VERSION:
        raise HeaderMismatch(f"{raw_path}: bad magic or version")
    expected = int(np.prod(meta["shape"]))
    body = blob[8:]
    if len(body) != 4 * expected:
        raise ShapeMismatch(f"{raw_path}: payload has {len(body)} bytes, expected {4 * expected}")
    return meta, np.frombuffer(body, dtype="<f4").astype(np.float32)


def write_volume(path, vol: Volume) -> None:
    meta = {"kind": "volume", "version": FORMAT_VERSION, "shape": list(vol.shape),
            "voxel_spacing": vol.voxel_spacing, "origin": list(vol.origin),
            "value_range": [float(vol.data.min()), float(vol.data.max())]}
    # x varies fastest on disk
    _write(path, VOLUME_MAGIC, meta, vol.data.ravel(order="F"))


def read_volume(path) -> Volume:
    meta, flat = _read(path, VOLUME_MAGIC)
    data = flat.reshape(meta["shape"], order="F")
    return Volume(data, meta["voxel_spacing"], tuple(meta["origin"]))


def write_projections(path, proj: ProjectionSet) -> None:
    meta = {"kind": "projections", "version": FORMAT_VERSION, "shape": list(proj.views.shape),
            "angles": list(proj.angles), "norm_max": proj.norm_max, "mu_scale": proj.mu_scale,
            "geometry": proj.geom.to_dict()}
    _write(path, PROJECTION_MAGIC, meta, proj.views.ravel(order="C"))


def read_projections(path) -> ProjectionSet:
    meta, flat = _read(path, PROJECTION_MAGIC)
    return ProjectionSet(flat.reshape(meta["shape"]), tuple(meta["angles"]),
                         ScanGeometry.from_dict(meta["geometry"]),
                         meta["norm_max"], meta.get("mu_scale", 1.0))


def write_json(path, obj) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_json(path):
    try:
        return json.loads(Path(os.fspath(path)).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(str(exc)) from exc
