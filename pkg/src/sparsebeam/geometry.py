"""Circular-orbit cone-beam geometry and view-angle bookkeeping.

World frame: the isocenter is the origin, the source orbits counterclockwise
in the z=0 plane at distance ``dso``.  At angle ``a`` the source sits at
``dso * (cos a, sin a, 0)`` and looks along ``w = (-cos a, -sin a, 0)``; the
flat detector is centered at ``source + dsd * w`` with in-plane axis
``u = (-sin a, cos a, 0)`` and axial axis ``v = (0, 0, 1)``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegeneratePoint,
    Infeasible,
    InvalidCount,
    InvalidGeometry,
    SizeMismatch,
)

EPS_DEPTH = 1e-6
ANGLE_TOL = 1e-9
EXHAUSTIVE_LIMIT = 100_000


@dataclass(frozen=True)
class ScanGeometry:
    """Cone-beam acquisition parameters (all lengths in mm)."""

    dso: float
    dsd: float
    det_cols: int
    det_rows: int
    det_spacing_u: float
    det_spacing_v: float
    vol_shape: tuple[int, int, int]
    voxel_spacing: float
    vol_origin: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "vol_shape", tuple(int(n) for n in self.vol_shape))
        object.__setattr__(self, "vol_origin", tuple(float(o) for o in self.vol_origin))
        if len(self.vol_shape) != 3 or len(self.vol_origin) != 3:
            raise InvalidGeometry("vol_shape and vol_origin must have three entries")
        if not (self.dsd > self.dso > 0):
            raise InvalidGeometry(f"need dsd > dso > 0, got dso={self.dso}, dsd={self.dsd}")
        if min(self.det_spacing_u, self.det_spacing_v, self.voxel_spacing) <= 0:
            raise InvalidGeometry("spacings must be positive")
        if min(self.det_cols, self.det_rows, *self.vol_shape) < 1:
            raise InvalidGeometry("counts must be >= 1")
        lo, hi = self.bounding_box()
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        if np.linalg.norm(corners, axis=1).max() >= self.dso:
            raise InvalidGeometry("volume bounding box does not fit inside the source orbit")

    @classmethod
    def centered(cls, dso=800.0, dsd=1200.0, det_cols=64, det_rows=64,
                 det_spacing=2.0, vol_shape=(64, 64, 64), voxel_spacing=1.5,
                 det_spacing_v=None) -> "ScanGeometry":
        """Geometry whose voxel grid is centered on the isocenter."""
        vol_shape = tuple(int(n) for n in vol_shape)
        origin = tuple(-(n - 1) / 2.0 * voxel_spacing for n in vol_shape)
        return cls(dso, dsd, det_cols, det_rows, det_spacing,
                   det_spacing if det_spacing_v is None else det_spacing_v,
                   vol_shape, voxel_spacing, origin)

    @property
    def magnification(self) -> float:
        return self.dsd / self.dso

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Outer faces of the voxel grid (voxel edges, not centers)."""
        origin = np.asarray(self.vol_origin, dtype=np.float64)
        shape = np.asarray(self.vol_shape, dtype=np.float64)
        half = 0.5 * self.voxel_spacing
        return origin - half, origin + (shape - 1) * self.voxel_spacing + half

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vol_shape"] = list(self.vol_shape)
        d["vol_origin"] = list(self.vol_origin)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScanGeometry":
        expected = {f for f in cls.__dataclass_fields__}
        if set(d) != expected:
            raise InvalidGeometry(f"geometry fields {sorted(d)} != {sorted(expected)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScanGeometry":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ViewAngleSet:
    """Strictly increasing view angles in degrees, each in [0, 360)."""

    angles: tuple[float, ...] = ()

    def __post_init__(self):
        a = tuple(float(x) for x in self.angles)
        object.__setattr__(self, "angles", a)
        for x in a:
            if not (0.0 <= x < 360.0) or not math.isfinite(x):
                raise InvalidGeometry(f"angle {x} outside [0, 360)")
        for x, y in zip(a, a[1:]):
            if y - x <= ANGLE_TOL:
                raise InvalidGeometry("angles must be strictly increasing without duplicates")

    @classmethod
    def of(cls, angles: Iterable[float]) -> "ViewAngleSet":
        """Build from an unordered collection (sorted, near-duplicates rejected)."""
        return cls(tuple(sorted(float(x) for x in angles)))

    def __len__(self):
        return len(self.angles)

    def __iter__(self):
        return iter(self.angles)

    def __getitem__(self, i):
        return self.angles[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.angles, dtype=np.float64)


@dataclass(frozen=True)
class ViewPlan:
    """Sparse / auxiliary / dense view sets; ``union`` lists sparse angles first."""

    sparse: ViewAngleSet
    aux: ViewAngleSet
    dense: ViewAngleSet
    union: tuple[float, ...] = field(default=())
    approximate: bool = False

    def __post_init__(self):
        if not self.union:
            object.__setattr__(self, "union", tuple(self.sparse) + tuple(self.aux))

    @property
    def n(self) -> int:
        return len(self.sparse)

    @property
    def n_max(self) -> int:
        return len(self.dense)

    def check(self, n_min: int | None = None) -> None:
        """Raise ``Infeasible`` unless every plan constraint holds."""
        if not _is_subset(self.aux, self.dense):
            raise Infeasible("aux is not a subset of dense")
        if _intersects(self.sparse, self.aux):
            raise Infeasible("sparse and aux overlap")
        if len(self.union) != self.n_max or len(self.aux) != self.n_max - self.n:
            raise Infeasible("|sparse ∪ aux| must equal N_max")
        if tuple(self.union[: self.n]) != tuple(self.sparse):
            raise Infeasible("union must list the sparse angles first")
        if n_min is not None and not (n_min <= self.n <= self.n_max):
            raise Infeasible(f"N={self.n} outside [{n_min}, {self.n_max}]")


@dataclass(frozen=True)
class AuxSelection:
    aux: ViewAngleSet
    cost: float
    approximate: bool


def _contains(angles: Sequence[float], x: float) -> bool:
    return any(abs(x - y) <= ANGLE_TOL for y in angles)


def _is_subset(a: Iterable[float], b: Sequence[float]) -> bool:
    return all(_contains(b, x) for x in a)


def _intersects(a: Iterable[float], b: Sequence[float]) -> bool:
    return any(_contains(b, x) for x in a)


def _rotation(angle_deg: float):
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    w = np.array([-c, -s, 0.0])
    u = np.array([-s, c, 0.0])
    v = np.array([0.0, 0.0, 1.0])
    return c, s, u, v, w


def source_position(geom: ScanGeometry, angle: float) -> np.ndarray:
    a = math.radians(angle)
    return np.array([geom.dso * math.cos(a), geom.dso * math.sin(a), 0.0])


def detector_frame(geom: ScanGeometry, angle: float):
    """Return ``(source, detector_center, u_axis, v_axis, optical_axis)``."""
    _, _, u, v, w = _rotation(angle)
    src = source_position(geom, angle)
    return src, src + geom.dsd * w, u, v, w


def project_points(geom: ScanGeometry, angle: float, points) -> np.ndarray:
    """Vectorized pinhole projection of ``(..., 3)`` points to ``(..., 2)`` pixel coords.

    Returned columns are ``(u, v)`` continuous pixel indices; values outside
    the detector are legal.
    """
    pts = np.asarray(points, dtype=np.float64)
    src, _, u, v, w = detector_frame(geom, angle)
    d = pts - src
    depth = d @ w
    if np.any(depth <= EPS_DEPTH):
        raise DegeneratePoint("point at or behind the source plane")
    t = geom.dsd / depth
    u_mm = t * (d @ u)
    v_mm = t * (d @ v)
    out = np.empty(pts.shape[:-1] + (2,))
    out[..., 0] = u_mm / geom.det_spacing_u + (geom.det_cols - 1) / 2.0
    out[..., 1] = v_mm / geom.det_spacing_v + (geom.det_rows - 1) / 2.0
    return out


def project_point(geom: ScanGeometry, angle: float, p) -> tuple[float, float]:
    uv = project_points(geom, angle, np.asarray(p, dtype=np.float64)[None])[0]
    return float(uv[0]), float(uv[1])


def uniform_half_scan_angles(n: int, offset: float = 0.0) -> ViewAngleSet:
    """``n`` angles evenly spaced over the half rotation [0, 180)."""
    if n < 1:
        raise InvalidCount("need at least one view")
    step = 180.0 / n
    if not (0.0 <= offset < step):
        raise InvalidCount(f"offset must lie in [0, {step})")
    return ViewAngleSet(tuple(offset + k * step for k in range(n)))


def matching_cost(angles: Iterable[float], dense: Iterable[float]) -> float:
    """Minimum total L1 distance over bijections between two equal-size angle sets.

    In one dimension pairing the sorted sequences is optimal.
    """
    a = np.sort(np.asarray(list(angles), dtype=np.float64))
    b = np.sort(np.asarray(list(dense), dtype=np.float64))
    if a.shape != b.shape:
        raise SizeMismatch(f"|Λ|={a.size} differs from |Λ_dense|={b.size}")
    return float(np.abs(a - b).sum())


def select_aux_angles(sparse: ViewAngleSet, dense: ViewAngleSet, n: int | None = None,
                      limit: int = EXHAUSTIVE_LIMIT) -> AuxSelection:
    """Choose ``N_max - N`` dense angles that, joined with ``sparse``, best match ``dense``.

    Exhaustive subset search when the number of subsets is at most ``limit``,
    otherwise greedy insertion (``approximate=True`` in the result).
    """
    n = len(sparse) if n is None else n
    n_max = len(dense)
    if len(sparse) != n:
        raise SizeMismatch(f"|sparse|={len(sparse)} but N={n}")
    if n > n_max:
        raise Infeasible(f"N={n} exceeds N_max={n_max}")
    k = n_max - n
    pool = [x for x in dense if not _contains(sparse.angles, x)]
    if len(pool) < k:
        raise Infeasible(f"only {len(pool)} dense angles outside the sparse set, need {k}")
    if k == 0:
        return AuxSelection(ViewAngleSet(()), matching_cost(sparse, dense), False)

    target = dense.as_array()
    base = sparse.as_array()
    if math.comb(len(pool), k) <= limit:
        best_cost, best = math.inf, None
        for combo in itertools.combinations(pool, k):
            cost = matching_cost(np.concatenate([base, combo]), target)
            if cost < best_cost:
                best_cost, best = cost, combo
        return AuxSelection(ViewAngleSet.of(best), best_cost, False)

    chosen: list[float] = []
    remaining = list(pool)
    for _ in range(k):
        # pad the partial set with its own best completion so costs stay comparable
        scores = [_partial_cost(base, chosen + [x], target) for x in remaining]
        j = int(np.argmin(scores))
        chosen.append(remaining.pop(j))
    cost = matching_cost(np.concatenate([base, chosen]), target)
    return AuxSelection(ViewAngleSet.of(chosen), cost, True)


def _partial_cost(base, extra, target) -> float:
    """Cost of matching ``base ∪ extra`` injectively into ``target`` (sizes may differ)."""
    a = np.sort(np.concatenate([base, extra]))
    b = np.sort(target)
    m, n = a.size, b.size
    # DP over sorted sequences: optimal order-preserving injection of a into b
    inf = math.inf
    dp = np.full((m + 1, n + 1), inf)
    dp[0, :] = 0.0
    for i in range(1, m + 1):
        for j in range(i, n + 1):
            dp[i, j] = min(dp[i, j - 1], dp[i - 1, j - 1] + abs(a[i - 1] - b[j - 1]))
    return float(dp[m, n])


def snap_to_candidates(angles: Iterable[float], candidates: ViewAngleSet) -> list[float]:
    """Replace each angle by the nearest candidate (lowest candidate on ties)."""
    cand = candidates.as_array()
    return [float(cand[int(np.argmin(np.abs(cand - a)))]) for a in angles]
