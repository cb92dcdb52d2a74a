"""Synthetic Circle-of-Willis-like phantoms.

A phantom is a set of tubes swept along Catmull-Rom curves through voxel-space
control points. Generation yields a binary segmentation, the densely sampled
labeled centerlines and a Poiseuille velocity field (cm/s).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.spatial import cKDTree

from .volume import Volume, VESSEL_LABELS

CENTERLINE_STEP = 0.5  # voxels of arc length between emitted centerline points
_CURVE_OVERSAMPLE = 8  # dense curve vertices per voxel of chord
_EPS = 1e-9


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class TubeSpec:
    label: int
    control_points: tuple
    radius: float | tuple = 2.0  # voxels; scalar or one value per control point
    velocity_peak: float = 40.0  # cm/s on the axis

    def radii(self) -> np.ndarray:
        n = len(self.control_points)
        if np.ndim(self.radius) == 0:
            return np.full(n, float(self.radius))
        r = np.asarray(self.radius, dtype=float)
        if r.shape != (n,):
            raise PhantomError(f"tube label {self.label}: need {n} radii, got {r.size}")
        return r


@dataclass(frozen=True)
class Stenosis:
    segment: int  # index into PhantomSpec.segments
    center: float  # normalized arc length in [0, 1]
    severity: float  # fractional radius reduction at the center; 1 disconnects
    extent: float  # width of the cosine window, fraction of segment length


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple
    segments: tuple
    spacing: tuple = (0.5, 0.5, 0.5)
    noise_seed: int = 0
    stenoses: tuple = ()
    velocity_noise: float = 0.0  # std (cm/s) of additive noise inside vessels

    def validate(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise PhantomError(f"dims must be a positive integer triple, got {self.dims}")
        if len(self.segments) < 1:
            raise PhantomError("phantom spec needs at least one segment")
        for i, seg in enumerate(self.segments):
            if int(seg.label) not in VESSEL_LABELS:
                raise PhantomError(f"segment {i}: label {seg.label} outside [1, 9]")
            pts = np.asarray(seg.control_points, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
                raise PhantomError(f"segment {i} (label {seg.label}): need >= 2 control points")
            if np.any(pts < 0) or np.any(pts > np.asarray(self.dims) - 1):
                raise PhantomError(f"segment {i} (label {seg.label}): control point outside dims {tuple(self.dims)}")
            if np.any(seg.radii() <= 0):
                raise PhantomError(f"segment {i} (label {seg.label}): radius must be > 0")
        for s in self.stenoses:
            if not 0 <= s.segment < len(self.segments):
                raise PhantomError(f"stenosis refers to missing segment {s.segment}")
            if not 0.0 <= s.center <= 1.0:
                raise PhantomError(f"stenosis center {s.center} outside [0, 1]")
            if not 0.0 <= s.severity <= 1.0:
                raise PhantomError(f"stenosis severity {s.severity} outside [0, 1]")
            if not 0.0 < s.extent <= 1.0:
                raise PhantomError(f"stenosis extent {s.extent} outside (0, 1]")
        if self.velocity_noise < 0:
            raise PhantomError("velocity_noise must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = [int(n) for n in self.dims]
        d["spacing"] = [float(s) for s in self.spacing]
        for seg in d["segments"]:
            seg["control_points"] = [[float(c) for c in p] for p in seg["control_points"]]
            if not np.isscalar(seg["radius"]):
                seg["radius"] = [float(r) for r in seg["radius"]]
        d["stenoses"] = [dict(s) for s in d["stenoses"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        segs = tuple(
            TubeSpec(
                label=int(s["label"]),
                control_points=tuple(tuple(float(c) for c in p) for p in s["control_points"]),
                radius=s["radius"] if np.isscalar(s["radius"]) else tuple(s["radius"]),
                velocity_peak=float(s.get("velocity_peak", 40.0)),
            )
            for s in d["segments"]
        )
        sten = tuple(Stenosis(**s) for s in d.get("stenoses", ()))
        return cls(
            dims=tuple(int(n) for n in d["dims"]),
            segments=segs,
            spacing=tuple(float(s) for s in d.get("spacing", (0.5, 0.5, 0.5))),
            noise_seed=int(d.get("noise_seed", 0)),
            stenoses=sten,
            velocity_noise=float(d.get("velocity_noise", 0.0)),
        )


@dataclass
class Centerline:
    label: int
    points: np.ndarray  # (n, 3) voxel coordinates

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.label = int(self.label)


@dataclass
class CenterlineSet:
    lines: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.lines)

    def __len__(self):
        return len(self.lines)

    def labels(self) -> set:
        return {c.label for c in self.lines}

    def stacked(self):
        """All points as one (P, 3) array plus their (P,) labels."""
        if not self.lines:
            return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        pts = np.concatenate([c.points for c in self.lines])
        labs = np.concatenate([np.full(len(c.points), c.label, dtype=np.int64) for c in self.lines])
        return pts, labs

    def check_labels(self):
        for c in self.lines:
            if c.label not in VESSEL_LABELS:
                raise PhantomError(f"centerline label {c.label} outside [1, 9]")
            if not np.all(np.isfinite(c.points)):
                raise PhantomError(f"centerline {c.label} has non-finite coordinates")

    def validate(self, max_gap=2.0):
        """Full invariants of a generated set: labels, >= 2 points, dense sampling."""
        self.check_labels()
        for c in self.lines:
            if len(c.points) < 2:
                raise PhantomError(f"centerline {c.label} has fewer than 2 points")
            gaps = np.linalg.norm(np.diff(c.points, axis=0), axis=1)
            if gaps.size and gaps.max() > max_gap:
                raise PhantomError(f"centerline {c.label} has a gap of {gaps.max():.3f} voxels")

    def map_points(self, fn) -> "CenterlineSet":
        return CenterlineSet([Centerline(c.label, fn(c.points)) for c in self.lines])

    def to_json(self) -> list:
        return [{"label": c.label, "points": c.points.tolist()} for c in self.lines]

    @classmethod
    def from_json(cls, obj) -> "CenterlineSet":
        if not isinstance(obj, list):
            raise PhantomError("centerline file must hold a JSON list")
        lines = []
        for i, item in enumerate(obj):
            if not isinstance(item, dict) or "label" not in item or "points" not in item:
                raise PhantomError(f"centerline entry {i} needs 'label' and 'points'")
            pts = np.asarray(item["points"], dtype=float)
            if pts.size and (pts.ndim != 2 or pts.shape[1] != 3):
                raise PhantomError(f"centerline entry {i}: points must be [[x, y, z], ...]")
            lines.append(Centerline(item["label"], pts))
        cs = cls(lines)
        cs.check_labels()
        return cs


def save_centerlines(cs: CenterlineSet, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cs.to_json(), fh)


def load_centerlines(path) -> CenterlineSet:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise PhantomError(f"{path}: malformed centerline JSON: {exc}") from exc
    return CenterlineSet.from_json(obj)


def catmull_rom(control_points, values=None, oversample=_CURVE_OVERSAMPLE):
    """Dense uniform Catmull-Rom curve through ``control_points``.

    End tangents come from reflected phantom points, so a straight, evenly spaced
    control polygon yields an exactly linear curve. ``values`` (one per control
    point) are interpolated linearly along each span.
    """
    P = np.asarray(control_points, dtype=float)
    n = len(P)
    ext = np.vstack([2 * P[0] - P[1], P, 2 * P[-1] - P[-2]])
    vals = None if values is None else np.asarray(values, dtype=float)
    pts, out_vals = [], []
    for i in range(n - 1):
        p0, p1, p2, p3 = ext[i], ext[i + 1], ext[i + 2], ext[i + 3]
        m = max(4, int(math.ceil(np.linalg.norm(p2 - p1) * oversample)))
        u = np.arange(m)[:, None] / m
        u2, u3 = u * u, u * u * u
        seg = 0.5 * (
            2 * p1
            + (-p0 + p2) * u
            + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u2
            + (-p0 + 3 * p1 - 3 * p2 + p3) * u3
        )
        pts.append(seg)
        if vals is not None:
            out_vals.append(vals[i] + (vals[i + 1] - vals[i]) * u[:, 0])
    pts.append(P[-1][None, :])
    curve = np.vstack(pts)
    if vals is None:
        return curve
    out_vals.append(vals[-1:])
    return curve, np.concatenate(out_vals)


def arc_length(curve):
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(curve, step=CENTERLINE_STEP):
    """Points at equal arc-length spacing no greater than ``step``, endpoints kept."""
    s = arc_length(curve)
    total = s[-1]
    if total <= 0:
        return curve[[0, -1]].copy()
    n = max(1, int(math.ceil(total / step)))
    targets = total * np.arange(n + 1) / n
    return np.column_stack([np.interp(targets, s, curve[:, k]) for k in range(3)])


def _bump(t, center, extent):
    half = extent / 2.0
    x = np.clip(np.abs(t - center) / half, 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(np.pi * x))


@dataclass
class _Tube:
    index: int
    label: int
    vertices: np.ndarray
    radii: np.ndarray
    peak: float


def _build_tubes(spec: PhantomSpec):
    tubes = []
    for i, seg in enumerate(spec.segments):
        verts, r = catmull_rom(seg.control_points, seg.radii())
        s = arc_length(verts)
        t = s / s[-1] if s[-1] > 0 else np.zeros_like(s)
        for st in spec.stenoses:
            if st.segment == i:
                r = r * (1.0 - st.severity * _bump(t, st.center, st.extent))
        tubes.append(_Tube(i, int(seg.label), verts, r, float(seg.velocity_peak)))
    return tubes


def _check_bounds(tube: _Tube, dims):
    lo = tube.vertices - tube.radii[:, None]
    hi = tube.vertices + tube.radii[:, None]
    if np.any(lo < -0.5) or np.any(hi > np.asarray(dims) - 0.5):
        raise PhantomError(f"segment {tube.index} (label {tube.label}) exits the volume bounds {tuple(dims)}")


def _rasterize(tube: _Tube, dims, inside, velocity, chunk=64):
    """Mark voxels within the local radius of the tube's polyline; keep max velocity."""
    V, R = tube.vertices, tube.radii
    rmax = float(R.max())
    if rmax <= 0:
        return
    seglen = np.linalg.norm(np.diff(V, axis=0), axis=1)
    reach = rmax + seglen.max() / 2 + 1e-6
    lo = np.maximum(np.floor(V.min(0) - rmax).astype(int), 0)
    hi = np.minimum(np.ceil(V.max(0) + rmax).astype(int), np.asarray(dims) - 1)
    grid = np.stack(
        np.meshgrid(*[np.arange(lo[k], hi[k] + 1) for k in range(3)], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    near, _ = cKDTree(V).query(grid, distance_upper_bound=reach)
    cand = grid[np.isfinite(near)]
    if cand.size == 0:
        return
    P = cand.astype(float)
    best = np.full(len(P), -np.inf)  # max over segments of (r - d) / r
    A, B = V[:-1], V[1:]
    AB = B - A
    ab2 = np.einsum("ij,ij->i", AB, AB)
    ab2 = np.where(ab2 > 0, ab2, 1.0)
    for j0 in range(0, len(A), chunk):
        a, ab, l2 = A[j0:j0 + chunk], AB[j0:j0 + chunk], ab2[j0:j0 + chunk]
        r0, r1 = R[:-1][j0:j0 + chunk], R[1:][j0:j0 + chunk]
        AP = P[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("pjk,jk->pj", AP, ab) / l2, 0.0, 1.0)
        d = np.linalg.norm(AP - t[..., None] * ab[None], axis=-1)
        r = r0 + t * (r1 - r0)
        ok = (d <= r + _EPS) & (r > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            prof = np.where(ok, 1.0 - np.minimum(d / r, 1.0) ** 2, -np.inf)
        best = np.maximum(best, prof.max(axis=1))
    hit = np.isfinite(best)
    idx = tuple(cand[hit].T)
    inside[idx] = True
    velocity[idx] = np.maximum(velocity[idx], tube.peak * best[hit])


def generate_phantom(spec: PhantomSpec):
    """Return ``(segmentation, centerlines, velocity)`` for ``spec``.

    Deterministic: the only randomness is optional velocity noise keyed by
    ``spec.noise_seed``.
    """
    spec.validate()
    dims = tuple(int(n) for n in spec.dims)
    tubes = _build_tubes(spec)
    for tube in tubes:
        _check_bounds(tube, dims)
    inside = np.zeros(dims, dtype=bool)
    velocity = np.zeros(dims, dtype=np.float64)
    for tube in tubes:
        _rasterize(tube, dims, inside, velocity)
    if spec.velocity_noise > 0:
        rng = np.random.default_rng(spec.noise_seed)
        velocity = velocity + rng.normal(0.0, spec.velocity_noise, size=dims)
    velocity[~inside] = 0.0
    lines = [Centerline(t.label, resample_polyline(t.vertices)) for t in tubes]
    seg = Volume(inside.astype(np.uint8), spec.spacing)
    vel = Volume(velocity.astype(np.float32), spec.spacing)
    return seg, CenterlineSet(lines), vel


# Offsets from the volume centre in voxels of a 96^3 grid: +x patient left,
# +y anterior, +z superior.
_BA_TIP = (0.0, -12.0, -2.0)
_RICA_TIP = (-11.0, 8.0, 2.0)
_LICA_TIP = (11.0, 8.0, 2.0)

_COW_LAYOUT = (
    # label, control points, radius, peak velocity (cm/s)
    (1, [(0.0, -16.0, -28.0), (0.0, -15.0, -16.0), _BA_TIP], 2.6, 42.0),
    (2, [(-13.0, 5.0, -30.0), (-14.0, 3.0, -16.0), (-12.0, 6.0, -6.0), _RICA_TIP], 2.8, 36.0),
    (3, [(13.0, 5.0, -30.0), (14.0, 3.0, -16.0), (12.0, 6.0, -6.0), _LICA_TIP], 2.8, 36.0),
    (4, [_RICA_TIP, (-19.0, 9.0, 3.0), (-27.0, 8.0, 6.0), (-34.0, 10.0, 9.0)], 2.0, 60.0),
    (5, [_LICA_TIP, (19.0, 9.0, 3.0), (27.0, 8.0, 6.0), (34.0, 10.0, 9.0)], 2.0, 60.0),
    (6, [_RICA_TIP, (-6.0, 15.0, 6.0), (-4.0, 23.0, 12.0), (-4.0, 29.0, 20.0)], 1.8, 50.0),
    (7, [_LICA_TIP, (6.0, 15.0, 6.0), (4.0, 23.0, 12.0), (4.0, 29.0, 20.0)], 1.8, 50.0),
    (8, [_BA_TIP, (-8.0, -14.0, 0.0), (-18.0, -20.0, 2.0), (-26.0, -28.0, 4.0)], 1.8, 34.0),
    (9, [_BA_TIP, (8.0, -14.0, 0.0), (18.0, -20.0, 2.0), (26.0, -28.0, 4.0)], 1.8, 34.0),
)
_COW_JITTER = 1.5  # voxels (96^3 scale), per coordinate
_COW_MAX_FROM_CENTER = 40.0


def default_cow_spec(dims=(96, 96, 96), seed: int = 0, spacing=(0.5, 0.5, 0.5)) -> PhantomSpec:
    """Nine-vessel layout echoing the Circle of Willis, jittered by ``seed``.

    Everything stays within 40 voxels (at 96^3 scale) of the centre so rigid
    test-time augmentation never pushes a vessel out of the grid.
    """
    if np.isscalar(dims):
        dims = (dims,) * 3
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 64:
        raise PhantomError(f"default_cow_spec needs dims >= 64 on every axis, got {dims}")
    scale = min(dims) / 96.0
    center = (np.asarray(dims, dtype=float) - 1.0) / 2.0
    rng = np.random.default_rng(int(seed))

    jitter = {}

    def place(p):
        key = tuple(p)
        if key not in jitter:
            jitter[key] = rng.uniform(-_COW_JITTER, _COW_JITTER, size=3)
        q = np.asarray(p) + jitter[key]
        norm = np.linalg.norm(q)
        if norm > _COW_MAX_FROM_CENTER:
            q = q * (_COW_MAX_FROM_CENTER / norm)
        return tuple(float(c) for c in center + scale * q)

    segments = []
    for label, pts, radius, peak in _COW_LAYOUT:
        cps = tuple(place(p) for p in pts)
        v = peak * float(rng.uniform(0.9, 1.1))
        segments.append(TubeSpec(label=label, control_points=cps, radius=radius * scale, velocity_peak=v))
    return PhantomSpec(dims=dims, segments=tuple(segments), spacing=tuple(spacing), noise_seed=int(seed))
