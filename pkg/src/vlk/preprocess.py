"""Input preparation for whole-volume and patch-based networks.

Fixed-size route: tight bounding box, 15 % zero margin, isotropic
nearest-neighbour scaling to fit the target, centred pad/crop.
Patch route: sliding-window plan with half-patch overlap and edge clamping,
plus weighted stitching of per-patch class probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume, VolumeError

FIXED_TARGET = (128, 256, 256)
PATCH_SIZE = (80, 224, 160)
MARGIN_FRACTION = 0.15


class EmptyInputError(VolumeError):
    pass


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class BoundingBox:
    lo: tuple  # inclusive
    hi: tuple  # inclusive

    def __post_init__(self):
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise VolumeError(f"invalid bounding box {self.lo}..{self.hi}")

    @property
    def extent(self) -> tuple:
        return tuple(b - a + 1 for a, b in zip(self.lo, self.hi))

    def to_dict(self):
        return {"min": list(self.lo), "max": list(self.hi)}


def tight_bbox(seg: Volume) -> BoundingBox:
    nz = np.argwhere(seg.data != 0)
    if len(nz) == 0:
        raise EmptyInputError("segmentation is empty; no bounding box")
    return BoundingBox(tuple(int(v) for v in nz.min(0)), tuple(int(v) for v in nz.max(0)))


def margins(b: BoundingBox, fraction: float = MARGIN_FRACTION) -> tuple:
    """Voxels added on each side of each axis."""
    if fraction < 0:
        raise VolumeError(f"margin fraction must be >= 0, got {fraction}")
    return tuple(round_half_away(fraction * e) for e in b.extent)


def pad_bbox(b: BoundingBox, fraction: float = MARGIN_FRACTION, dims=None) -> BoundingBox:
    """Grow every side by ``round(fraction * extent)`` voxels, clamped to ``dims``."""
    m = margins(b, fraction)
    lo = [a - k for a, k in zip(b.lo, m)]
    hi = [a + k for a, k in zip(b.hi, m)]
    if dims is not None:
        lo = [max(0, a) for a in lo]
        hi = [min(n - 1, a) for a, n in zip(hi, dims)]
    return BoundingBox(tuple(lo), tuple(hi))


def crop_with_margin(v: Volume, fraction: float = MARGIN_FRACTION) -> Volume:
    """Tight box plus the full margin; parts beyond the grid are literal zeros."""
    b = tight_bbox(v)
    box = pad_bbox(b, fraction)  # unclamped
    return extract_region(v, box.lo, box.extent)


def extract_region(v: Volume, offset, shape) -> Volume:
    """Copy a box starting at ``offset``; voxels outside ``v`` read as zero."""
    out = np.zeros(tuple(shape), dtype=v.data.dtype)
    src, dst = [], []
    for o, s, n in zip(offset, shape, v.dims):
        a, b = max(o, 0), min(o + s, n)
        if a >= b:
            return v.with_data(out)
        src.append(slice(a, b))
        dst.append(slice(a - o, b - o))
    out[tuple(dst)] = v.data[tuple(src)]
    return v.with_data(out)


def fit_scale(source, target) -> float:
    """Largest isotropic factor keeping every scaled axis within the target."""
    return min(t / s for t, s in zip(target, source))


def scale_crop_to_target(v: Volume, target=FIXED_TARGET) -> Volume:
    """Nearest-neighbour isotropic rescale, then centred zero-pad/crop to ``target``."""
    if any(n < 1 for n in v.dims):
        raise VolumeError(f"degenerate source dims {v.dims}")
    target = tuple(int(t) for t in target)
    s = fit_scale(v.dims, target)
    scaled_dims = [max(1, round_half_away(n * s)) for n in v.dims]
    idx = [np.minimum(np.floor(np.arange(m) / s).astype(np.int64), n - 1)
           for m, n in zip(scaled_dims, v.dims)]
    scaled = v.data[np.ix_(*idx)]
    offset = [(m - t) // 2 for m, t in zip(scaled_dims, target)]
    spacing = tuple(sp / s for sp in v.spacing)
    return extract_region(Volume(scaled, spacing), offset, target)


def fixed_size_input(seg: Volume, target=FIXED_TARGET, fraction=MARGIN_FRACTION) -> Volume:
    """Whole preprocessing route for fixed-input networks."""
    return scale_crop_to_target(crop_with_margin(seg, fraction), target)


@dataclass
class PatchPlan:
    dims: tuple  # volume dims after padding up to the patch size
    patch_dims: tuple
    offsets: list = field(default_factory=list)
    weights: str = "uniform"

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "patch_dims": list(self.patch_dims),
            "offsets": [list(o) for o in self.offsets],
            "weights": self.weights,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dims"]), tuple(d["patch_dims"]), [tuple(o) for o in d["offsets"]], d.get("weights", "uniform"))


def _axis_offsets(n: int, p: int, stride: int) -> list:
    if n <= p:
        return [0]
    offs = list(range(0, n - p + 1, stride))
    if offs[-1] != n - p:
        offs.append(n - p)
    return offs


def plan_patches(dims, patch=PATCH_SIZE, step_fraction: float = 0.5, weights: str = "uniform") -> PatchPlan:
    """Sliding-window offsets; volumes smaller than a patch are padded up to it."""
    if not 0 < step_fraction <= 1:
        raise VolumeError(f"step_fraction must lie in (0, 1], got {step_fraction}")
    if weights not in ("uniform", "gaussian"):
        raise VolumeError(f"unknown weighting {weights!r}")
    dims = tuple(int(n) for n in dims)
    patch = tuple(int(p) for p in patch)
    if any(n < 1 for n in dims) or any(p < 1 for p in patch):
        raise VolumeError(f"dims and patch must be positive, got {dims}, {patch}")
    padded = tuple(max(n, p) for n, p in zip(dims, patch))
    per_axis = [
        _axis_offsets(n, p, max(1, math.ceil(p * step_fraction)))
        for n, p in zip(padded, patch)
    ]
    offsets = [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]
    return PatchPlan(padded, patch, offsets, weights)


def extract_patches(v: Volume, plan: PatchPlan) -> list:
    return [(o, extract_region(v, o, plan.patch_dims)) for o in plan.offsets]


def gaussian_weights(patch_dims) -> np.ndarray:
    """Separable Gaussian importance map, sigma = patch / 8, centred."""
    w = np.ones(tuple(patch_dims))
    for ax, p in enumerate(patch_dims):
        x = np.arange(p) - (p - 1) / 2
        g = np.exp(-0.5 * (x / (p / 8)) ** 2)
        shape = [1, 1, 1]
        shape[ax] = p
        w = w * g.reshape(shape)
    return w


def stitch(patches, dims, weights: str = "uniform") -> np.ndarray:
    """Weighted average of overlapping per-patch probabilities.

    ``patches`` is a list of ``(offset, array)`` with arrays shaped
    ``patch_dims + (C,)``. Returns a float32 ``dims + (C,)`` array whose class
    probabilities sum to one at every voxel.
    """
    if not patches:
        raise VolumeError("no patches to stitch")
    dims = tuple(int(n) for n in dims)
    n_classes = np.asarray(patches[0][1]).shape[-1]
    acc = np.zeros(dims + (n_classes,), dtype=np.float64)
    wsum = np.zeros(dims, dtype=np.float64)
    cache = {}
    for off, arr in patches:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[-1] != n_classes:
            raise VolumeError(f"class-count mismatch: expected {n_classes} channels, got shape {arr.shape}")
        pd = arr.shape[:3]
        if any(o < 0 or o + p > n for o, p, n in zip(off, pd, dims)):
            raise VolumeError(f"patch at {tuple(off)} with size {pd} is out of bounds for {dims}")
        if weights == "gaussian":
            if pd not in cache:
                cache[pd] = gaussian_weights(pd)
            w = cache[pd]
        elif weights == "uniform":
            w = np.ones(pd)
        else:
            raise VolumeError(f"unknown weighting {weights!r}")
        sl = tuple(slice(o, o + p) for o, p in zip(off, pd))
        acc[sl] += arr * w[..., None]
        wsum[sl] += w
    if np.any(wsum == 0):
        raise VolumeError("patches do not cover the whole volume")
    acc /= wsum[..., None]
    total = acc.sum(axis=-1, keepdims=True)
    total = np.where(total > 0, total, 1.0)
    return (acc / total).astype(np.float32)
