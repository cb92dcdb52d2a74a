"""Rigid test-time-augmentation transforms and two ways to undo them.

A transform maps a voxel coordinate p to ``R (p - c) + c + t`` where c is the
geometric centre ((n - 1) / 2 per axis), ``R = Rz @ Ry @ Rx`` (x rotation
applied first) and t a translation in voxels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _rng
from .volume import NON_ANNOTATED, Volume, check_binary, require_same_dims

MAX_ANGLE_DEG = 18.0
MAX_SHIFT_VOX = 5.0


@dataclass(frozen=True)
class RigidTransform:
    euler_deg: tuple = (0.0, 0.0, 0.0)
    translation_vox: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def rotation(self) -> np.ndarray:
        ax, ay, az = np.deg2rad(np.asarray(self.euler_deg, dtype=float))
        cx, sx = np.cos(ax), np.sin(ax)
        cy, sy = np.cos(ay), np.sin(ay)
        cz, sz = np.cos(az), np.sin(az)
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return rz @ ry @ rx

    def forward_points(self, pts, dims) -> np.ndarray:
        c = (np.asarray(dims, dtype=float) - 1) / 2
        t = np.asarray(self.translation_vox, dtype=float)
        return (np.asarray(pts, dtype=float) - c) @ self.rotation().T + c + t

    def inverse_points(self, pts, dims) -> np.ndarray:
        c = (np.asarray(dims, dtype=float) - 1) / 2
        t = np.asarray(self.translation_vox, dtype=float)
        return (np.asarray(pts, dtype=float) - c - t) @ self.rotation() + c

    def to_dict(self) -> dict:
        return {"euler_deg": [float(a) for a in self.euler_deg],
                "translation_vox": [float(x) for x in self.translation_vox]}


def sample_tta_transform(rng_seed: int, index: int) -> RigidTransform:
    """Transform ``index`` of the stream keyed by ``rng_seed``; draw j hashes (seed, index, j)."""
    u = _rng.uniform(int(rng_seed), int(index), np.arange(6))
    angles = -MAX_ANGLE_DEG + 2 * MAX_ANGLE_DEG * u[:3]
    shifts = -MAX_SHIFT_VOX + 2 * MAX_SHIFT_VOX * u[3:]
    return RigidTransform(tuple(float(a) for a in angles), tuple(float(s) for s in shifts))


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


@lru_cache(maxsize=4)
def _grid(dims) -> np.ndarray:
    """All voxel coordinates, x-fastest, shape (V, 3); shared and read-only."""
    g = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    out = np.stack([a.ravel(order="F") for a in g], axis=1).astype(float)
    out.flags.writeable = False
    return out


def _gather(arr: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Nearest-neighbour lookup of ``arr`` at real ``coords``; outside -> 0."""
    idx = round_half_away(coords)
    dims = np.asarray(arr.shape)
    ok = np.all((idx >= 0) & (idx < dims), axis=1)
    out = np.zeros(len(coords), dtype=arr.dtype)
    i = idx[ok]
    out[ok] = arr[i[:, 0], i[:, 1], i[:, 2]]
    return out


def apply_forward(labels: Volume, t: RigidTransform) -> Volume:
    """Resample ``labels`` into the transformed frame (pull-back, nearest neighbour)."""
    dims = labels.dims
    src = t.inverse_points(_grid(dims), dims)
    out = _gather(labels.data, src)
    return labels.with_data(out.reshape(dims, order="F"))


def invert_standard(pred: Volume, t: RigidTransform) -> Volume:
    """Affine inverse: resample ``pred`` with the inverse transform, nearest neighbour."""
    dims = pred.dims
    src = t.forward_points(_grid(dims), dims)
    out = _gather(pred.data, src)
    return pred.with_data(out.reshape(dims, order="F"))


def _search_offsets(radius: int) -> np.ndarray:
    # by distance, then by linear index of the candidate (z, y, x significance)
    ax = np.arange(-radius, radius + 1)
    o = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    d2 = (o * o).sum(1)
    return o[np.lexsort((o[:, 0], o[:, 1], o[:, 2], d2))]


def invert_coordinate_guided(pred: Volume, t: RigidTransform, original_seg: Volume,
                             search_radius: int = 2) -> Volume:
    """Map each segmented voxel forward, round, and read the prediction there.

    When the rounded position is outside the grid or holds background, the
    nearest non-background prediction within Chebyshev ``search_radius`` is used
    instead; if there is none the voxel becomes non-annotated.
    """
    require_same_dims(pred, original_seg, "prediction and segmentation")
    check_binary(original_seg)
    dims = pred.dims
    D = np.asarray(dims)
    mask = original_seg.data.astype(bool)
    vox = np.argwhere(mask)
    out = np.zeros(dims, dtype=pred.data.dtype)
    if len(vox) == 0:
        return pred.with_data(out)

    p = round_half_away(t.forward_points(vox, dims))
    got = np.zeros(len(vox), dtype=pred.data.dtype)
    todo = np.ones(len(vox), dtype=bool)
    for off in _search_offsets(int(search_radius)):
        if not todo.any():
            break
        cand = p[todo] + off
        ok = np.all((cand >= 0) & (cand < D), axis=1)
        val = np.zeros(len(cand), dtype=pred.data.dtype)
        c = cand[ok]
        val[ok] = pred.data[c[:, 0], c[:, 1], c[:, 2]]
        hit = val != 0
        where = np.flatnonzero(todo)[hit]
        got[where] = val[hit]
        todo[where] = False
    got[todo] = NON_ANNOTATED
    out[tuple(vox.T)] = got
    return pred.with_data(out)


def misassigned_fraction(original: Volume, recovered: Volume) -> float:
    """Share of non-background voxels of ``original`` whose label changed."""
    require_same_dims(original, recovered)
    m = original.data != 0
    n = int(m.sum())
    if n == 0:
        return 0.0
    return float(np.count_nonzero(recovered.data[m] != original.data[m]) / n)
