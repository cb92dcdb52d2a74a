"""Voxel labels from labeled centerlines.

Every foreground voxel takes the label of the Euclidean-closest centerline point
lying inside the cube of ``neighborhood`` whole voxels centred on it; voxels
with no such point become non-annotated (10). Distances are in voxel units.
"""

from __future__ import annotations

import numpy as np

from .phantom import CenterlineSet
from .volume import NON_ANNOTATED, Volume, VolumeError, check_binary


def cube_reach(neighborhood: int) -> float:
    """Largest per-axis offset |p - v| at which a point is inside the cube."""
    return (neighborhood - 1) / 2 + 0.5


def assign_voxel_labels(segmentation: Volume, centerlines: CenterlineSet, neighborhood: int = 7,
                        chunk: int = 256) -> Volume:
    if int(neighborhood) != neighborhood or neighborhood < 1 or neighborhood % 2 == 0:
        raise VolumeError(f"neighborhood must be an odd positive integer, got {neighborhood}")
    check_binary(segmentation)
    centerlines.check_labels()

    fg = segmentation.data.astype(bool)
    dims = np.asarray(segmentation.dims)
    out = np.where(fg, NON_ANNOTATED, 0).astype(np.uint8)
    pts, labs = centerlines.stacked()
    if len(pts) == 0 or not fg.any():
        return segmentation.with_data(out)

    reach = cube_reach(neighborhood)
    # every voxel a point can reach lies in this block of offsets around floor(p)
    k = int(np.floor(reach)) + 1
    ax = np.arange(-k, k + 1)
    offs = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)

    vox_keys, d2_all, lab_all = [], [], []
    nx, ny, _ = dims
    for i0 in range(0, len(pts), chunk):
        p, lb = pts[i0:i0 + chunk], labs[i0:i0 + chunk]
        v = np.floor(p)[:, None, :].astype(np.int64) + offs[None]
        diff = p[:, None, :] - v
        ok = np.all(np.abs(diff) <= reach, axis=-1)
        ok &= np.all((v >= 0) & (v < dims), axis=-1)
        vi, oi = np.nonzero(ok)
        vv = v[vi, oi]
        keep = fg[vv[:, 0], vv[:, 1], vv[:, 2]]
        vi, oi, vv = vi[keep], oi[keep], vv[keep]
        d = diff[vi, oi]
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        vox_keys.append(vv[:, 0] + nx * (vv[:, 1] + ny * vv[:, 2]))
        d2_all.append(d2)
        lab_all.append(lb[vi])

    key = np.concatenate(vox_keys)
    if key.size == 0:
        return segmentation.with_data(out)
    d2 = np.concatenate(d2_all)
    lab = np.concatenate(lab_all)
    order = np.lexsort((lab, d2, key))
    key, lab = key[order], lab[order]
    first = np.ones(len(key), dtype=bool)
    first[1:] = key[1:] != key[:-1]
    flat = out.ravel(order="F")
    flat[key[first]] = lab[first]
    return segmentation.with_data(flat.reshape(out.shape, order="F"))
