"""Labeling metrics and the training losses as pure functions.

Predictions are either :class:`~vlk.predictor.Prediction` probabilities, a
``(..., C)`` probability array, or a hard label :class:`~vlk.volume.Volume`
(treated as one-hot).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .predictor import Prediction
from .volume import NUM_CLASSES, VESSEL_LABELS, Volume, VolumeError

CE_EPS = 1e-7


def _probs(pred, n_classes=NUM_CLASSES) -> np.ndarray:
    if isinstance(pred, Prediction):
        return np.asarray(pred.probabilities, dtype=np.float64)
    if isinstance(pred, Volume):
        return _one_hot(pred.data, n_classes)
    arr = np.asarray(pred)
    if arr.dtype == np.uint8:
        return _one_hot(arr, n_classes)
    return arr.astype(np.float64)


def _one_hot(labels: np.ndarray, n_classes=NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) >= n_classes:
        raise VolumeError(f"label {int(labels.max())} outside [0, {n_classes - 1}]")
    return (labels[..., None] == np.arange(n_classes)).astype(np.float64)


def _gt(gt, n_classes=NUM_CLASSES) -> np.ndarray:
    if isinstance(gt, Volume):
        return _one_hot(gt.data, n_classes)
    arr = np.asarray(gt)
    if arr.dtype == np.uint8 or np.issubdtype(arr.dtype, np.integer):
        return _one_hot(arr, n_classes)
    return arr.astype(np.float64)


def _pair(pred, gt):
    p, g = _probs(pred), _gt(gt)
    if p.shape != g.shape:
        raise VolumeError(f"shape mismatch between prediction {p.shape[:-1]} and ground truth {g.shape[:-1]}")
    return p, g


def _dice(p: np.ndarray, g: np.ndarray) -> float:
    inter = float(np.sum(p * g))
    denom = float(np.sum(p) + np.sum(g))
    if denom == 0:
        return 1.0  # class absent from both
    return 2.0 * inter / denom


def dice_per_class(pred, gt, c: int) -> float:
    """Soft Dice of class ``c``; 1.0 when the class is absent from both sides."""
    p, g = _pair(pred, gt)
    if not 0 <= c < p.shape[-1]:
        raise VolumeError(f"class {c} outside [0, {p.shape[-1] - 1}]")
    return _dice(p[..., c], g[..., c])


def dice_scores(pred, gt, skip_absent=False) -> dict:
    """Per-class Dice; classes absent from both are 1.0, or omitted with ``skip_absent``."""
    p, g = _pair(pred, gt)
    out = {}
    for c in range(p.shape[-1]):
        if skip_absent and not (p[..., c].any() or g[..., c].any()):
            continue
        out[c] = _dice(p[..., c], g[..., c])
    return out


def dice_loss(pred, gt, include_background=True) -> float:
    """One minus the class-averaged Dice over all C classes (class 0 optional)."""
    p, g = _pair(pred, gt)
    classes = range(0 if include_background else 1, p.shape[-1])
    return 1.0 - float(np.mean([_dice(p[..., c], g[..., c]) for c in classes]))


def cross_entropy(pred, gt) -> float:
    """Voxel-mean cross-entropy; probabilities clamped to [1e-7, 1] before the log."""
    p, g = _pair(pred, gt)
    n = int(np.prod(p.shape[:-1]))
    logp = np.log(np.clip(p, CE_EPS, 1.0))
    return float(-np.sum(g * logp) / n)


@dataclass(frozen=True)
class LossScheduleParams:
    beta: int
    gamma: int
    total: int

    def __post_init__(self):
        if not 0 < self.beta < self.gamma <= self.total:
            raise ValueError(f"need 0 < beta < gamma <= total, got {self.beta}, {self.gamma}, {self.total}")


def alpha(epoch, params: LossScheduleParams) -> float:
    """Cross-entropy weight while blending: 0.9 just after beta, falling to 0.1 at gamma.

    Defined on [beta, gamma]; at beta it returns the limit from above.
    """
    b, g = params.beta, params.gamma
    if not b <= epoch <= g:
        raise ValueError(f"epoch {epoch} outside the blending range ({b}, {g}]")
    return 0.8 * (1.0 - (epoch - b) / (g - b)) + 0.1


def hybrid_weights(epoch, params: LossScheduleParams):
    """``(w_ce, w_dice)`` for the three-regime schedule."""
    if epoch < 0 or epoch > params.total:
        raise ValueError(f"epoch {epoch} outside [0, {params.total}]")
    if epoch <= params.beta:
        return 1.0, 0.0
    if epoch <= params.gamma:
        a = alpha(epoch, params)
        return a, 1.0 - a
    return 0.1, 0.9


def hybrid_loss(pred, gt, epoch, params: LossScheduleParams) -> float:
    w_ce, w_dice = hybrid_weights(epoch, params)
    ce = cross_entropy(pred, gt)
    if w_dice == 0.0:
        return ce
    return w_ce * ce + w_dice * dice_loss(pred, gt)


def surface_points(region: np.ndarray) -> np.ndarray:
    """Voxels of ``region`` with a 6-neighbour outside it (grid edge counts as outside)."""
    r = np.pad(np.asarray(region, dtype=bool), 1, constant_values=False)
    core = r[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    for ax in range(3):
        for step in (-1, 1):
            interior &= np.roll(r, step, axis=ax)[1:-1, 1:-1, 1:-1]
    return np.argwhere(core & ~interior)


def asd(a, b, spacing=None) -> float:
    """Symmetric average surface distance in mm between two binary regions."""
    if isinstance(a, Volume):
        spacing = a.spacing if spacing is None else spacing
        a = a.data
    if isinstance(b, Volume):
        b = b.data
    spacing = np.asarray((1.0, 1.0, 1.0) if spacing is None else spacing, dtype=float)
    a, b = np.asarray(a) != 0, np.asarray(b) != 0
    if a.shape != b.shape:
        raise VolumeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise VolumeError("ASD is undefined for an empty region")
    sa = surface_points(a) * spacing
    sb = surface_points(b) * spacing
    da, _ = cKDTree(sb).query(sa)
    db, _ = cKDTree(sa).query(sb)
    return float((da.sum() + db.sum()) / (len(sa) + len(sb)))


def evaluate_labels(pred: Volume, gt: Volume) -> dict:
    """Dice and ASD per class for hard label maps, plus means over vessels 1-9.

    ASD is ``None`` for classes missing from either side. Vessel means skip
    classes absent from the ground truth.
    """
    if pred.dims != gt.dims:
        raise VolumeError(f"shape mismatch between prediction {pred.dims} and ground truth {gt.dims}")
    dice = dice_scores(pred, gt)
    out_dice, out_asd = {}, {}
    for c in range(NUM_CLASSES):
        pa, ga = pred.data == c, gt.data == c
        out_dice[c] = dice[c]
        out_asd[c] = asd(pa, ga, gt.spacing) if pa.any() and ga.any() else None
    present = [c for c in VESSEL_LABELS if (gt.data == c).any()]
    asd_vals = [out_asd[c] for c in present if out_asd[c] is not None]
    return {
        "dice": out_dice,
        "asd_mm": out_asd,
        "mean_dice_vessels": float(np.mean([out_dice[c] for c in present])) if present else None,
        "mean_asd_mm_vessels": float(np.mean(asd_vals)) if asd_vals else None,
        "vessels_evaluated": present,
    }
