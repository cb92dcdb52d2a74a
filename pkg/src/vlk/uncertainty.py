"""Test-time augmentation: K augmented predictions, inverted, then reduced to a
consensus label map and a per-voxel uncertainty map.

Uncertainty is ``sqrt(1 - sum_c f_c**2)`` with f_c the share of the K
predictions voting for class c, i.e. the square root of the summed one-hot
(Bernoulli) variances. It is 0 where all predictions agree and at most
``sqrt(1 - 1/C)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._parallel import ordered_map
from .transforms import (RigidTransform, apply_forward, invert_coordinate_guided, invert_standard,
                         sample_tta_transform)
from .volume import NUM_CLASSES, Volume, VolumeError, check_binary

MODES = ("standard", "coordinate_guided")
DEFAULT_K = 7


class TTAError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"test-time augmentation failed at transform {index}: {cause}")
        self.index = index


def normalize_mode(mode: str) -> str:
    m = mode.replace("-", "_")
    if m not in MODES:
        raise ValueError(f"unknown inversion mode {mode!r}; expected one of {MODES}")
    return m


@dataclass(frozen=True)
class PredictionStack:
    layers: np.ndarray  # (K, nx, ny, nz) uint8, already inverted to the original frame
    transforms: tuple
    mode: str
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.layers.ndim != 4 or self.layers.shape[0] < 2:
            raise VolumeError(f"a prediction stack needs K >= 2 layers of equal dims, got shape {self.layers.shape}")
        if len(self.transforms) != self.layers.shape[0]:
            raise VolumeError("one transform per layer is required")

    @classmethod
    def from_volumes(cls, volumes, transforms=None, mode="coordinate_guided") -> "PredictionStack":
        if len({v.dims for v in volumes}) > 1:
            raise VolumeError("stack layers disagree on dims")
        layers = np.stack([v.data for v in volumes]).astype(np.uint8)
        if transforms is None:
            transforms = (RigidTransform.identity(),) * len(volumes)
        return cls(layers, tuple(transforms), normalize_mode(mode), volumes[0].spacing)

    @property
    def k(self) -> int:
        return self.layers.shape[0]

    def layer(self, i) -> Volume:
        return Volume(self.layers[i], self.spacing)

    def __eq__(self, other):
        if not isinstance(other, PredictionStack):
            return NotImplemented
        return (self.mode == other.mode and self.transforms == other.transforms
                and self.spacing == other.spacing and self.layers.shape == other.layers.shape
                and self.layers.tobytes() == other.layers.tobytes())


def run_tta(seg: Volume, predictor, k: int = DEFAULT_K, seed: int = 0, mode: str = "coordinate_guided",
            transforms=None) -> PredictionStack:
    """Augment, predict, take hard labels and invert, ``k`` times.

    ``transforms`` overrides the seeded sampler (e.g. identities in tests).
    Predictors exposing ``transformed(t, dims, index)`` are re-framed per copy.
    """
    mode = normalize_mode(mode)
    check_binary(seg)
    if transforms is None:
        if k < 2:
            raise ValueError(f"K must be >= 2, got {k}")
        transforms = [sample_tta_transform(seed, i) for i in range(k)]
    transforms = tuple(transforms)
    if len(transforms) < 2:
        raise ValueError("K must be >= 2")

    def one(i):
        t = transforms[i]
        try:
            model = predictor.transformed(t, seg.dims, i) if hasattr(predictor, "transformed") else predictor
            labels = model(apply_forward(seg, t)).labels()
            if mode == "standard":
                return invert_standard(labels, t).data
            return invert_coordinate_guided(labels, t, seg).data
        except Exception as exc:
            raise TTAError(i, exc) from exc

    layers = np.stack(ordered_map(one, range(len(transforms))))
    return PredictionStack(layers, transforms, mode, seg.spacing)


def vote_fractions(stack: PredictionStack) -> np.ndarray:
    """(C, nx, ny, nz) share of layers voting each class."""
    counts = np.stack([(stack.layers == c).sum(axis=0) for c in range(NUM_CLASSES)])
    return counts / float(stack.k)


def stack_statistics(stack: PredictionStack):
    """Modal labels (ties to the smaller id) and float64 uncertainty arrays."""
    f = vote_fractions(stack)
    labels = np.argmax(f, axis=0).astype(np.uint8)
    unc = np.sqrt(np.clip(1.0 - (f * f).sum(axis=0), 0.0, None))
    return labels, unc


def consensus_and_uncertainty(stack: PredictionStack):
    """``(labels, uncertainty)`` volumes; uncertainty is stored as float32."""
    labels, unc = stack_statistics(stack)
    return Volume(labels, stack.spacing), Volume(unc.astype(np.float32), stack.spacing)
