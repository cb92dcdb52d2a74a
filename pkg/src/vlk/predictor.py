"""Voxel classifiers behind one interface.

A predictor is any callable ``predictor(seg: Volume) -> Prediction``. Predictors
that carry annotations in image space (the oracles) also implement
``transformed(t, dims, index)`` so test-time augmentation can move the
annotations with the image.

External models plug in through files: the segmentation is written to ``{in}``
with :func:`vlk.volume.write_volume`, the command is run, and class k's
probability volume is read back from ``{out}.c<k>``.
"""

from __future__ import annotations

import shlex
import subprocess
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _rng
from .labeling import assign_voxel_labels
from .phantom import CenterlineSet
from .volume import NON_ANNOTATED, NUM_CLASSES, Volume, VolumeError, VolumeFormatError, read_volume, write_volume

NORMALIZATION_TOL = 1e-5
RENORMALIZE_TOL = 1e-3


class PredictorError(RuntimeError):
    pass


class ExternalPredictorError(PredictorError):
    def __init__(self, message, returncode=None, stdout="", stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr


class PredictorProtocolError(PredictorError):
    pass


class NormalizationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray  # (nx, ny, nz, C) float32
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        p = np.asarray(self.probabilities)
        if p.ndim != 4 or p.shape[-1] != NUM_CLASSES:
            raise VolumeError(f"prediction must have shape (nx, ny, nz, {NUM_CLASSES}), got {p.shape}")
        if np.any(p < 0):
            raise VolumeError("prediction has negative probabilities")
        dev = float(np.abs(p.sum(axis=-1, dtype=np.float64) - 1.0).max())
        if dev > NORMALIZATION_TOL:
            raise VolumeError(f"probabilities do not sum to 1 (max deviation {dev:.3g})")

    @classmethod
    def one_hot(cls, labels: Volume) -> "Prediction":
        probs = np.zeros(labels.dims + (NUM_CLASSES,), dtype=np.float32)
        np.put_along_axis(probs, labels.data[..., None].astype(np.int64), 1.0, axis=-1)
        return cls(probs, labels.spacing)

    @property
    def dims(self):
        return tuple(self.probabilities.shape[:3])

    def labels(self) -> Volume:
        """Hard labels; argmax ties go to the smaller class id."""
        return Volume(np.argmax(self.probabilities, axis=-1).astype(np.uint8), self.spacing)


def oracle_predict(seg: Volume, centerlines: CenterlineSet, neighborhood: int = 7) -> Prediction:
    return Prediction.one_hot(assign_voxel_labels(seg, centerlines, neighborhood))


def _flip_labels(labels: Volume, flip_rate: float, seed: int) -> Volume:
    flat = labels.flat().copy()
    fg = np.flatnonzero(flat)
    if flip_rate > 0 and fg.size:
        flip = _rng.uniform(int(seed), fg, 0) < flip_rate
        new = 1 + np.floor(_rng.uniform(int(seed), fg, 1) * 10).astype(np.uint8)
        flat[fg[flip]] = new[flip]
    return Volume.from_flat(labels.dims, flat, labels.spacing)


def noisy_oracle_predict(seg: Volume, centerlines: CenterlineSet, flip_rate: float, seed: int,
                         neighborhood: int = 7) -> Prediction:
    """Oracle labels with each foreground voxel redrawn from classes 1..10 at ``flip_rate``.

    The flip decision and the replacement class of voxel i depend only on
    (seed, i), where i is the x-fastest linear index.
    """
    if not 0 <= flip_rate < 1:
        raise ValueError(f"flip_rate must lie in [0, 1), got {flip_rate}")
    return Prediction.one_hot(_flip_labels(assign_voxel_labels(seg, centerlines, neighborhood), flip_rate, seed))


def pulled_back_labels(seg_t: Volume, centerlines: CenterlineSet, t, neighborhood: int = 7) -> Volume:
    """Label an augmented segmentation with annotations from the original frame.

    Each foreground voxel o of ``seg_t`` takes the labeling rule evaluated at its
    source voxel round(t^-1(o)), so the result equals the augmented ground truth
    ``apply_forward(assign_voxel_labels(seg, centerlines), t)``.
    """
    from .transforms import round_half_away

    dims = seg_t.dims
    fg = np.argwhere(seg_t.data != 0)
    out = np.zeros(dims, dtype=np.uint8)
    if len(fg) == 0:
        return seg_t.with_data(out)
    src = round_half_away(t.inverse_points(fg, dims))
    ok = np.all((src >= 0) & (src < np.asarray(dims)), axis=1)
    mask = np.zeros(dims, dtype=np.uint8)
    mask[tuple(src[ok].T)] = 1
    lab = assign_voxel_labels(Volume(mask, seg_t.spacing), centerlines, neighborhood).data
    vals = np.full(len(fg), NON_ANNOTATED, dtype=np.uint8)
    vals[ok] = lab[tuple(src[ok].T)]
    out[tuple(fg.T)] = vals
    return seg_t.with_data(out)


class OraclePredictor:
    """Exact labels from centerlines.

    Under augmentation (``transformed``) it stays equivariant: it labels the
    augmented input as the augmented ground truth, so any disagreement after
    inversion is inversion error alone.
    """

    def __init__(self, centerlines: CenterlineSet, neighborhood: int = 7, transform=None):
        self.centerlines = centerlines
        self.neighborhood = neighborhood
        self.transform = transform

    def _labels(self, seg: Volume) -> Volume:
        if self.transform is None:
            return assign_voxel_labels(seg, self.centerlines, self.neighborhood)
        return pulled_back_labels(seg, self.centerlines, self.transform, self.neighborhood)

    def __call__(self, seg: Volume) -> Prediction:
        return Prediction.one_hot(self._labels(seg))

    def transformed(self, t, dims=None, index: int = 0):
        return type(self)(self.centerlines, self.neighborhood, t)


class NoisyOraclePredictor(OraclePredictor):
    def __init__(self, centerlines: CenterlineSet, flip_rate: float, seed: int, neighborhood: int = 7,
                 transform=None):
        if not 0 <= flip_rate < 1:
            raise ValueError(f"flip_rate must lie in [0, 1), got {flip_rate}")
        super().__init__(centerlines, neighborhood, transform)
        self.flip_rate = flip_rate
        self.seed = seed

    def __call__(self, seg: Volume) -> Prediction:
        return Prediction.one_hot(_flip_labels(self._labels(seg), self.flip_rate, self.seed))

    def transformed(self, t, dims=None, index: int = 0):
        # each augmented copy draws its own noise
        seed = int(_rng.hash64(int(self.seed), int(index)))
        return type(self)(self.centerlines, self.flip_rate, seed, self.neighborhood, t)


def channel_path(out, k: int) -> Path:
    out = Path(out)
    return out.with_name(f"{out.name}.c{k}")


def write_prediction(pred: Prediction, out) -> None:
    """Store a prediction as one float32 volume per class at ``<out>.c<k>``."""
    for k in range(NUM_CLASSES):
        write_volume(Volume(np.ascontiguousarray(pred.probabilities[..., k]), pred.spacing), channel_path(out, k))


def read_prediction(out, dims=None) -> Prediction:
    chans = []
    for k in range(NUM_CLASSES):
        path = channel_path(out, k)
        try:
            v = read_volume(path)
        except VolumeFormatError as exc:
            raise PredictorProtocolError(f"missing or invalid probability channel {k}: {exc}") from exc
        if v.dtype != "float32":
            raise PredictorProtocolError(f"channel {k} ({path}) must be float32, got {v.dtype}")
        if dims is not None and v.dims != tuple(dims):
            raise PredictorProtocolError(f"channel {k} ({path}) has dims {v.dims}, expected {tuple(dims)}")
        chans.append(v)
    if len({c.dims for c in chans}) != 1:
        raise PredictorProtocolError("probability channels disagree on dims")
    probs = np.stack([c.data for c in chans], axis=-1).astype(np.float32)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise PredictorProtocolError("probabilities must be finite and non-negative")
    total = probs.sum(axis=-1, dtype=np.float64)
    dev = float(np.abs(total - 1.0).max())
    if dev > RENORMALIZE_TOL:
        raise PredictorProtocolError(f"probabilities do not sum to 1 (max deviation {dev:.3g})")
    if dev > NORMALIZATION_TOL:
        warnings.warn(f"renormalizing external probabilities (max deviation {dev:.3g})", NormalizationWarning)
        probs = (probs / total[..., None]).astype(np.float32)
    return Prediction(probs, chans[0].spacing)


def build_command(command_template: str, in_path, out_path) -> list:
    if "{in}" not in command_template or "{out}" not in command_template:
        raise PredictorError("command template must contain {in} and {out} placeholders")
    return [tok.replace("{in}", str(in_path)).replace("{out}", str(out_path))
            for tok in shlex.split(command_template)]


def subprocess_predict(seg_path, command_template: str, out_path=None, timeout=None) -> Prediction:
    """Run an external predictor on the volume stored at ``seg_path``."""
    seg = read_volume(seg_path)
    if out_path is None:
        out_path = Path(str(seg_path) + "_pred")
    argv = build_command(command_template, seg_path, out_path)
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise ExternalPredictorError(f"could not run external predictor {argv[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise ExternalPredictorError(
            f"external predictor exited with status {proc.returncode}: {proc.stderr.strip()[-2000:]}",
            proc.returncode, proc.stdout, proc.stderr,
        )
    return read_prediction(out_path, seg.dims)


class SubprocessPredictor:
    """Callable wrapper writing each input to a fresh scratch directory."""

    def __init__(self, command_template: str, scratch_dir=None, timeout=None):
        build_command(command_template, "in", "out")  # validate placeholders early
        self.command_template = command_template
        self.scratch_dir = scratch_dir
        self.timeout = timeout

    def __call__(self, seg: Volume) -> Prediction:
        with tempfile.TemporaryDirectory(dir=self.scratch_dir) as tmp:
            seg_path = Path(tmp) / "seg"
            write_volume(seg, seg_path)
            return subprocess_predict(seg_path, self.command_template, Path(tmp) / "pred", self.timeout)
