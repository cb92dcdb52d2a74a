"""Velocity agreement between two labelings of the same flow data."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .volume import Volume, VolumeError

LOA_Z = 1.96
EXACT_MAX_N = 12


class EmptyRegionError(VolumeError):
    pass


def _blocks(arr: np.ndarray, fill):
    """Pad to even dims with ``fill`` and expose 2x2x2 blocks as the last axis."""
    pads = [(0, n % 2) for n in arr.shape]
    a = np.pad(arr, pads, constant_values=fill)
    nx, ny, nz = (n // 2 for n in a.shape)
    a = a.reshape(nx, 2, ny, 2, nz, 2).transpose(0, 2, 4, 1, 3, 5)
    return a.reshape(nx, ny, nz, 8)


def downsample2_labels(labels: Volume) -> Volume:
    """Modal label of each 2x2x2 block (ties to the smaller id); partial edge blocks allowed."""
    if labels.dtype != "uint8":
        raise VolumeError("label volume must be uint8")
    data = labels.data.astype(np.int16)
    b = _blocks(data, -1)
    present = np.unique(data)
    counts = np.stack([(b == c).sum(axis=-1) for c in present], axis=-1)
    out = present[np.argmax(counts, axis=-1)].astype(np.uint8)
    return Volume(out, tuple(2 * s for s in labels.spacing))


def downsample2_field(field: Volume) -> Volume:
    """Mean of each 2x2x2 block over the voxels it actually contains."""
    b = _blocks(field.data.astype(np.float64), np.nan)
    return Volume(np.nanmean(b, axis=-1).astype(np.float32), tuple(2 * s for s in field.spacing))


def region_mean(field: Volume, labels: Volume, c: int) -> float:
    if field.dims != labels.dims:
        raise VolumeError(f"shape mismatch between field {field.dims} and labels {labels.dims}")
    m = labels.data == c
    if not m.any():
        raise EmptyRegionError(f"class {c} has no voxels")
    return float(field.data[m].astype(np.float64).mean())


@dataclass
class AgreementReport:
    n: int
    bias: float
    sd: float
    loa_low: float
    loa_high: float
    loa_width: float
    mean_abs_diff: float
    units: str = "native"
    wilcoxon_p: float | None = None

    def to_dict(self):
        return asdict(self)


def _pairs(pairs):
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("pairs must be a sequence of (manual, auto)")
    return arr[:, 0], arr[:, 1]


def differences(pairs, percent_of_mean=False, normalize="pair") -> np.ndarray:
    """``auto - manual``, optionally as a percentage of the pair mean or grand mean."""
    manual, auto = _pairs(pairs)
    d = auto - manual
    if not percent_of_mean:
        return d
    if normalize == "pair":
        ref = (auto + manual) / 2
    elif normalize == "grand":
        ref = np.full_like(d, np.mean((auto + manual) / 2))
    else:
        raise ValueError(f"unknown normalization {normalize!r}")
    if np.any(ref == 0):
        raise ValueError("percent differences need non-zero means")
    return 100.0 * d / ref


def bland_altman(pairs, percent_of_mean=False, normalize="pair") -> AgreementReport:
    """Bias and 95 % limits of agreement (bias +- 1.96 SD, SD with n - 1)."""
    d = differences(pairs, percent_of_mean, normalize)
    if len(d) < 2:
        raise ValueError("Bland-Altman analysis needs at least 2 pairs")
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    lo, hi = bias - LOA_Z * sd, bias + LOA_Z * sd
    return AgreementReport(
        n=len(d), bias=bias, sd=sd, loa_low=lo, loa_high=hi, loa_width=hi - lo,
        mean_abs_diff=float(np.abs(d).mean()),
        units="percent" if percent_of_mean else "native",
    )


def scatter_points(pairs, percent_of_mean=False, normalize="pair"):
    """(pair mean, difference) rows for a Bland-Altman plot."""
    manual, auto = _pairs(pairs)
    return np.column_stack([(manual + auto) / 2, differences(pairs, percent_of_mean, normalize)])


def signed_ranks(d):
    """Average ranks of |d| (1-based) for the non-zero differences, with their signs."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    a = np.abs(d)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a))
    sa = a[order]
    i = 0
    while i < len(sa):
        j = i
        while j + 1 < len(sa) and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks, np.sign(d)


def _exact_p(ranks, w) -> float:
    n = len(ranks)
    signs = ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1).astype(float)
    wplus = signs @ ranks
    wmin = np.minimum(wplus, ranks.sum() - wplus)
    tol = 1e-9 * max(1.0, ranks.sum())
    return min(1.0, float(np.count_nonzero(wmin <= w + tol)) / (1 << n))


def _normal_p(ranks, w) -> float:
    n = len(ranks)
    mean = n * (n + 1) / 4
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(counts ** 3 - counts)) / 48
    if var <= 0:
        return 1.0
    z = (abs(w - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return min(1.0, math.erfc(z / math.sqrt(2)))


def wilcoxon_signed_rank(pairs=None, *, diffs=None, method="auto") -> float:
    """Two-sided p of the Wilcoxon signed-rank test on ``auto - manual``.

    Zero differences are dropped. With at most 12 left the null distribution is
    enumerated exactly; otherwise a tie-corrected normal approximation with
    continuity correction is used.
    """
    if diffs is None:
        if pairs is None or len(pairs) == 0:
            raise ValueError("Wilcoxon test needs at least one pair")
        manual, auto = _pairs(pairs)
        d = auto - manual
    else:
        d = np.asarray(diffs, dtype=float)
        if d.size == 0:
            raise ValueError("Wilcoxon test needs at least one difference")
    ranks, sign = signed_ranks(d)
    n = len(ranks)
    if n == 0:
        return 1.0
    wplus = float(ranks[sign > 0].sum())
    w = min(wplus, float(ranks.sum()) - wplus)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        return _exact_p(ranks, w)
    if method == "normal":
        return _normal_p(ranks, w)
    raise ValueError(f"unknown method {method!r}")


def agreement(pairs, percent_of_mean=False, normalize="pair") -> AgreementReport:
    """Bland-Altman report with the Wilcoxon p-value attached."""
    rep = bland_altman(pairs, percent_of_mean, normalize)
    rep.wilcoxon_p = wilcoxon_signed_rank(pairs)
    return rep

