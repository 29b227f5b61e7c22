"""Evaluation metrics and the per-pair CSV report.

All metrics are plain functions over arrays (Tensors are unwrapped).
evaluate_pair ties them together for one registered pair: intensity
metrics on [0,1]-mapped images, Dice on nearest-neighbour warped masks,
and the fold percentage of the field.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import warp as warp_mod
from .tensor import Tensor

CSV_HEADER = "pair,nmse,ssim,psnr_db,dice,fold_pct"
_COLUMNS = ("nmse", "ssim", "psnr_db", "dice", "fold_pct")

_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _pair(a, b, name):
    a, b = _arr(a).astype(np.float64), _arr(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError("%s: shapes %s and %s differ"
                         % (name, a.shape, b.shape))
    return a, b


def nmse(a, b) -> float:
    """Normalized mean squared error ||a-b||^2 / ||b||^2."""
    a, b = _pair(a, b, "nmse")
    denom = float(np.sum(b * b))
    if denom == 0.0:
        raise ValueError("nmse: reference has zero norm")
    return float(np.sum((a - b) ** 2) / denom)


def psnr(a, b, peak=1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf when the images match."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def ssim(a, b, window=8) -> float:
    """Mean local SSIM over all fully-inside windows, stride 1.

    Intensities are expected in [0,1] (L = 1); C1 = (0.01 L)^2 and
    C2 = (0.03 L)^2. The last two axes are spatial; anything leading is
    averaged over as well.
    """
    a, b = _pair(a, b, "ssim")
    if a.shape[-2] < window or a.shape[-1] < window:
        raise ValueError("ssim: image %s smaller than the %dx%d window"
                         % (a.shape, window, window))
    aw = np.lib.stride_tricks.sliding_window_view(
        a, (window, window), axis=(-2, -1))
    bw = np.lib.stride_tricks.sliding_window_view(
        b, (window, window), axis=(-2, -1))
    mu_a = aw.mean(axis=(-2, -1))
    mu_b = bw.mean(axis=(-2, -1))
    da = aw - mu_a[..., None, None]
    db = bw - mu_b[..., None, None]
    va = (da * da).mean(axis=(-2, -1))
    vb = (db * db).mean(axis=(-2, -1))
    cov = (da * db).mean(axis=(-2, -1))
    s = ((2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
         / ((mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (va + vb + _SSIM_C2)))
    return float(s.mean())


def dice(mask_a, mask_b) -> float:
    """Overlap 2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _pair(mask_a, mask_b, "dice")
    for m in (a, b):
        if not np.isin(np.unique(m), (0.0, 1.0)).all():
            raise ValueError("dice: mask is not binary")
    total = float(a.sum() + b.sum())
    if total == 0.0:
        return 1.0
    return float(2.0 * np.sum(a * b) / total)


def fold_percentage(field) -> float:
    return 100.0 * warp_mod.jacobian_fold_fraction(field)


@dataclass
class MetricReport:
    pair: str
    nmse: float
    ssim: float
    psnr_db: float
    dice: Optional[float]
    fold_pct: float


def evaluate_pair(sample, field, pair="0") -> MetricReport:
    """Metrics for one pair under one displacement field.

    Images are mapped from [-1,1] to [0,1] before the intensity metrics.
    Dice uses the same field with nearest-neighbour sampling; when the
    sample carries no masks the dice entry is None and its CSV cell is
    left empty.
    """
    # both images map through the same dtype so m = f stays bit-equal
    m01 = Tensor(((sample.m.data + 1.0) * 0.5).astype(sample.m.dtype))
    f01 = ((sample.f.data + 1.0) * 0.5).astype(sample.f.dtype)
    warped = warp_mod.warp(m01, field).data
    d = None
    if sample.mask_m is not None and sample.mask_f is not None:
        wm = warp_mod.warp_nearest(sample.mask_m, field).data
        assert np.isin(np.unique(wm), (0.0, 1.0)).all(), \
            "nearest-neighbour warp must keep masks binary"
        d = dice(wm, sample.mask_f)
    return MetricReport(pair=str(pair),
                        nmse=nmse(warped, f01),
                        ssim=ssim(warped, f01),
                        psnr_db=psnr(warped, f01, peak=1.0),
                        dice=d,
                        fold_pct=fold_percentage(field))


# -------------------------------------------------------------- CSV report

def _fmt(v):
    if v is None:
        return ""
    return "%.6g" % v


def format_row(report) -> str:
    return ",".join([report.pair] + [_fmt(getattr(report, c))
                                     for c in _COLUMNS])


def summarize(reports):
    """Per-column (mean, std) over the reports; None for empty columns.

    Population std, two-pass. Columns with missing entries (absent
    masks) aggregate over the present values only.
    """
    out = {}
    for c in _COLUMNS:
        vals = [getattr(r, c) for r in reports if getattr(r, c) is not None]
        out[c] = ((float(np.mean(vals)), float(np.std(vals)))
                  if vals else None)
    return out


def _summary_cells(reports):
    s = summarize(reports)
    return ["" if s[c] is None else "%.6g (%.6g)" % s[c] for c in _COLUMNS]


def write_report(path, reports, baseline=None, baseline_label="classical"):
    """Write the CSV: header, one row per pair, then a summary row with
    means and standard deviations in parentheses. An empty report list
    produces a header-only file. With `baseline`, a parallel list of
    MetricReports adds a second column group."""
    if baseline is not None and len(baseline) != len(reports):
        raise ValueError("write_report: %d reports but %d baseline rows"
                         % (len(reports), len(baseline)))
    header = CSV_HEADER
    if baseline is not None:
        header += "," + ",".join("%s_%s" % (baseline_label, c)
                                 for c in _COLUMNS)
    lines = [header]
    for i, r in enumerate(reports):
        row = format_row(r)
        if baseline is not None:
            row += "," + ",".join(_fmt(getattr(baseline[i], c))
                                  for c in _COLUMNS)
        lines.append(row)
    if reports:
        srow = ",".join(["summary"] + _summary_cells(reports))
        if baseline is not None:
            srow += "," + ",".join(_summary_cells(baseline))
        lines.append(srow)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
