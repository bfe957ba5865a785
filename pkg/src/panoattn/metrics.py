"""Image-wise scale/shift alignment and standard depth error metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

MAX_VALID_DEPTH = 100.0
LOG_FLOOR = 1e-6
METRIC_NAMES = ("abs_rel", "sq_rel", "rms_lin", "rms_log", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class Alignment:
    scale: float
    shift: float
    aligned: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rms_lin: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixels: int

    def row(self) -> list[float]:
        return [getattr(self, k) for k in METRIC_NAMES]


def valid_mask(gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt)
    return (gt > 0) & (gt < MAX_VALID_DEPTH)


def _masked(depth, gt, mask):
    depth = np.asarray(depth, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if depth.shape != gt.shape:
        raise ValueError(f"prediction {depth.shape} and ground truth {gt.shape} differ")
    mask = valid_mask(gt) if mask is None else np.asarray(mask, dtype=bool)
    return depth, gt, mask


def align(depth, gt, mask=None) -> Alignment:
    """Least-squares ``s, t`` minimising ||s * depth + t - gt|| over valid pixels."""
    depth, gt, mask = _masked(depth, gt, mask)
    if mask.sum() < 2:
        raise ValueError(f"alignment needs at least 2 valid pixels, got {int(mask.sum())}")
    d, g = depth[mask], gt[mask]
    dm, gm = d.mean(), g.mean()
    var = np.mean((d - dm) ** 2)
    if var < 1e-12:
        s, degenerate = 1.0, True
    else:
        s, degenerate = float(np.mean((d - dm) * (g - gm)) / var), False
    t = float(gm - s * dm)
    return Alignment(s, t, s * depth + t, degenerate)


def compute(aligned, gt, mask=None) -> DepthMetrics:
    d, g, mask = _masked(aligned, gt, mask)
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    d, g = d[mask], g[mask]
    if np.any(g <= 0):
        raise ValueError("ground truth must be positive on the evaluation mask")
    diff = d - g
    dl = np.maximum(d, LOG_FLOOR)
    ratio = np.maximum(dl / g, g / dl)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rms_lin=float(np.sqrt(np.mean(diff**2))),
        rms_log=float(np.sqrt(np.mean((np.log(dl) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        valid_pixels=int(d.size),
    )


def evaluate(depth, gt, mask=None) -> tuple[Alignment, DepthMetrics]:
    """Align one prediction to its ground truth, then score it."""
    a = align(depth, gt, mask)
    return a, compute(a.aligned, gt, mask)


def mean_metrics(results: list[DepthMetrics]) -> dict[str, float]:
    if not results:
        raise ValueError("no results to average")
    return {k: float(np.mean([getattr(r, k) for r in results])) for k in METRIC_NAMES}


def report_csv(rows: list[tuple[str, Alignment, DepthMetrics]]) -> str:
    """Per-image rows followed by an image-averaged ``mean`` row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "s", "t", *METRIC_NAMES])
    for sid, a, m in rows:
        w.writerow([sid, repr(a.scale), repr(a.shift), *(repr(v) for v in m.row())])
    agg = mean_metrics([m for _, _, m in rows])
    w.writerow(["mean", "", "", *(repr(agg[k]) for k in METRIC_NAMES)])
    return buf.getvalue()
