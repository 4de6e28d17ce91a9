"""Depth, occupancy and image-quality metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 100.0


@dataclass(frozen=True)
class DepthMetrics:
    rmse: float
    mae: float
    ard: float
    delta1: float
    delta2: float
    delta3: float

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class OccupancyMetrics:
    iou: float
    precision: float
    recall: float

    def to_dict(self):
        return asdict(self)


def depth_metrics(pred, gt, mask=None) -> DepthMetrics:
    """Masked depth errors; ``delta_i`` uses the strict test ``max(p/g, g/p) < 1.25**i``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mask = np.ones(gt.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    p, g = pred[mask], gt[mask]
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mae=float(np.mean(np.abs(err))),
        ard=float(np.mean(np.abs(err) / g)),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def occupancy_from_sigma(sigma_fn, bounds, voxel_size: float = 0.5, threshold: float = 5.0,
                         supersample: int = 2, batch: int = 1 << 18) -> np.ndarray:
    """Boolean occupancy on a ``voxel_size`` lattice over ``bounds``.

    A voxel is occupied when the max of ``sigma_fn`` over ``supersample**3``
    points inside it exceeds ``threshold``.
    """
    lo, hi = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    n = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 1)
    offs = (np.arange(supersample) + 0.5) / supersample
    sub = np.stack(np.meshgrid(offs, offs, offs, indexing="ij"), -1).reshape(-1, 3)
    idx = np.stack(np.meshgrid(*[np.arange(k) for k in n], indexing="ij"), -1).reshape(-1, 3)
    occ = np.zeros(len(idx), bool)
    per = max(1, batch // len(sub))
    for i in range(0, len(idx), per):
        cells = idx[i:i + per]
        pts = lo + (cells[:, None, :] + sub[None]) * voxel_size
        s = np.asarray(sigma_fn(pts.reshape(-1, 3))).reshape(len(cells), len(sub))
        occ[i:i + per] = s.max(-1) > threshold
    return occ.reshape(tuple(n))


def occupancy_metrics(pred, gt, sigma_threshold: float = 5.0, voxel_size: float = 0.5) -> OccupancyMetrics:
    """IoU / precision / recall of occupied voxels.

    ``pred`` and ``gt`` are boolean occupancy arrays, or :class:`SceneGrid`
    objects voxelized over their (common) bounds.
    """
    if not isinstance(pred, np.ndarray):
        pred, gt = _voxelize_pair(pred, gt, sigma_threshold, voxel_size)
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"occupancy shapes differ: {pred.shape} vs {gt.shape}")
    tp = np.sum(pred & gt)
    fp = np.sum(pred & ~gt)
    fn = np.sum(~pred & gt)
    union = tp + fp + fn
    return OccupancyMetrics(
        iou=float(tp / union) if union else 1.0,
        precision=float(tp / (tp + fp)) if tp + fp else 0.0,
        recall=float(tp / (tp + fn)) if tp + fn else 0.0,
    )


def _voxelize_pair(pred, gt, thr, vs):
    import torch

    bp = pred.bounds.double().numpy()
    bg = gt.bounds.double().numpy()
    lo, hi = np.maximum(bp[0], bg[0]), np.minimum(bp[1], bg[1])
    if np.any(hi <= lo):
        raise ValueError("scene bounds are disjoint")
    box = np.stack([lo, hi])

    def fn(grid):
        def f(x):
            with torch.no_grad():
                return grid.sigma(torch.as_tensor(x, dtype=grid.dtype)).double().numpy()
        return f

    return occupancy_from_sigma(fn(pred), box, vs, thr), occupancy_from_sigma(fn(gt), box, vs, thr)


def psnr(pred, gt, peak: float = 1.0) -> float:
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(peak * peak / mse))


def ssim(pred, gt, peak: float = 1.0, sigma: float = 1.5, radius: int = 5) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), ``K1 = 0.01``, ``K2 = 0.03``."""
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("ssim expects two aligned 2D images")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    f = lambda a: gaussian_filter(a, sigma, mode="reflect", truncate=radius / sigma)
    mx, my = f(x), f(y)
    vx = f(x * x) - mx * mx
    vy = f(y * y) - my * my
    cxy = f(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def write_report(path, metrics: dict) -> None:
    """JSON report, plus a flat ``key,value`` CSV next to it."""
    path = Path(path)
    path.write_text(json.dumps(metrics, indent=1, sort_keys=True))
    flat = {}

    def walk(prefix, v):
        if isinstance(v, dict):
            for k, u in v.items():
                walk(f"{prefix}{k}.", u)
        else:
            flat[prefix[:-1]] = v

    walk("", metrics)
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(flat):
            w.writerow([k, flat[k]])
