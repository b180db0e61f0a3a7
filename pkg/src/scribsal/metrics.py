"""Saliency evaluation: S-measure, max F-measure, max E-measure, MAE.

Conventions pinned here (tests hold them against slow reference code):
256 binarization thresholds {0,...,255}/255 with ``pred >= t``; structure
measure with alpha=0.5, sample variance, and 1-based rounded centroid split;
alignment measure averaged over all pixels; F-measure with beta^2=0.3 and
zero-division -> 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError, PreconditionError, ShapeError

EPS = float(np.spacing(1))
N_THRESHOLDS = 256


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt > 0.5


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gtb = _check_pair(pred, gt)
    return float(np.abs(pred - gtb.astype(np.float64)).mean())


# -- structure measure -------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    mu = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * mu / (mu * mu + 1.0 + 2.0 * sigma + EPS))


def _ssim_block(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    if n == 0:
        return 0.0
    mx, my = x.mean(), y.mean()
    if n > 1:
        sx = ((x - mx) ** 2).sum() / (n - 1)
        sy = ((y - my) ** 2).sum() / (n - 1)
        sxy = ((x - mx) * (y - my)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * mx * my * sxy
    b = (mx * mx + my * my) * (sx + sy)
    if a != 0.0:
        return float(a / (b + EPS))
    return 1.0 if b == 0.0 else 0.0


def s_measure(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.5) -> float:
    """Object- and region-aware structural similarity, clamped at 0."""
    pred, gtb = _check_pair(pred, gt)
    y = gtb.mean()
    if y == 0.0:
        return float(1.0 - pred.mean())
    if y == 1.0:
        return float(pred.mean())

    o_fg = _object_score(pred[gtb])
    o_bg = _object_score((1.0 - pred)[~gtb])
    s_obj = y * o_fg + (1.0 - y) * o_bg

    rows, cols = gtb.shape
    ys, xs = np.nonzero(gtb)
    cx = int(np.round((xs + 1).mean()))  # 1-based, also the left block width
    cy = int(np.round((ys + 1).mean()))
    area = rows * cols
    gtf = gtb.astype(np.float64)
    score = 0.0
    for (rs, cs), weight in (
        ((slice(0, cy), slice(0, cx)), cx * cy / area),
        ((slice(0, cy), slice(cx, cols)), (cols - cx) * cy / area),
        ((slice(cy, rows), slice(0, cx)), cx * (rows - cy) / area),
        ((slice(cy, rows), slice(cx, cols)), (cols - cx) * (rows - cy) / area),
    ):
        score += weight * _ssim_block(pred[rs, cs].ravel(), gtf[rs, cs].ravel())

    return float(max(alpha * s_obj + (1.0 - alpha) * score, 0.0))


# -- thresholded measures ----------------------------------------------------


def _threshold_counts(pred: np.ndarray, gtb: np.ndarray):
    """TP/FP counts for binarization pred >= i/255, vectorized over i."""
    q = np.floor(pred * 255.0).astype(np.int64).clip(0, 255)
    hist_fg = np.bincount(q[gtb], minlength=N_THRESHOLDS)
    hist_bg = np.bincount(q[~gtb], minlength=N_THRESHOLDS)
    tp = np.cumsum(hist_fg[::-1])[::-1].astype(np.float64)
    fp = np.cumsum(hist_bg[::-1])[::-1].astype(np.float64)
    return tp, fp


def max_f(pred: np.ndarray, gt: np.ndarray, beta2: float = 0.3) -> float:
    """Maximum F over 256 binarization thresholds; zero-division gives 0."""
    pred, gtb = _check_pair(pred, gt)
    n_fg = int(gtb.sum())
    if n_fg == 0:
        return 0.0
    tp, fp = _threshold_counts(pred, gtb)
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = tp / n_fg
    denom = beta2 * precision + recall
    f = np.divide(
        (1.0 + beta2) * precision * recall, denom,
        out=np.zeros_like(denom), where=denom > 0,
    )
    return float(f.max())


def _enhanced_value(a_gt: float, a_fm: float) -> float:
    align = 2.0 * a_gt * a_fm / (a_gt * a_gt + a_fm * a_fm + EPS)
    return (align + 1.0) ** 2 / 4.0


def max_e(pred: np.ndarray, gt: np.ndarray) -> float:
    """Maximum enhanced-alignment score over 256 binarization thresholds."""
    pred, gtb = _check_pair(pred, gt)
    n = gtb.size
    n_fg = int(gtb.sum())
    n_bg = n - n_fg
    tp, fp = _threshold_counts(pred, gtb)

    best = 0.0
    for i in range(N_THRESHOLDS):
        fm_count = tp[i] + fp[i]
        if n_fg == 0:
            e = (n - fm_count) / n
        elif n_bg == 0:
            e = fm_count / n
        else:
            mu_gt = n_fg / n
            mu_fm = fm_count / n
            counts = (
                (tp[i], 1.0 - mu_gt, 1.0 - mu_fm),
                (n_fg - tp[i], 1.0 - mu_gt, -mu_fm),
                (fp[i], -mu_gt, 1.0 - mu_fm),
                (n_bg - fp[i], -mu_gt, -mu_fm),
            )
            e = sum(c * _enhanced_value(ag, af) for c, ag, af in counts) / n
        best = max(best, float(e))
    return best


# -- aggregation and reports -------------------------------------------------


@dataclass
class MetricSummary:
    s: float
    max_f: float
    max_e: float
    mae: float

    def to_dict(self) -> dict[str, float]:
        return {"s": self.s, "max_f": self.max_f, "max_e": self.max_e, "mae": self.mae}


@dataclass
class MetricReport:
    per_image: list[tuple[str, MetricSummary]]
    dataset: MetricSummary
    counts: int
    name: str = ""
    overall: MetricSummary | None = None
    per_dataset_counts: dict[str, int] = field(default_factory=dict)


def score_pair(pred: np.ndarray, gt: np.ndarray) -> MetricSummary:
    return MetricSummary(
        s=s_measure(pred, gt), max_f=max_f(pred, gt), max_e=max_e(pred, gt),
        mae=mae(pred, gt),
    )


def _aggregate(items: list[MetricSummary]) -> MetricSummary:
    return MetricSummary(
        s=float(np.mean([m.s for m in items])),
        max_f=float(np.mean([m.max_f for m in items])),
        max_e=float(np.mean([m.max_e for m in items])),
        mae=float(np.mean([m.mae for m in items])),
    )


def _load_gray(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def evaluate(pred_dir: str | Path, gt_dir: str | Path, name: str = "") -> MetricReport:
    """Score every prediction in ``pred_dir`` against same-named ground truth."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_ids = sorted(p.stem for p in pred_dir.glob("*.png"))
    gt_ids = sorted(p.stem for p in gt_dir.glob("*.png"))
    if pred_ids != gt_ids:
        missing = set(pred_ids) ^ set(gt_ids)
        raise ManifestError(f"pred/gt id mismatch, differing ids: {sorted(missing)[:8]}")
    if not pred_ids:
        raise PreconditionError("no predictions to evaluate")

    per_image = []
    for sid in pred_ids:
        pred = _load_gray(pred_dir / f"{sid}.png")
        gt = _load_gray(gt_dir / f"{sid}.png") > 0.5
        per_image.append((sid, score_pair(pred, gt)))

    return MetricReport(
        per_image=per_image,
        dataset=_aggregate([m for _, m in per_image]),
        counts=len(per_image),
        name=name or pred_dir.name,
    )


def overall(reports: list[MetricReport], weighted: bool = True) -> MetricReport:
    """Cross-dataset aggregate; image-count weighted by default."""
    if not reports:
        raise PreconditionError("no reports to aggregate")
    weights = np.array(
        [r.counts if weighted else 1 for r in reports], dtype=np.float64
    )
    weights = weights / weights.sum()

    def wmean(get):
        return float(sum(w * get(r.dataset) for w, r in zip(weights, reports)))

    summary = MetricSummary(
        s=wmean(lambda d: d.s), max_f=wmean(lambda d: d.max_f),
        max_e=wmean(lambda d: d.max_e), mae=wmean(lambda d: d.mae),
    )
    return MetricReport(
        per_image=[],
        dataset=summary,
        counts=int(sum(r.counts for r in reports)),
        name="overall",
        overall=summary,
        per_dataset_counts={r.name: r.counts for r in reports},
    )


def write_csv(report: MetricReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "s", "max_f", "max_e", "mae"])
        for sid, m in report.per_image:
            writer.writerow([sid, f"{m.s:.6f}", f"{m.max_f:.6f}", f"{m.max_e:.6f}", f"{m.mae:.6f}"])


def write_summary(reports: list[MetricReport], path: str | Path) -> None:
    payload = {
        r.name: {**r.dataset.to_dict(), "count": r.counts} for r in reports
    }
    Path(path).write_text(json.dumps(payload, indent=2))
