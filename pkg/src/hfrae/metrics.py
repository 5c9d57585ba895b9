"""Image AUROC, pixel AUROC and per-region-overlap (AUPRO) metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DomainError, ShapeError

DEFAULT_BINS = 4096
DEFAULT_EXACT_LIMIT = 1 << 16
DEFAULT_FPR_CAP = 0.3
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class ProCurve:
    fpr: np.ndarray
    mean_region_overlap: np.ndarray
    thresholds: np.ndarray
    aupro: float
    fpr_cap: float = DEFAULT_FPR_CAP


def binary_labels(labels) -> np.ndarray:
    """Map labels to {0, 1}; strings ``"anomalous"``/``"normal"`` are accepted."""
    out = []
    for lab in labels:
        if isinstance(lab, str):
            if lab not in ("normal", "anomalous"):
                raise DomainError(f"unknown label {lab!r}")
            out.append(lab == "anomalous")
        else:
            out.append(bool(lab))
    return np.asarray(out, dtype=bool)


def _mann_whitney_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    n_pos, n_neg = len(pos), len(neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def image_auroc(scores, labels) -> float:
    """AUROC as the normalized Mann-Whitney U statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    y = binary_labels(labels)
    if scores.shape != y.shape:
        raise ShapeError(f"{scores.size} scores vs {y.size} labels")
    if y.all() or not y.any():
        raise DomainError("AUROC needs both normal and anomalous samples")
    return _mann_whitney_auc(scores[y], scores[~y])


def roc_curve(scores, labels) -> RocCurve:
    """ROC points at every distinct score, thresholds descending from +inf."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    y = binary_labels(labels)
    if y.all() or not y.any():
        raise DomainError("ROC needs both normal and anomalous samples")
    order = np.argsort(-scores, kind="mergesort")
    s, yy = scores[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(yy)[cut]
    fp = np.cumsum(~yy)[cut]
    tpr = np.r_[0.0, tp / y.sum()]
    fpr = np.r_[0.0, fp / (~y).sum()]
    thresholds = np.r_[np.inf, s[cut]]
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=float(np.trapezoid(tpr, fpr)))


def _check_pairs(maps, masks) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    masks = [np.asarray(m).astype(bool) for m in masks]
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps vs {len(masks)} masks")
    for i, (a, m) in enumerate(zip(maps, masks)):
        if a.shape != m.shape:
            raise ShapeError(f"map {i} has shape {a.shape} but mask has {m.shape}")
    return maps, masks


def _histogram_auc(maps, masks, bins: int) -> float:
    lo = min(float(a.min()) for a in maps)
    hi = max(float(a.max()) for a in maps)
    if lo == hi:
        return 0.5
    pos_hist = np.zeros(bins, dtype=np.int64)
    neg_hist = np.zeros(bins, dtype=np.int64)
    for a, m in zip(maps, masks):
        pos_hist += np.histogram(a[m], bins=bins, range=(lo, hi))[0]
        neg_hist += np.histogram(a[~m], bins=bins, range=(lo, hi))[0]
    n_pos, n_neg = pos_hist.sum(), neg_hist.sum()
    neg_below = np.cumsum(neg_hist) - neg_hist
    u = (pos_hist * (neg_below + 0.5 * neg_hist)).sum()
    return float(u / (n_pos * n_neg))


def pixel_auroc(
    maps: Sequence,
    masks: Sequence,
    bins: int = DEFAULT_BINS,
    exact_limit: int = DEFAULT_EXACT_LIMIT,
    per_image: bool = False,
) -> float:
    """Pixel-level AUROC over the pooled pixels of all images.

    Up to ``exact_limit`` pixels the rank statistic is exact; beyond that the
    maps are streamed into ``bins`` equal-width histogram bins and pairs that
    share a bin count as ties. ``per_image=True`` averages the AUROC of each
    image that contains both classes instead of pooling.
    """
    maps, masks = _check_pairs(maps, masks)
    if per_image:
        values = [
            pixel_auroc([a], [m], bins=bins, exact_limit=exact_limit)
            for a, m in zip(maps, masks)
            if m.any() and not m.all()
        ]
        if not values:
            raise DomainError("no image contains both normal and anomalous pixels")
        return float(np.mean(values))
    n_pos = sum(int(m.sum()) for m in masks)
    n_total = sum(m.size for m in masks)
    if n_pos == 0 or n_pos == n_total:
        raise DomainError("pixel AUROC needs both normal and anomalous pixels")
    if n_total <= exact_limit:
        pos = np.concatenate([a[m] for a, m in zip(maps, masks)])
        neg = np.concatenate([a[~m] for a, m in zip(maps, masks)])
        return _mann_whitney_auc(pos, neg)
    return _histogram_auc(maps, masks, bins)


def connected_components(mask) -> Tuple[np.ndarray, int]:
    """8-connected labeling of a binary mask.

    Labels are numbered 1..n in row-major order of each region's first pixel;
    background is 0.
    """
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=_EIGHT_CONNECTED)
    return labels, int(n)


def _integrate_capped(x: np.ndarray, y: np.ndarray, cap: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Trapezoid area of y(x) on [0, cap]; the curve must be ordered by nondecreasing x."""
    area = 0.0
    xs, ys = [x[0]], [y[0]]
    for x0, y0, x1, y1 in zip(x[:-1], y[:-1], x[1:], y[1:]):
        if x1 <= cap:
            area += (x1 - x0) * (y0 + y1) / 2.0
            xs.append(x1)
            ys.append(y1)
            continue
        if x0 < cap:
            y_cap = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            area += (cap - x0) * (y0 + y_cap) / 2.0
            xs.append(cap)
            ys.append(y_cap)
        break
    return area, np.asarray(xs), np.asarray(ys)


def sweep_thresholds(values: np.ndarray, max_thresholds: int = DEFAULT_BINS) -> np.ndarray:
    """Descending thresholds: every distinct value, or quantiles when there are too many."""
    distinct = np.unique(values)
    if len(distinct) > max_thresholds:
        distinct = np.unique(np.quantile(values, np.linspace(0.0, 1.0, max_thresholds)))
    return distinct[::-1]


def aupro(
    maps: Sequence,
    masks: Sequence,
    fpr_cap: float = DEFAULT_FPR_CAP,
    max_thresholds: int = DEFAULT_BINS,
) -> ProCurve:
    """Normalized area under the per-region-overlap curve up to ``fpr_cap``.

    At each threshold ``t`` a pixel is predicted anomalous when its value is
    ``>= t``. The overlap of a ground-truth region is the fraction of its pixels
    predicted anomalous; the curve plots the mean overlap over all regions
    (of all images) against the false-positive rate over all normal pixels.
    """
    if not 0.0 < fpr_cap <= 1.0:
        raise DomainError(f"fpr_cap must lie in (0, 1], got {fpr_cap}")
    maps, masks = _check_pairs(maps, masks)

    region_values = []
    for a, m in zip(maps, masks):
        labels, n = connected_components(m)
        for r in range(1, n + 1):
            region_values.append(np.sort(a[labels == r]))
    if not region_values:
        raise DomainError("AUPRO needs at least one anomalous region")
    normal = np.sort(np.concatenate([a[~m] for a, m in zip(maps, masks)]))
    if normal.size == 0:
        raise DomainError("AUPRO needs at least one normal pixel")

    thresholds = sweep_thresholds(np.concatenate([a.ravel() for a in maps]), max_thresholds)
    fpr = (normal.size - np.searchsorted(normal, thresholds, side="left")) / normal.size
    overlap = np.zeros(len(thresholds))
    for vals in region_values:
        overlap += (vals.size - np.searchsorted(vals, thresholds, side="left")) / vals.size
    overlap /= len(region_values)

    fpr = np.r_[0.0, fpr]
    overlap = np.r_[0.0, overlap]
    thresholds = np.r_[np.inf, thresholds]
    area, xs, ys = _integrate_capped(fpr, overlap, fpr_cap)
    keep = len(xs)
    return ProCurve(
        fpr=xs,
        mean_region_overlap=ys,
        thresholds=thresholds[:keep],
        aupro=float(area / fpr_cap),
        fpr_cap=fpr_cap,
    )


@dataclass
class EvalReport:
    """Metrics for one category; localization fields are ``None`` when not applicable."""

    category: str
    image_auroc: float
    pixel_auroc: Optional[float] = None
    aupro: Optional[float] = None
    n_images: int = 0
    untrained: bool = False
    metadata: Dict[str, object] = field(default_factory=dict)

    def row(self) -> Dict[str, object]:
        return {
            "category": self.category,
            "detection_auroc": _fmt(self.image_auroc),
            "localization_auroc": _fmt(self.pixel_auroc),
            "aupro": _fmt(self.aupro),
        }


REPORT_COLUMNS = ("category", "detection_auroc", "localization_auroc", "aupro")


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def mean_row(reports: Sequence[EvalReport]) -> Dict[str, object]:
    return {
        "category": "Mean",
        "detection_auroc": _fmt(_mean(r.image_auroc for r in reports)),
        "localization_auroc": _fmt(_mean(r.pixel_auroc for r in reports)),
        "aupro": _fmt(_mean(r.aupro for r in reports)),
    }


def write_report_csv(reports: Sequence[EvalReport], path) -> Path:
    """Per-category rows followed by a ``Mean`` row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.row())
        writer.writerow(mean_row(reports))
    return path


def format_table(reports: Sequence[EvalReport]) -> str:
    rows = [r.row() for r in reports] + [mean_row(reports)]
    widths = {c: max(len(c), *(len(str(row[c])) for row in rows)) for c in REPORT_COLUMNS}
    line = lambda row: "  ".join(str(row[c]).ljust(widths[c]) for c in REPORT_COLUMNS)
    header = line({c: c for c in REPORT_COLUMNS})
    rule = "-" * len(header)
    body = [line(r) for r in rows[:-1]]
    return "\n".join([header, rule, *body, rule, line(rows[-1])])


def write_curve_csv(x, y, path, header: Tuple[str, str] = ("fpr", "tpr")) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(zip(np.asarray(x).tolist(), np.asarray(y).tolist()))
    return path


def report_dict(report: EvalReport) -> dict:
    return asdict(report)
