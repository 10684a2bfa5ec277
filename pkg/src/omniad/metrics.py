"""Detection and localization metrics, all reported in percent.

Every threshold-based metric treats each distinct score as a candidate
threshold with the predicate ``score >= t``, which makes the functions exact
(no binning) and invariant under strictly increasing score transforms.
"""

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import ContractError, MetricError

_EIGHT_CONNECTED = np.ones((3, 3), dtype=np.int64)


def _as_arrays(labels, scores):
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if labels.shape != scores.shape:
        raise MetricError(f"labels and scores differ in length: {labels.size} vs {scores.size}")
    return labels, scores


def auroc(labels, scores):
    """Area under the ROC curve: P(score+ > score-) + 0.5 P(tie), x100."""
    labels, scores = _as_arrays(labels, scores)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both a positive and a negative sample")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    # average ranks over tie groups implement the half-credit for ties
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [labels.size]))
    for a, b in zip(starts, stops):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1.0
    pos_rank_sum = ranks[labels == 1].sum()
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


def _threshold_counts(labels, scores):
    """Cumulative (tp, fp) after each distinct-score group, descending."""
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    group_ends = np.concatenate((np.flatnonzero(np.diff(sorted_scores)), [labels.size - 1]))
    tp = np.cumsum(sorted_labels == 1)[group_ends]
    fp = np.cumsum(sorted_labels == 0)[group_ends]
    return tp.astype(np.float64), fp.astype(np.float64)


def average_precision(labels, scores):
    """Step-interpolated area under precision-recall, ties as one group, x100."""
    labels, scores = _as_arrays(labels, scores)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("average_precision needs at least one positive sample")
    tp, fp = _threshold_counts(labels, scores)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.concatenate(([0.0], recall[:-1]))
    return 100.0 * float(((recall - prev) * precision).sum())


def f1_max(labels, scores):
    """Best F1 over all distinct-score thresholds, x100."""
    labels, scores = _as_arrays(labels, scores)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricError("f1_max needs at least one positive sample")
    tp, fp = _threshold_counts(labels, scores)
    f1 = 2.0 * tp / (tp + fp + n_pos)
    return 100.0 * float(f1.max())


def mask_regions(mask):
    """8-connected components of a binary mask, as lists of flat indices."""
    labeled, count = ndimage.label(np.asarray(mask) > 0, structure=_EIGHT_CONNECTED)
    flat = labeled.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    regions = []
    for r in range(1, count + 1):
        lo = np.searchsorted(sorted_labels, r)
        hi = np.searchsorted(sorted_labels, r + 1)
        regions.append(order[lo:hi])
    return regions


def aupro(masks, maps, fpr_cap=0.3):
    """Area under per-region overlap vs false-positive rate, in percent.

    Regions are 8-connected components pooled across all masks; FPR pools
    every normal pixel.  The sweep visits each distinct score descending,
    clips FPR at ``fpr_cap``, integrates PRO trapezoidally from the empty
    detection, and normalizes by the cap.
    """
    if len(masks) != len(maps) or not masks:
        raise MetricError("aupro needs equally many masks and maps")
    region_scores = []
    normal_scores = []
    for mask, amap in zip(masks, maps):
        mask = np.asarray(mask) > 0
        amap = np.asarray(amap, dtype=np.float64)
        if mask.shape != amap.shape:
            raise MetricError(f"mask shape {mask.shape} does not match map {amap.shape}")
        flat = amap.reshape(-1)
        for region in mask_regions(mask):
            region_scores.append(np.sort(flat[region]))
        normal_scores.append(flat[~mask.reshape(-1)])
    if not region_scores:
        raise MetricError("aupro needs at least one anomalous region")
    normal_scores = np.sort(np.concatenate(normal_scores))
    n_normal = normal_scores.size
    if n_normal == 0:
        raise MetricError("aupro needs at least one normal pixel")
    thresholds = np.unique(np.concatenate([np.concatenate(region_scores), normal_scores]))
    thresholds = thresholds[::-1]
    # counts of elements >= t via positions in the ascending sort
    fpr = 1.0 - np.searchsorted(normal_scores, thresholds, side="left") / n_normal
    pro = np.zeros(thresholds.size)
    for region in region_scores:
        pro += 1.0 - np.searchsorted(region, thresholds, side="left") / region.size
    pro /= len(region_scores)
    fpr = np.concatenate(([0.0], fpr)).clip(max=fpr_cap)
    pro = np.concatenate(([0.0], pro))
    area = np.trapezoid(pro, fpr)
    return 100.0 * float(area) / fpr_cap


@dataclass
class EvalReport:
    """The seven detection/localization metrics and their mean."""

    image_auroc: float = None
    image_ap: float = None
    image_f1max: float = None
    pixel_auroc: float = None
    pixel_ap: float = None
    pixel_f1max: float = None
    aupro: float = None
    mad: float = None

    CSV_HEADER = "img-auroc,img-ap,img-f1max,px-auroc,px-ap,px-f1max,aupro,mad"

    def metric_values(self):
        vals = [self.image_auroc, self.image_ap, self.image_f1max,
                self.pixel_auroc, self.pixel_ap, self.pixel_f1max, self.aupro]
        if any(v is None for v in vals):
            missing = [f.name for f in fields(self) if getattr(self, f.name) is None]
            raise ContractError(f"report is missing metric values: {missing}")
        return vals

    def csv_row(self):
        return ",".join(f"{v:.4f}" for v in self.metric_values() + [self.mad])

    def table(self):
        names = ["image AU-ROC", "image AP", "image F1_max", "pixel AU-ROC",
                 "pixel AP", "pixel F1_max", "AU-PRO", "mAD"]
        rows = [f"{n:>14s}  {v:7.3f}" for n, v in zip(names, self.metric_values() + [self.mad])]
        return "\n".join(rows)


def mad(report):
    """Arithmetic mean of the seven metric values."""
    values = report.metric_values()
    return float(np.mean(values))


def build_report(image_auroc, image_ap, image_f1max, pixel_auroc, pixel_ap,
                 pixel_f1max, aupro_value):
    report = EvalReport(image_auroc, image_ap, image_f1max, pixel_auroc,
                        pixel_ap, pixel_f1max, aupro_value)
    report.mad = mad(report)
    return report
