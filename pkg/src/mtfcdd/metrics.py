"""Evaluation metrics: image/pixel AUROC and per-region-overlap (AUPRO).

Image-level evaluation for anomaly type k ranks images with that type
against normal images; images anomalous only in *other* types are excluded
from type k's ROC. Pixel-level AUROC pools pixels over the same per-type
image sets (reported per type, as their mean, and pooled across types).

Localisation quality uses the per-region-overlap curve: at a threshold tau,
every connected component of ground truth contributes the fraction of its
pixels covered by the prediction, averaged over all components dataset-wide;
the false-positive rate pools all anomaly-free pixels dataset-wide. AUPRO is
the normalised area under PRO vs FPR up to an FPR cap (default 0.3).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UndefinedMetricError

DEFAULT_FPR_LIMIT = 0.3
DEFAULT_N_THRESHOLDS = 5000


# ---------------------------------------------------------------------------
# ROC / AUROC
# ---------------------------------------------------------------------------


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; leading +inf gives the (0, 0) point
    fpr: np.ndarray
    tpr: np.ndarray


def roc_curve(scores, labels) -> RocCurve:
    """ROC over descending score thresholds, one point per distinct score.

    Predictions at threshold t are ``score >= t``; tied scores collapse to a
    single point, which makes the trapezoidal area equal the Mann-Whitney
    statistic P(s+ > s-) + 0.5 * P(s+ = s-).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ConfigError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = labels[order].astype(np.float64)
    tp = np.cumsum(pos)
    fp = np.cumsum(1.0 - pos)
    last_of_group = np.r_[s[1:] != s[:-1], True]
    thresholds = np.r_[np.inf, s[last_of_group]]
    tpr = np.r_[0.0, tp[last_of_group] / n_pos]
    fpr = np.r_[0.0, fp[last_of_group] / n_neg]
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr)


def auroc(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    curve = roc_curve(scores, labels)
    return float(np.trapezoid(curve.tpr, curve.fpr))


@dataclass
class PerClassValues:
    """One metric value per class (None where undefined) plus their mean."""

    values: list
    mean: float | None = field(init=False)

    def __post_init__(self):
        present = [v for v in self.values if v is not None]
        self.mean = float(np.mean(present)) if present else None


def image_level_auroc(z, y) -> PerClassValues:
    """Per-type image AUROC from scores z (N, M) and binary labels y (N, M).

    Type k positives are images with y[:, k] = 1; negatives are normal
    images (all-zero label rows). Types without positives come back None
    and are excluded from the mean.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y)
    if z.shape != y.shape or z.ndim != 2:
        raise ConfigError("z and y must both be (N, M)")
    normal = y.sum(axis=1) == 0
    if not normal.any():
        raise UndefinedMetricError("image-level AUROC needs normal images as negatives")
    values = []
    for k in range(z.shape[1]):
        pos = y[:, k] == 1
        if not pos.any():
            values.append(None)
            continue
        rows = pos | normal
        values.append(auroc(z[rows, k], pos[rows]))
    return PerClassValues(values=values)


def pixel_level_auroc(heatmaps, masks):
    """Per-type pixel AUROC plus the pooled-over-types value.

    ``heatmaps`` (N, M, h, w) are upsampled per-type maps; ``masks`` the
    aligned binary ground truth. Type k pools pixels from normal images
    (negatives throughout) and images anomalous in type k. Returns
    (PerClassValues, pooled_auroc).
    """
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    masks = np.asarray(masks) > 0
    if heatmaps.shape != masks.shape or heatmaps.ndim != 4:
        raise ConfigError("heatmaps and masks must both be (N, M, h, w)")
    has_type = masks.any(axis=(2, 3))  # (N, M)
    normal = ~has_type.any(axis=1)
    values = []
    pooled_scores, pooled_labels = [], []
    for k in range(heatmaps.shape[1]):
        rows = normal | has_type[:, k]
        s = heatmaps[rows, k].ravel()
        l = masks[rows, k].ravel()
        if not l.any():
            values.append(None)
            continue
        values.append(auroc(s, l))
        pooled_scores.append(s)
        pooled_labels.append(l)
    if not pooled_scores:
        raise UndefinedMetricError("pixel-level AUROC needs at least one anomalous mask")
    pooled = auroc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
    return PerClassValues(values=values), pooled


# ---------------------------------------------------------------------------
# connected components
# ---------------------------------------------------------------------------


@dataclass
class Component:
    """One 8-connected region of a binary mask, pixels in row-major order."""

    pixels: np.ndarray  # (n, 2) int array of (row, col)
    image_id: int | None = None
    class_id: int | None = None

    def __len__(self):
        return len(self.pixels)

    def pixel_set(self):
        return {(int(r), int(c)) for r, c in self.pixels}


_NEIGHBORS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def connected_components(mask):
    """8-connected components of a binary mask, ordered by first pixel.

    Scanning is row-major, so the component containing the topmost-leftmost
    foreground pixel comes first and the partition does not depend on any
    traversal choice.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ConfigError("connected_components expects a 2-d mask")
    fg = mask > 0
    h, w = fg.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for r0 in range(h):
        row = fg[r0]
        if not row.any():
            continue
        for c0 in range(w):
            if not row[c0] or seen[r0, c0]:
                continue
            queue = deque([(r0, c0)])
            seen[r0, c0] = True
            pixels = []
            while queue:
                r, c = queue.popleft()
                pixels.append((r, c))
                for dr, dc in _NEIGHBORS8:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < h and 0 <= cc < w and fg[rr, cc] and not seen[rr, cc]:
                        seen[rr, cc] = True
                        queue.append((rr, cc))
            pixels.sort()
            comps.append(Component(pixels=np.asarray(pixels, dtype=np.int64)))
    return comps


# ---------------------------------------------------------------------------
# PRO / AUPRO
# ---------------------------------------------------------------------------


@dataclass
class ProCurve:
    """Per-region overlap vs false-positive rate, FPR non-decreasing."""

    thresholds: np.ndarray  # descending, leading +inf
    fpr: np.ndarray
    pro: np.ndarray
    fpr_limit: float = DEFAULT_FPR_LIMIT


def _select_thresholds(values, n_thresholds):
    uniq = np.unique(values)
    if uniq.size > n_thresholds:
        uniq = np.unique(np.quantile(values, np.linspace(0.0, 1.0, n_thresholds)))
    return uniq[::-1]  # descending


def pro_curve(score_maps, masks, n_thresholds=DEFAULT_N_THRESHOLDS) -> ProCurve:
    """Per-region-overlap curve over a set of images.

    ``score_maps`` is (N, h, w); ``masks`` the aligned binary ground truth.
    At each threshold tau the prediction is ``score >= tau``; PRO(tau)
    averages per-component coverage over every ground-truth component in
    the dataset, FPR(tau) pools false positives over all anomaly-free
    pixels. Thresholds are all distinct scores, or quantile-spaced once
    there are more than ``n_thresholds`` of them.
    """
    score_maps = np.asarray(score_maps, dtype=np.float64)
    masks = np.asarray(masks) > 0
    if score_maps.shape != masks.shape or score_maps.ndim != 3:
        raise ConfigError("score_maps and masks must both be (N, h, w)")

    comp_scores = []
    for i in range(masks.shape[0]):
        for comp in connected_components(masks[i]):
            rows, cols = comp.pixels[:, 0], comp.pixels[:, 1]
            comp_scores.append(np.sort(score_maps[i][rows, cols]))
    if not comp_scores:
        raise UndefinedMetricError("PRO needs at least one ground-truth component")
    normal_scores = np.sort(score_maps[~masks])
    if normal_scores.size == 0:
        raise UndefinedMetricError("PRO needs at least one anomaly-free pixel")

    taus = _select_thresholds(score_maps.ravel(), n_thresholds)
    pro = np.zeros(taus.size, dtype=np.float64)
    for cs in comp_scores:
        covered = cs.size - np.searchsorted(cs, taus, side="left")
        pro += covered / cs.size
    pro /= len(comp_scores)
    fp = normal_scores.size - np.searchsorted(normal_scores, taus, side="left")
    fpr = fp / normal_scores.size
    return ProCurve(
        thresholds=np.r_[np.inf, taus],
        fpr=np.r_[0.0, fpr],
        pro=np.r_[0.0, pro],
    )


def aupro(curve: ProCurve, fpr_limit=DEFAULT_FPR_LIMIT) -> float:
    """Normalised area under the PRO-FPR curve for FPR in [0, fpr_limit].

    The curve is cut at the limit (linear interpolation at the crossing);
    if it never reaches the limit it extends horizontally at its last PRO
    value. The area divides by the limit, so a perfect detector scores 1.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ConfigError("fpr_limit must lie in (0, 1]")
    fpr = np.asarray(curve.fpr, dtype=np.float64)
    pro = np.asarray(curve.pro, dtype=np.float64)
    if fpr[-1] < fpr_limit:
        fpr = np.r_[fpr, fpr_limit]
        pro = np.r_[pro, pro[-1]]
    keep = fpr < fpr_limit
    pro_at_limit = float(np.interp(fpr_limit, fpr, pro))
    fpr = np.r_[fpr[keep], fpr_limit]
    pro = np.r_[pro[keep], pro_at_limit]
    return float(np.trapezoid(pro, fpr) / fpr_limit)


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-type and mean metrics for one evaluation run."""

    class_codes: list
    i_auroc: PerClassValues
    p_auroc: PerClassValues | None = None
    aupro_values: PerClassValues | None = None
    pooled_p_auroc: float | None = None

    @staticmethod
    def _fmt(v):
        return f"{100.0 * v:5.1f}" if v is not None else "  n/a"

    def format_table(self) -> str:
        lines = [f"{'Anomaly Type':<16} {'I-AUROC':>8} {'P-AUROC':>8} {'AUPRO':>8}"]
        for k, code in enumerate(self.class_codes):
            p = self.p_auroc.values[k] if self.p_auroc else None
            a = self.aupro_values.values[k] if self.aupro_values else None
            lines.append(
                f"{code:<16} {self._fmt(self.i_auroc.values[k]):>8}"
                f" {self._fmt(p):>8} {self._fmt(a):>8}"
            )
        lines.append(
            f"{'Mean':<16} {self._fmt(self.i_auroc.mean):>8}"
            f" {self._fmt(self.p_auroc.mean if self.p_auroc else None):>8}"
            f" {self._fmt(self.aupro_values.mean if self.aupro_values else None):>8}"
        )
        if self.pooled_p_auroc is not None:
            lines.append(f"Pooled P-AUROC: {100.0 * self.pooled_p_auroc:.1f}")
        return "\n".join(lines)

    def to_dict(self):
        def vals(pcv):
            return None if pcv is None else {"per_class": pcv.values, "mean": pcv.mean}

        return {
            "class_codes": list(self.class_codes),
            "i_auroc": vals(self.i_auroc),
            "p_auroc": vals(self.p_auroc),
            "aupro": vals(self.aupro_values),
            "pooled_p_auroc": self.pooled_p_auroc,
        }


def evaluate_heatmaps(
    z,
    y,
    class_codes,
    heatmaps=None,
    masks=None,
    fpr_limit=DEFAULT_FPR_LIMIT,
    n_thresholds=DEFAULT_N_THRESHOLDS,
) -> MetricReport:
    """Assemble the full metric report from scores, labels, maps and masks.

    ``heatmaps``/``masks`` may be None, in which case only image-level
    AUROC is reported. AUPRO for type k runs over normal images plus the
    images anomalous in type k, mirroring the image-level pairing.
    """
    report = MetricReport(class_codes=list(class_codes), i_auroc=image_level_auroc(z, y))
    if heatmaps is None or masks is None:
        return report
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    masks = np.asarray(masks) > 0
    report.p_auroc, report.pooled_p_auroc = pixel_level_auroc(heatmaps, masks)
    has_type = masks.any(axis=(2, 3))
    normal = ~has_type.any(axis=1)
    aupro_vals = []
    for k in range(heatmaps.shape[1]):
        if not has_type[:, k].any():
            aupro_vals.append(None)
            continue
        rows = normal | has_type[:, k]
        curve = pro_curve(heatmaps[rows, k], masks[rows, k], n_thresholds)
        aupro_vals.append(aupro(curve, fpr_limit))
    report.aupro_values = PerClassValues(values=aupro_vals)
    return report
