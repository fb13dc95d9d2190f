"""Anomaly metrics: AUROC, average precision, per-region overlap, mIoU.

AUROC and AP are rank statistics; PRO integrates the mean per-component
recall over the false-positive-rate axis up to a limit. Each function
has a brute-force threshold-sweep counterpart in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from clicklabel.errors import InvalidInputError, UndefinedMetricError

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

PRO_FPR_LIMIT = 0.3
PRO_MAX_THRESHOLDS = 200


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) area under the ROC curve; ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape or scores.size == 0:
        raise InvalidInputError("scores and labels must be non-empty and aligned")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes")
    ranks = rankdata(scores, method="average")
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP with tie groups processed atomically.

    Items sharing a score enter the ranking as one block, i.e. exactly
    the operating points of a descending threshold sweep.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape or scores.size == 0:
        raise InvalidInputError("scores and labels must be non-empty and aligned")
    total_pos = int(labels.sum())
    if total_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    n = scores.size
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        group_pos = int(sorted_labels[i:j].sum())
        tp += group_pos
        seen += j - i
        if group_pos:
            ap += (group_pos / total_pos) * (tp / seen)
        i = j
    return float(ap)


def _components(mask: np.ndarray) -> list[np.ndarray]:
    labels, count = ndimage.label(mask, structure=FOUR_CONN)
    return [labels == i for i in range(1, count + 1)]


def pro(score_map: np.ndarray, gt_mask: np.ndarray, fpr_limit: float = PRO_FPR_LIMIT,
        thresholds: np.ndarray | None = None) -> float:
    """Per-region overlap integrated over FPR up to ``fpr_limit``.

    Sweeps thresholds descending (strict > binarization); at each point
    the mean over ground-truth components of the covered fraction is
    plotted against the false-positive rate. The curve is integrated by
    trapezoid, extended horizontally if it ends before the limit, and
    normalized by the limit. Default thresholds are the unique scores,
    quantile-subsampled to 200 levels when there are more.
    """
    score_map = np.asarray(score_map, dtype=np.float64)
    gt = np.asarray(gt_mask).astype(bool)
    if score_map.shape != gt.shape:
        raise InvalidInputError("score map and ground truth dims differ")
    comps = _components(gt)
    if not comps:
        raise UndefinedMetricError("PRO needs at least one ground-truth component")
    n_neg = int((~gt).sum())
    if n_neg == 0:
        raise UndefinedMetricError("PRO needs at least one negative pixel")

    if thresholds is None:
        thresholds = np.unique(score_map)[::-1]
        if thresholds.size > PRO_MAX_THRESHOLDS:
            idx = np.round(np.linspace(0, thresholds.size - 1, PRO_MAX_THRESHOLDS))
            thresholds = thresholds[idx.astype(int)]
    else:
        thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]

    comp_sizes = np.array([c.sum() for c in comps], dtype=np.float64)
    points = []
    for th in thresholds:
        binary = score_map > th
        overlaps = np.array([float((c & binary).sum()) for c in comps])
        mean_pro = float((overlaps / comp_sizes).mean())
        fpr = float((binary & ~gt).sum() / n_neg)
        points.append((fpr, mean_pro))

    area = 0.0
    prev_f, prev_p = 0.0, 0.0
    for f, p in points:
        if f < prev_f:
            continue
        if prev_f >= fpr_limit:
            break
        f_clip = min(f, fpr_limit)
        if f > prev_f:
            p_clip = prev_p + (p - prev_p) * (f_clip - prev_f) / (f - prev_f)
        else:
            p_clip = p
        area += (f_clip - prev_f) * (prev_p + p_clip) / 2.0
        prev_f, prev_p = f_clip, p_clip
    if prev_f < fpr_limit:
        area += (fpr_limit - prev_f) * prev_p
    return float(area / fpr_limit)


def miou(pred_masks: list[np.ndarray], gt_masks: list[np.ndarray],
         threshold: float = 0.5) -> float:
    """Mean over images of IoU between thresholded prediction and truth.

    An image where both the ground truth and the thresholded prediction
    are empty counts as IoU 1.
    """
    if len(pred_masks) != len(gt_masks) or not pred_masks:
        raise InvalidInputError("need equal non-zero counts of predictions and truths")
    ious = []
    for pred, gt in zip(pred_masks, gt_masks):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise InvalidInputError("prediction and ground truth dims differ")
        binary = pred >= threshold
        union = int((binary | gt).sum())
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(float((binary & gt).sum() / union))
    return float(np.mean(ious))


def evaluation_report(score_maps: list[np.ndarray], gt_masks: list[np.ndarray],
                      image_ids: list[str] | None = None) -> dict:
    """Per-image and aggregate metrics for a set of score maps.

    Pixel AP/AUROC pool all pixels; PRO averages over images with a
    non-empty ground truth; image AUROC ranks max-pixel scores and is
    null when only one image class is present.
    """
    if len(score_maps) != len(gt_masks) or not score_maps:
        raise InvalidInputError("need equal non-zero counts of scores and truths")
    ids = image_ids or [f"image_{i:04d}" for i in range(len(score_maps))]

    per_image = []
    pro_values = []
    for img_id, scores, gt in zip(ids, score_maps, gt_masks):
        gt = np.asarray(gt).astype(bool)
        entry = {"id": img_id, "anomalous": bool(gt.any()),
                 "image_score": float(np.asarray(scores).max())}
        entry["iou"] = miou([scores], [gt])
        if gt.any() and not gt.all():
            entry["pro"] = pro(scores, gt)
            pro_values.append(entry["pro"])
        else:
            entry["pro"] = None
        per_image.append(entry)

    all_scores = np.concatenate([np.asarray(s).ravel() for s in score_maps])
    all_labels = np.concatenate([np.asarray(g).astype(bool).ravel() for g in gt_masks])
    aggregate = {
        "miou": miou(score_maps, gt_masks),
        "pro": float(np.mean(pro_values)) if pro_values else None,
    }
    try:
        aggregate["ap"] = average_precision(all_scores, all_labels)
    except UndefinedMetricError:
        aggregate["ap"] = None
    try:
        aggregate["pixel_auroc"] = auroc(all_scores, all_labels)
    except UndefinedMetricError:
        aggregate["pixel_auroc"] = None
    image_scores = np.array([e["image_score"] for e in per_image])
    image_labels = np.array([e["anomalous"] for e in per_image])
    try:
        aggregate["image_auroc"] = auroc(image_scores, image_labels)
    except (UndefinedMetricError, InvalidInputError):
        aggregate["image_auroc"] = None
    return {"per_image": per_image, "aggregate": aggregate}
