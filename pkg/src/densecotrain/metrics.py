"""Detection evaluation: greedy matching, AP/mAP, AR@k, and a test oracle.

Conventions:

* COCO-style 101-point interpolated AP at IoU thresholds 0.50:0.05:0.95.
  Thresholds are built as exact hundredths (``i/100``) so a detection
  whose IoU is exactly 0.60 counts at the 0.60 threshold; ``np.arange``
  would produce 0.6000000000000001 and silently drop it.
* Matching is greedy in descending score order (stable on ties by input
  order): each detection takes the unmatched same-label ground truth
  with the highest IoU and is a true positive iff that IoU >= t.
* Zero-ground-truth inputs never yield a silent 1.0: with detections
  present the metric is 0.0 plus a warning, with nothing present it is
  absent (None) plus a warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .geom import Box, GroundTruth, ScoredBox, iou

COCO_THRESHOLDS: tuple[float, ...] = tuple(i / 100 for i in range(50, 100, 5))
RECALL_LEVELS: tuple[float, ...] = tuple(i / 100 for i in range(101))


@dataclass(frozen=True)
class MatchResult:
    """Outcome of matching one image's detections against its ground truths."""

    det_is_tp: tuple[bool, ...]
    det_matched_gt: tuple[int | None, ...]
    det_match_iou: tuple[float, ...]
    gt_matched: tuple[bool, ...]


@dataclass(frozen=True)
class EvalReport:
    """Scalar detection metrics plus the per-threshold PR staircases.

    Scalars are None (absent) only in the degenerate no-GT-no-detection
    case; otherwise they lie in [0, 1].
    """

    ap_per_threshold: dict[float, float | None]
    map_coco: float | None
    ap75: float | None
    ar300: float | None
    pr_curves: dict[float, tuple[tuple[float, float], ...]]
    notes: tuple[str, ...] = field(default=())


def _as_gt(g: GroundTruth | Box) -> GroundTruth:
    return g if isinstance(g, GroundTruth) else GroundTruth(g)


def match_detections(
    dets: Sequence[ScoredBox],
    gts: Sequence[GroundTruth | Box],
    t: float,
) -> MatchResult:
    """Greedy per-image matching at IoU threshold ``t``.

    Detections are processed in descending score order; each takes the
    unmatched ground truth of its own label with the highest IoU, and is
    a TP iff that IoU >= t.  A ground truth is consumed by at most one
    detection.
    """
    if not (0.0 < t <= 1.0):
        raise ValueError(f"IoU threshold must be in (0, 1], got {t!r}")
    norm = [_as_gt(g) for g in gts]
    n_det, n_gt = len(dets), len(norm)
    det_is_tp = [False] * n_det
    det_matched: list[int | None] = [None] * n_det
    det_iou = [0.0] * n_det
    gt_matched = [False] * n_gt
    order = sorted(range(n_det), key=lambda i: -dets[i].score)
    for i in order:
        d = dets[i]
        best_j = -1
        best_v = 0.0
        for j, g in enumerate(norm):
            if gt_matched[j] or g.label != d.label:
                continue
            v = iou(d.box, g.box)
            if v > best_v:
                best_v, best_j = v, j
        if best_j >= 0 and best_v >= t:
            det_is_tp[i] = True
            det_matched[i] = best_j
            det_iou[i] = best_v
            gt_matched[best_j] = True
    return MatchResult(
        tuple(det_is_tp), tuple(det_matched), tuple(det_iou), tuple(gt_matched)
    )


def _ranked_tp_flags(
    dets_by_image: Mapping[str, Sequence[ScoredBox]],
    gts_by_image: Mapping[str, Sequence[GroundTruth | Box]],
    t: float,
) -> tuple[list[bool], list[float], int]:
    """Dataset-wide ranked TP flags.

    Matching happens per image (greedy in local score order, which agrees
    with the global order restricted to the image); the flags are then
    merged into one list sorted by descending score, stable on ties by
    image insertion order then detection input order.
    """
    entries: list[tuple[float, int, bool]] = []
    seq = 0
    n_gt = 0
    for img, dets in dets_by_image.items():
        gts = gts_by_image.get(img, ())
        mr = match_detections(dets, gts, t)
        for d, tp in zip(dets, mr.det_is_tp):
            entries.append((d.score, seq, tp))
            seq += 1
    for gts in gts_by_image.values():
        n_gt += len(gts)
    entries.sort(key=lambda e: (-e[0], e[1]))
    return [e[2] for e in entries], [e[0] for e in entries], n_gt


def _pr_points(flags: Sequence[bool], n_gt: int) -> list[tuple[float, float]]:
    pts = []
    tp = fp = 0
    for f in flags:
        if f:
            tp += 1
        else:
            fp += 1
        pts.append((tp / n_gt, tp / (tp + fp)))
    return pts


def _interpolated_ap(points: Sequence[tuple[float, float]]) -> float:
    """101-point AP from raw (recall, precision) staircase points."""
    if not points:
        return 0.0
    # monotone envelope: running max of precision from the right
    recalls = [p[0] for p in points]
    precs = [p[1] for p in points]
    for i in range(len(precs) - 2, -1, -1):
        precs[i] = max(precs[i], precs[i + 1])
    total = 0.0
    j = 0
    for r in RECALL_LEVELS:
        while j < len(recalls) and recalls[j] < r:
            j += 1
        if j < len(recalls):
            total += precs[j]
    return total / len(RECALL_LEVELS)


def _zero_gt_outcome(n_det: int, what: str) -> float | None:
    if n_det > 0:
        warnings.warn(
            f"{what}: no ground truths but {n_det} detections; defined as 0.0",
            stacklevel=3,
        )
        return 0.0
    warnings.warn(f"{what}: no ground truths and no detections; undefined", stacklevel=3)
    return None


def average_precision(
    dets_by_image: Mapping[str, Sequence[ScoredBox]],
    gts_by_image: Mapping[str, Sequence[GroundTruth | Box]],
    t: float,
) -> float | None:
    """101-point interpolated AP at one IoU threshold over a dataset.

    Returns None (absent) when there are neither ground truths nor
    detections; 0.0 with a warning when detections exist without any
    ground truth.
    """
    flags, _, n_gt = _ranked_tp_flags(dets_by_image, gts_by_image, t)
    if n_gt == 0:
        return _zero_gt_outcome(len(flags), "average_precision")
    return _interpolated_ap(_pr_points(flags, n_gt))


def mean_average_precision(
    dets_by_image: Mapping[str, Sequence[ScoredBox]],
    gts_by_image: Mapping[str, Sequence[GroundTruth | Box]],
) -> EvalReport:
    """Full COCO-style report: per-threshold AP, their mean, AP.75, AR@300."""
    notes: list[str] = []
    ap_per_t: dict[float, float | None] = {}
    pr_curves: dict[float, tuple[tuple[float, float], ...]] = {}
    n_gt = sum(len(v) for v in gts_by_image.values())
    n_det = sum(len(v) for v in dets_by_image.values())
    if n_gt == 0:
        val = _zero_gt_outcome(n_det, "mean_average_precision")
        notes.append("no ground truths")
        for t in COCO_THRESHOLDS:
            ap_per_t[t] = val
            pr_curves[t] = ()
        return EvalReport(ap_per_t, val, val, val, pr_curves, tuple(notes))
    for t in COCO_THRESHOLDS:
        flags, _, _ = _ranked_tp_flags(dets_by_image, gts_by_image, t)
        pts = _pr_points(flags, n_gt)
        ap_per_t[t] = _interpolated_ap(pts)
        pr_curves[t] = tuple(pts)
    vals = [v for v in ap_per_t.values() if v is not None]
    map_coco = sum(vals) / len(vals)
    ar = average_recall_at(dets_by_image, gts_by_image, 300)
    return EvalReport(ap_per_t, map_coco, ap_per_t[0.75], ar, pr_curves, tuple(notes))


def average_recall_at(
    dets_by_image: Mapping[str, Sequence[ScoredBox]],
    gts_by_image: Mapping[str, Sequence[GroundTruth | Box]],
    k: int = 300,
) -> float | None:
    """AR@k: truncate each image to its top-k detections by score, then
    average recall over the COCO thresholds."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k!r}")
    n_gt = sum(len(v) for v in gts_by_image.values())
    if n_gt == 0:
        n_det = sum(len(v) for v in dets_by_image.values())
        return _zero_gt_outcome(n_det, "average_recall_at")
    truncated: dict[str, list[ScoredBox]] = {}
    for img, dets in dets_by_image.items():
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        truncated[img] = [dets[i] for i in order[:k]]
    recalls = []
    for t in COCO_THRESHOLDS:
        matched = 0
        for img, gts in gts_by_image.items():
            mr = match_detections(truncated.get(img, ()), gts, t)
            matched += sum(mr.gt_matched)
        recalls.append(matched / n_gt)
    return sum(recalls) / len(recalls)


def brute_force_ap_oracle(
    dets_by_image: Mapping[str, Sequence[ScoredBox]],
    gts_by_image: Mapping[str, Sequence[GroundTruth | Box]],
    t: float,
) -> float | None:
    """Independent AP computation for tests: explicit loops, no shared code.

    Re-derives the ranked list, the greedy matching, the full interpolated
    PR staircase, and the 101-point sum from scratch, with its own inline
    IoU.  Only intended for small inputs (<= 50 detections).
    """
    if not (0.0 < t <= 1.0):
        raise ValueError(f"IoU threshold must be in (0, 1], got {t!r}")
    n_det_total = sum(len(v) for v in dets_by_image.values())
    if n_det_total > 50:
        raise ValueError("oracle is for small test inputs (<= 50 detections)")

    def box_iou(a, b):
        # independent formulation: clamp-based overlap
        ox = min(a[2], b[2]) - max(a[0], b[0])
        oy = min(a[3], b[3]) - max(a[1], b[1])
        if ox <= 0 or oy <= 0:
            return 0.0
        inter = ox * oy
        a_area = (a[2] - a[0]) * (a[3] - a[1])
        b_area = (b[2] - b[0]) * (b[3] - b[1])
        return inter / (a_area + b_area - inter)

    n_gt = 0
    for v in gts_by_image.values():
        n_gt += len(v)
    if n_gt == 0:
        return _zero_gt_outcome(n_det_total, "brute_force_ap_oracle")

    # per-image greedy matching, recording TP flags keyed by (score, arrival)
    ranked: list[tuple[float, int, bool]] = []
    arrival = 0
    for img, dets in dets_by_image.items():
        gts = [_as_gt(g) for g in gts_by_image.get(img, ())]
        taken = [False] * len(gts)
        local = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        flags = [False] * len(dets)
        for i in local:
            d = dets[i]
            dt = d.box.as_tuple()
            best = -1
            best_v = 0.0
            for j, g in enumerate(gts):
                if taken[j] or g.label != d.label:
                    continue
                v = box_iou(dt, g.box.as_tuple())
                if v > best_v:
                    best_v, best = v, j
            if best >= 0 and best_v >= t:
                flags[i] = True
                taken[best] = True
        for i, d in enumerate(dets):
            ranked.append((d.score, arrival, flags[i]))
            arrival += 1
    ranked.sort(key=lambda e: (-e[0], e[1]))

    # explicit PR staircase
    staircase: list[tuple[float, float]] = []
    tp = fp = 0
    for _, _, flag in ranked:
        if flag:
            tp += 1
        else:
            fp += 1
        staircase.append((tp / n_gt, tp / (tp + fp)))

    # direct 101-point sum with max-over-suffix interpolation
    total = 0.0
    for i in range(101):
        r = i / 100
        best_p = 0.0
        for rec, prec in staircase:
            if rec >= r and prec > best_p:
                best_p = prec
        total += best_p
    return total / 101
