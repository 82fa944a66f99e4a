"""Target assignment, the two-stage loss, hard mining and minibatch sampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .boxgeom import BoxDelta, boxes_to_array, encode_array, iou_matrix, to_corners

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1

_LABEL_NAMES = {POSITIVE: "positive", NEGATIVE: "negative", IGNORED: "ignored"}


@dataclass(frozen=True)
class Assignment:
    label: str
    matched_gt: int | None = None
    target_delta: BoxDelta | None = None


@dataclass
class Assignments:
    """Array form of per-box assignments (labels use POSITIVE/NEGATIVE/IGNORED)."""

    labels: np.ndarray    # (N,) int8
    matched: np.ndarray   # (N,) int, -1 when not positive
    targets: np.ndarray   # (N, 4), zero rows when not positive

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Assignment:
        lab = int(self.labels[i])
        if lab != POSITIVE:
            return Assignment(_LABEL_NAMES[lab])
        return Assignment("positive", int(self.matched[i]), BoxDelta(*map(float, self.targets[i])))

    def to_list(self) -> list[Assignment]:
        return [self[i] for i in range(len(self))]

    @property
    def positives(self) -> np.ndarray:
        return np.nonzero(self.labels == POSITIVE)[0]

    @property
    def negatives(self) -> np.ndarray:
        return np.nonzero(self.labels == NEGATIVE)[0]


def _split_gts(gts) -> tuple[np.ndarray, np.ndarray]:
    boxes = boxes_to_array(a.box for a in gts if not a.ignore)
    ignore = boxes_to_array(a.box for a in gts if a.ignore)
    return boxes, ignore


def centers_in_regions(boxes: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """True for each box whose center lies inside any region (edges inclusive)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(regions) == 0 or len(boxes) == 0:
        return np.zeros(len(boxes), dtype=bool)
    c = to_corners(regions)
    x, y = boxes[:, 0:1], boxes[:, 1:2]
    return ((x >= c[:, 0]) & (x <= c[:, 2]) & (y >= c[:, 1]) & (y <= c[:, 3])).any(axis=1)


def _finish(labels, matched, refs, gt_boxes) -> Assignments:
    targets = np.zeros((len(labels), 4))
    pos = labels == POSITIVE
    if pos.any():
        targets[pos] = encode_array(gt_boxes[matched[pos]], refs[pos])
    matched = np.where(pos, matched, -1)
    return Assignments(labels.astype(np.int8), matched, targets)


def assign_pn_targets(anchors: np.ndarray, gts, image_w: float, image_h: float,
                      pos_iou: float = 0.5, neg_iou: float = 0.3) -> Assignments:
    """Label anchors: IoU > 0.5 positive, < 0.3 negative, else ignored.

    Anchors crossing the image border or centered in an ignore region are
    ignored. A ground truth with no anchor above ``pos_iou`` claims its
    best eligible anchor (lowest index on ties).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes, regions = _split_gts(gts)
    n = len(anchors)
    c = to_corners(anchors)
    eligible = ((c[:, 0] >= 0) & (c[:, 1] >= 0) & (c[:, 2] <= image_w) & (c[:, 3] <= image_h)
                & ~centers_in_regions(anchors, regions))
    labels = np.full(n, IGNORED)
    matched = np.full(n, -1)
    if len(gt_boxes) == 0:
        labels[eligible] = NEGATIVE
        return _finish(labels, matched, anchors, gt_boxes)
    ious = iou_matrix(anchors, gt_boxes)
    best = ious.max(axis=1)
    matched = ious.argmax(axis=1)
    labels[best < neg_iou] = NEGATIVE
    labels[best > pos_iou] = POSITIVE
    labels[~eligible] = IGNORED
    masked = np.where(eligible[:, None], ious, -1.0)
    for j in range(len(gt_boxes)):
        if (masked[:, j] > pos_iou).any():
            continue
        i = int(masked[:, j].argmax())
        if masked[i, j] > 0:
            labels[i] = POSITIVE
            matched[i] = j
    return _finish(labels, matched, anchors, gt_boxes)


def assign_ftn_targets(boxes: np.ndarray, gts, image_w: float, image_h: float,
                       pos_iou: float = 0.45, neg_band: tuple = (0.1, 0.3)) -> Assignments:
    """Label proposals: IoU >= 0.45 positive, IoU in [0.1, 0.3] negative."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes, regions = _split_gts(gts)
    n = len(boxes)
    labels = np.full(n, IGNORED)
    matched = np.full(n, -1)
    if n and len(gt_boxes):
        ious = iou_matrix(boxes, gt_boxes)
        best = ious.max(axis=1)
        matched = ious.argmax(axis=1)
        labels[(best >= neg_band[0]) & (best <= neg_band[1])] = NEGATIVE
        labels[best >= pos_iou] = POSITIVE
    labels[centers_in_regions(boxes, regions)] = IGNORED
    return _finish(labels, matched, boxes, gt_boxes)


def hard_mine(losses: Sequence[float], fraction: float) -> np.ndarray:
    """Indices of the ``ceil(fraction * n)`` largest losses (lower index first on ties)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    losses = np.asarray(losses, dtype=np.float64).ravel()
    n = losses.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(n, math.ceil(round(fraction * n, 9)))
    order = np.lexsort((np.arange(n), -losses))
    return order[:k]


def sample_minibatch(assignments: Assignments, size: int, pos_fraction: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Up to ``size * pos_fraction`` positives, the rest negatives; sorted indices."""
    if size < 1:
        raise ValueError("minibatch size must be >= 1")
    pos, neg = assignments.positives, assignments.negatives
    n_pos = min(len(pos), int(size * pos_fraction))
    n_neg = min(len(neg), size - n_pos)
    chosen = np.concatenate([rng.choice(pos, n_pos, replace=False),
                             rng.choice(neg, n_neg, replace=False)]).astype(np.int64)
    return np.sort(chosen)


# ---------------------------------------------------------------------------
# scalar loss definitions


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def localization_loss(predicted: BoxDelta, target: BoxDelta) -> float:
    return sum(smooth_l1(p - t) for p, t in zip(predicted.as_array(), target.as_array()))


def classification_loss(score: float, positive: bool) -> float:
    """``-log s`` for a positive, ``-log(1 - s)`` for a negative."""
    return -math.log(score) if positive else -math.log1p(-score)


@dataclass
class StageSamples:
    """One stage's sampled outputs: probabilities, labels and deltas."""

    scores: np.ndarray          # (n,) in (0, 1)
    positive: np.ndarray        # (n,) bool
    deltas: np.ndarray          # (n, 4) predicted
    targets: np.ndarray         # (n, 4), only positive rows are read


@dataclass
class LossBreakdown:
    total: float
    pn_cls: float
    pn_loc: float
    ftn_cls: float
    ftn_loc: float
    pn_pos: int = 0
    pn_neg: int = 0
    ftn_pos: int = 0
    ftn_neg: int = 0


def _stage_terms(s: StageSamples | None) -> tuple[float, float, int, int]:
    if s is None or len(s.scores) == 0:
        return 0.0, 0.0, 0, 0
    pos = np.asarray(s.positive, dtype=bool)
    cls = np.mean([classification_loss(float(sc), bool(p)) for sc, p in zip(s.scores, pos)])
    loc = 0.0
    if pos.any():
        diffs = np.asarray(s.deltas, dtype=np.float64)[pos] - np.asarray(s.targets)[pos]
        loc = float(np.mean([sum(smooth_l1(v) for v in row) for row in diffs]))
    return float(cls), loc, int(pos.sum()), int((~pos).sum())


def multistage_loss(pn: StageSamples | None, ftn: StageSamples | None,
                    alpha: float, lam: float) -> LossBreakdown:
    """``alpha*(cls_pn + lam*loc_pn) + (1-alpha)*(cls_ftn + lam*loc_ftn)``.

    Classification terms are means over a stage's samples, localization
    terms means over its positives (zero when it has none).
    """
    pc, pl, pp, pneg = _stage_terms(pn)
    fc, fl, fp, fneg = _stage_terms(ftn)
    total = alpha * (pc + lam * pl) + (1 - alpha) * (fc + lam * fl)
    return LossBreakdown(total, pc, pl, fc, fl, pp, pneg, fp, fneg)


# ---------------------------------------------------------------------------
# the same loss as graph nodes


def stage_loss_nodes(head: ad.Node, rows: np.ndarray, positive: np.ndarray,
                     targets: np.ndarray) -> tuple[ad.Node | None, ad.Node | None]:
    """Mean classification and localization nodes for selected head rows.

    ``head`` is an (R, 5) node of four deltas and a score logit; ``rows``
    picks the samples, ``positive``/``targets`` are aligned with ``rows``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size == 0:
        return None, None
    positive = np.asarray(positive, dtype=bool)
    picked = ad.gather_rows(head, rows)
    logits = ad.reshape(ad.column_slice(picked, 4, 5), (rows.size,))
    cls = ad.scale(ad.total(ad.binary_log_loss(logits, positive)), 1.0 / rows.size)
    pos_rows = np.nonzero(positive)[0]
    if pos_rows.size == 0:
        return cls, None
    deltas = ad.column_slice(ad.gather_rows(picked, pos_rows), 0, 4)
    diff = ad.subtract_constant(deltas, np.asarray(targets)[pos_rows])
    loc = ad.scale(ad.total(ad.smooth_l1(diff)), 1.0 / pos_rows.size)
    return cls, loc


def combine_stage_losses(pn_terms, ftn_terms, alpha: float, lam: float,
                         graph: ad.Graph) -> ad.Node:
    parts = []
    for weight, (cls, loc) in ((alpha, pn_terms), (1 - alpha, ftn_terms)):
        if cls is not None:
            parts.append(ad.scale(cls, weight))
        if loc is not None:
            parts.append(ad.scale(loc, weight * lam))
    if not parts:
        return graph.constant(np.zeros(1))
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out
