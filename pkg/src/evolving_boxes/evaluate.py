"""Detection matching, PR curves, average precision and latency benchmarks."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxgeom import Box, Detection, boxes_to_array, iou_matrix
from .data import Annotation, Sample, _fmt, _number, _read_csv
from .errors import FormatError
from .loss import centers_in_regions

DETECTION_HEADER = ["id", "x_min", "y_min", "width", "height", "score"]
PR_HEADER = ["threshold", "precision", "recall"]

TP, FP, EXCLUDED = "tp", "fp", "excluded"


@dataclass
class MatchResult:
    labels: list[str]          # per input detection: tp / fp / excluded
    matched_gt: list[int | None]
    false_negatives: int

    @property
    def tp(self) -> int:
        return self.labels.count(TP)

    @property
    def fp(self) -> int:
        return self.labels.count(FP)


def match_detections(dets: Sequence[Detection], gts: Sequence[Annotation],
                     iou_threshold: float) -> MatchResult:
    """Greedy matching in descending score order (input order breaks ties).

    A detection whose center falls in an ignore region is excluded; ignored
    ground truths are never false negatives.
    """
    vehicles = [a.box for a in gts if not a.ignore]
    regions = boxes_to_array(a.box for a in gts if a.ignore)
    det_boxes = boxes_to_array(d.box for d in dets)
    excluded = centers_in_regions(det_boxes, regions)
    ious = iou_matrix(det_boxes, boxes_to_array(vehicles)) if vehicles else None
    labels: list[str] = [EXCLUDED] * len(dets)
    matched: list[int | None] = [None] * len(dets)
    taken = np.zeros(len(vehicles), dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    for i in order:
        if excluded[i]:
            continue
        labels[i] = FP
        if ious is None:
            continue
        row = np.where(taken, -1.0, ious[i])
        j = int(row.argmax())
        if row[j] >= iou_threshold:
            labels[i], matched[i] = TP, j
            taken[j] = True
    return MatchResult(labels, matched, int((~taken).sum()))


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class PRCurve:
    points: list[PRPoint]
    recall_defined: bool = True   # False when there were no ground truths


def precision_recall_curve(scored: Iterable[tuple[float, bool]], total_gts: int) -> PRCurve:
    """One point per distinct score, swept from high to low.

    ``scored`` holds ``(score, is_true_positive)`` for every counted detection.
    """
    if total_gts < 0:
        raise ValueError("total_gts must be >= 0")
    items = sorted(scored, key=lambda t: -t[0])
    points = []
    tp = fp = 0
    for k, (score, hit) in enumerate(items):
        tp += bool(hit)
        fp += not hit
        if k + 1 < len(items) and items[k + 1][0] == score:
            continue
        recall = tp / total_gts if total_gts else 0.0
        points.append(PRPoint(float(score), tp / (tp + fp), recall))
    return PRCurve(points, recall_defined=total_gts > 0)


def average_precision(curve: PRCurve | Sequence[PRPoint]) -> float:
    """All-point AP: area under the precision envelope."""
    points = curve.points if isinstance(curve, PRCurve) else list(curve)
    if not points:
        return 0.0
    recall = np.array([0.0] + [p.recall for p in points])
    precision = np.array([p.precision for p in points])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(recall) * envelope))


@dataclass
class EvalResult:
    overall_ap: float
    per_condition: dict[str, float]
    pr_curve: PRCurve
    tp: int
    fp: int
    fn: int

    def report(self) -> str:
        lines = [f"overall mAP {100 * self.overall_ap:.2f}"]
        lines += [f"{c} mAP {100 * ap:.2f}" for c, ap in self.per_condition.items()]
        lines.append(f"tp {self.tp} fp {self.fp} fn {self.fn}")
        return "\n".join(lines)


def _score_images(samples: Sequence[Sample], detections: Mapping[str, Sequence[Detection]],
                  iou_threshold: float):
    scored, gts, counts = [], 0, [0, 0, 0]
    for s in samples:
        dets = detections.get(s.id, [])
        m = match_detections(dets, s.annotations, iou_threshold)
        scored += [(d.score, lab == TP) for d, lab in zip(dets, m.labels) if lab != EXCLUDED]
        gts += len(s.vehicles)
        counts[0] += m.tp
        counts[1] += m.fp
        counts[2] += m.false_negatives
    return scored, gts, counts


def evaluate(detections: Mapping[str, Sequence[Detection]], samples: Sequence[Sample],
             iou_threshold: float = 0.7) -> EvalResult:
    """Overall and per-condition AP of per-image detections against ``samples``."""
    scored, gts, (tp, fp, fn) = _score_images(samples, detections, iou_threshold)
    curve = precision_recall_curve(scored, gts)
    per_condition = {}
    for cond in sorted({s.condition for s in samples}):
        subset = [s for s in samples if s.condition == cond]
        sc, n, _ = _score_images(subset, detections, iou_threshold)
        per_condition[cond] = average_precision(precision_recall_curve(sc, n))
    return EvalResult(average_precision(curve), per_condition, curve, tp, fp, fn)


def detect_all(model, samples: Sequence[Sample], **kwargs) -> dict[str, list[Detection]]:
    return {s.id: model.detect(s.image, **kwargs) for s in samples}


def evaluate_model(model, samples: Sequence[Sample], iou_threshold: float = 0.7) -> EvalResult:
    return evaluate(detect_all(model, samples), samples, iou_threshold)


def ground_truth_detections(samples: Sequence[Sample]) -> dict[str, list[Detection]]:
    return {s.id: [Detection(a.box, 1.0) for a in s.vehicles] for s in samples}


# ---------------------------------------------------------------------------
# files


def write_detections(path, detections: Mapping[str, Sequence[Detection]]) -> None:
    """Rows sorted by image id, then by descending score."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DETECTION_HEADER)
        for ident in sorted(detections):
            for d in sorted(detections[ident], key=lambda d: -d.score):
                b = d.box
                writer.writerow([ident, _fmt(b.x_min), _fmt(b.y_min), _fmt(b.w), _fmt(b.h),
                                 repr(float(d.score))])


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, row in _read_csv(path, DETECTION_HEADER):
        x, y, w, h, score = (_number(t, path, lineno, name)
                             for t, name in zip(row[1:], DETECTION_HEADER[1:]))
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: non-positive box size", line=lineno)
        out.setdefault(row[0], []).append(Detection(Box.from_corners(x, y, w, h), score))
    return out


def write_pr_curve(path, curve: PRCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PR_HEADER)
        for p in curve.points:
            writer.writerow([repr(p.threshold), repr(p.precision), repr(p.recall)])


def read_pr_curve(path) -> list[PRPoint]:
    return [PRPoint(*(_number(t, path, lineno, n) for t, n in zip(row, PR_HEADER)))
            for lineno, row in _read_csv(path, PR_HEADER)]


# ---------------------------------------------------------------------------
# latency


@dataclass
class BenchResult:
    timings_ms: list[float]
    stage_ms: dict[str, float] = field(default_factory=dict)   # mean per stage

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.timings_ms))

    @property
    def p50_ms(self) -> float:
        return float(np.percentile(self.timings_ms, 50))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.timings_ms, 95))

    def report(self) -> str:
        stages = " ".join(f"{k} {v:.2f}" for k, v in self.stage_ms.items())
        return (f"images {len(self.timings_ms)} mean {self.mean_ms:.2f} ms "
                f"p50 {self.p50_ms:.2f} ms p95 {self.p95_ms:.2f} ms\nstages(ms) {stages}")


def bench(model, images: Sequence[np.ndarray], repetitions: int = 1,
          warmup: int = 3) -> BenchResult:
    """Wall-clock ``model.detect`` per image after ``warmup`` untimed calls."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if not len(images):
        raise ValueError("bench needs at least one image")
    for k in range(warmup):
        model.detect(images[k % len(images)])
    timings, stages = [], {"dcn": [], "pn": [], "ftn": []}
    for _ in range(repetitions):
        for img in images:
            t = {}
            model.detect(img, timings=t)
            timings.append(1e3 * t["total"])
            for k in stages:
                stages[k].append(1e3 * t[k])
    return BenchResult(timings, {k: float(np.mean(v)) for k, v in stages.items()})
