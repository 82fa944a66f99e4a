"""Box geometry: center-form boxes, IoU, delta encoding, clipping and NMS.

Scalar helpers take :class:`Box` values. The ``*_array`` variants work on
(N, 4) float arrays with columns ``cx, cy, w, h`` and are what the model uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidBoxError

LOG_RATIO_CLAMP = 4.0


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x_min: float, y_min: float, w: float, h: float) -> "Box":
        return cls(x_min + w / 2, y_min + h / 2, w, h)

    @property
    def x_min(self) -> float:
        return self.cx - self.w / 2

    @property
    def y_min(self) -> float:
        return self.cy - self.h / 2

    @property
    def x_max(self) -> float:
        return self.cx + self.w / 2

    @property
    def y_max(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_array() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr).reshape(-1, 4)]


def to_corners(arr: np.ndarray) -> np.ndarray:
    """(N, 4) center form -> (N, 4) ``x1, y1, x2, y2``."""
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
    half = arr[:, 2:] / 2
    return np.concatenate([arr[:, :2] - half, arr[:, :2] + half], axis=1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    wh = c[:, 2:] - c[:, :2]
    return np.concatenate([c[:, :2] + wh / 2, wh], axis=1)


# ---------------------------------------------------------------------------
# IoU


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) center-form arrays -> (N, M)."""
    ca, cb = to_corners(a), to_corners(b)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


# ---------------------------------------------------------------------------
# delta parameterization


def encode_delta(target: Box, reference: Box) -> BoxDelta:
    if target.w <= 0 or target.h <= 0 or reference.w <= 0 or reference.h <= 0:
        raise InvalidBoxError(f"cannot encode {target} against {reference}: non-positive size")
    return BoxDelta(
        (target.cx - reference.cx) / reference.w,
        (target.cy - reference.cy) / reference.h,
        math.log(target.w / reference.w),
        math.log(target.h / reference.h),
    )


def decode_delta(delta: BoxDelta, reference: Box) -> Box:
    tw = min(max(delta.tw, -LOG_RATIO_CLAMP), LOG_RATIO_CLAMP)
    th = min(max(delta.th, -LOG_RATIO_CLAMP), LOG_RATIO_CLAMP)
    return Box(
        reference.cx + delta.tx * reference.w,
        reference.cy + delta.ty * reference.h,
        reference.w * math.exp(tw),
        reference.h * math.exp(th),
    )


def encode_array(targets: np.ndarray, references: np.ndarray) -> np.ndarray:
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    r = np.asarray(references, dtype=np.float64).reshape(-1, 4)
    if np.any(t[:, 2:] <= 0) or np.any(r[:, 2:] <= 0):
        raise InvalidBoxError("encode needs boxes with positive width and height")
    return np.stack([
        (t[:, 0] - r[:, 0]) / r[:, 2],
        (t[:, 1] - r[:, 1]) / r[:, 3],
        np.log(t[:, 2] / r[:, 2]),
        np.log(t[:, 3] / r[:, 3]),
    ], axis=1)


def decode_array(deltas: np.ndarray, references: np.ndarray) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    r = np.asarray(references, dtype=np.float64).reshape(-1, 4)
    logs = np.clip(d[:, 2:], -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    return np.concatenate([
        r[:, :2] + d[:, :2] * r[:, 2:],
        r[:, 2:] * np.exp(logs),
    ], axis=1)


# ---------------------------------------------------------------------------
# clipping


def clip_array(boxes: np.ndarray, img_w: float, img_h: float) -> np.ndarray:
    """Clamp corners to the image; boxes collapse to at least 1x1 pixel."""
    c = to_corners(boxes)

    def axis(lo, hi, extent):
        lo = np.clip(lo, 0, extent)
        hi = np.clip(hi, 0, extent)
        short = hi - lo < 1
        # grow toward the interior, staying inside [0, extent]
        lo = np.where(short, np.minimum(lo, extent - 1), lo)
        hi = np.where(short, lo + 1, hi)
        return lo, hi

    x1, x2 = axis(c[:, 0], c[:, 2], img_w)
    y1, y2 = axis(c[:, 1], c[:, 3], img_h)
    return from_corners(np.stack([x1, y1, x2, y2], axis=1))


def clip_to_image(box: Box, img_w: int, img_h: int) -> Box:
    return Box(*map(float, clip_array(box.as_array(), img_w, img_h)[0]))


# ---------------------------------------------------------------------------
# non-maximum suppression


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float,
                limit: int | None = None) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order.

    Equal scores keep the lower original index first. A box is suppressed
    only when its IoU with a kept box is strictly greater than ``threshold``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))
    c = to_corners(boxes)[order]
    area = (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(order[i])
        if limit is not None and len(keep) >= limit:
            break
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if rest.size == 0:
            break
        iw = np.minimum(c[i, 2], c[rest, 2]) - np.maximum(c[i, 0], c[rest, 0])
        ih = np.minimum(c[i, 3], c[rest, 3]) - np.maximum(c[i, 1], c[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ov = inter / (area[i] + area[rest] - inter)
        alive[rest[ov > threshold]] = False
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    if not 0 <= threshold <= 1:
        raise ValueError(f"NMS threshold must lie in [0, 1], got {threshold}")
    if not dets:
        return []
    keep = nms_indices(boxes_to_array(d.box for d in dets),
                       np.array([d.score for d in dets]), threshold)
    return [dets[i] for i in keep]
