"""Box overlays drawn straight into (3, H, W) images."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .boxgeom import Box

DETECTION_COLOR = (1.0, 0.0, 0.0)
VEHICLE_COLOR = (0.0, 1.0, 0.0)
IGNORE_COLOR = (1.0, 0.0, 1.0)


def draw_box(image: np.ndarray, box: Box, color, thickness: int = 2) -> None:
    """Draw an outline just inside ``box`` in place; parts off the image are clipped."""
    _, h, w = image.shape
    x0, y0 = math.floor(box.x_min), math.floor(box.y_min)
    x1, y1 = math.ceil(box.x_max) - 1, math.ceil(box.y_max) - 1
    if x1 < 0 or y1 < 0 or x0 >= w or y0 >= h:
        return
    col = np.asarray(color, dtype=image.dtype)[:, None, None]
    cx0, cy0, cx1, cy1 = max(x0, 0), max(y0, 0), min(x1, w - 1), min(y1, h - 1)
    t = thickness
    for ya, yb in ((y0, y0 + t - 1), (y1 - t + 1, y1)):
        ya, yb = max(ya, cy0), min(yb, cy1)
        if ya <= yb:
            image[:, ya:yb + 1, cx0:cx1 + 1] = col
    for xa, xb in ((x0, x0 + t - 1), (x1 - t + 1, x1)):
        xa, xb = max(xa, cx0), min(xb, cx1)
        if xa <= xb:
            image[:, cy0:cy1 + 1, xa:xb + 1] = col


def overlay(image: np.ndarray, boxes: Iterable[tuple[Box, tuple]]) -> np.ndarray:
    """Copy of ``image`` with each ``(box, color)`` outlined."""
    out = np.array(image, copy=True)
    for box, color in boxes:
        draw_box(out, box, color)
    return out
