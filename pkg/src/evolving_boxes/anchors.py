"""Anchor grid generation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AnchorSpec:
    grid_w: int
    grid_h: int
    scales: tuple
    ratios: tuple  # (w, h) pairs
    image_w: int
    image_h: int

    @classmethod
    def from_model_config(cls, cfg) -> "AnchorSpec":
        return cls(cfg.grid_w, cfg.grid_h, tuple(cfg.anchor_scales),
                   tuple(tuple(r) for r in cfg.anchor_ratios), cfg.image_w, cfg.image_h)

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self) -> int:
        return self.grid_w * self.grid_h * self.per_cell


def generate_anchors(spec: AnchorSpec) -> np.ndarray:
    """(N, 4) center-form anchors, ordered cell (row-major), then scale, then ratio.

    Each anchor keeps the area ``scale**2``: a ratio ``w:h = r`` gives
    ``w = scale*sqrt(r)`` and ``h = scale/sqrt(r)``. Anchors are not clipped.
    """
    if spec.grid_w * spec.grid_h <= 0 or not spec.scales or not spec.ratios:
        raise ConfigError(f"invalid anchor spec {spec}")
    pitch_x = spec.image_w / spec.grid_w
    pitch_y = spec.image_h / spec.grid_h
    shapes = []
    for s in spec.scales:
        for rw, rh in spec.ratios:
            r = math.sqrt(rw / rh)
            shapes.append((s * r, s / r))
    shapes = np.asarray(shapes, dtype=np.float64)                 # K, 2
    ys, xs = np.meshgrid((np.arange(spec.grid_h) + 0.5) * pitch_y,
                         (np.arange(spec.grid_w) + 0.5) * pitch_x, indexing="ij")
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1)           # G, 2
    k, g = len(shapes), len(centers)
    out = np.empty((g, k, 4))
    out[:, :, :2] = centers[:, None, :]
    out[:, :, 2:] = shapes[None, :, :]
    return out.reshape(g * k, 4)
