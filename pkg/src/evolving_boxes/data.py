"""Synthetic traffic scenes, PPM/CSV I/O and dataset directories.

Scenes are small top-down road images with vehicle-like rounded rectangles
(body, windows, wheels), four lighting conditions and hatched "ignore"
regions that contain unlabeled vehicles. Pixel values are multiples of
1/255, so a scene survives a PPM round trip bit-exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .boxgeom import Box
from .config import CONDITIONS, SceneSpec
from .errors import FormatError

ANNOTATION_HEADER = ["id", "x_min", "y_min", "width", "height", "ignore", "condition"]


@dataclass(frozen=True)
class Annotation:
    box: Box
    ignore: bool = False


@dataclass
class Sample:
    image: np.ndarray                     # (3, H, W) float32 in [0, 1]
    annotations: list[Annotation]
    condition: str
    id: str

    @property
    def vehicles(self) -> list[Annotation]:
        return [a for a in self.annotations if not a.ignore]

    @property
    def ignore_regions(self) -> list[Annotation]:
        return [a for a in self.annotations if a.ignore]


# ---------------------------------------------------------------------------
# scene rendering

_BACKGROUND = {
    # road gray, verge color, texture amplitude, global brightness
    "sunny": ((0.55, 0.55, 0.53), (0.45, 0.62, 0.35), 0.05, 1.0),
    "cloudy": ((0.50, 0.50, 0.52), (0.42, 0.50, 0.40), 0.03, 0.85),
    "rainy": ((0.36, 0.38, 0.42), (0.30, 0.38, 0.32), 0.06, 0.7),
    "night": ((0.14, 0.14, 0.18), (0.08, 0.10, 0.10), 0.04, 0.45),
}


def _smooth_noise(rng, h, w, cell=8):
    coarse = rng.standard_normal((h // cell + 2, w // cell + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _background(rng, spec: SceneSpec, condition: str) -> np.ndarray:
    h, w = spec.image_h, spec.image_w
    road, verge, amp, _ = _BACKGROUND[condition]
    img = np.empty((h, w, 3))
    img[:] = verge
    # a horizontal road band covering most of the frame
    top = int(rng.integers(0, max(1, h // 8)))
    bottom = h - int(rng.integers(0, max(1, h // 8)))
    img[top:bottom] = road
    # dashed lane markings
    n_lanes = int(rng.integers(1, 4))
    for _ in range(n_lanes):
        y = int(rng.integers(top + 2, max(top + 3, bottom - 2)))
        dash, gap = int(rng.integers(6, 12)), int(rng.integers(5, 10))
        offset = int(rng.integers(0, dash + gap))
        for x in range(-offset, w, dash + gap):
            img[y:y + 1, max(x, 0):max(x + dash, 0)] = (0.85, 0.85, 0.8)
    img += amp * _smooth_noise(rng, h, w)[..., None]
    img += 0.02 * rng.standard_normal((h, w, 1))
    if condition == "rainy":
        streaks = rng.random((h, w)) < 0.02
        img[streaks] += 0.25
    return img


def _rounded_mask(h: int, w: int, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx = np.maximum(np.maximum(radius - xx, xx - (w - radius)), 0)
    dy = np.maximum(np.maximum(radius - yy, yy - (h - radius)), 0)
    return dx * dx + dy * dy <= radius * radius


def _draw_vehicle(img: np.ndarray, rng, x0: int, y0: int, w: int, h: int, condition: str):
    """Paint a vehicle whose bounding box is exactly [x0, x0+w) x [y0, y0+h)."""
    H, W, _ = img.shape
    if rng.random() < 0.6:
        body = rng.uniform(0.1, 0.95, 3)
    else:
        g = rng.uniform(0.05, 0.95)
        body = np.array([g, g, g * rng.uniform(0.95, 1.05)])
    if condition == "night":
        body = body * 0.5
    mask = _rounded_mask(h, w, max(1.0, min(w, h) * 0.2))
    shade = np.linspace(1.15, 0.8, h)[:, None, None]
    patch = np.clip(body * shade, 0, 1)
    patch = np.broadcast_to(patch, (h, w, 3)).copy()
    # wheels: dark blocks just inside the four corners
    wh, ww = max(1, h // 6), max(1, w // 5)
    for yy in (0, h - wh):
        for xx in (max(1, w // 8), w - max(1, w // 8) - ww):
            patch[yy:yy + wh, xx:xx + ww] = 0.05
    # windshield and rear window
    win = np.array([0.12, 0.16, 0.22]) if condition != "night" else np.array([0.03, 0.03, 0.05])
    fy0, fy1 = int(h * 0.18), max(int(h * 0.18) + 1, int(h * 0.42))
    fx0, fx1 = int(w * 0.15), max(int(w * 0.15) + 1, int(w * 0.85))
    patch[fy0:fy1, fx0:fx1] = win
    ry0, ry1 = int(h * 0.68), max(int(h * 0.68) + 1, int(h * 0.82))
    patch[ry0:ry1, fx0:fx1] = win * 1.3
    if condition == "night":
        lh = max(1, h // 8)
        lw = max(1, w // 6)
        patch[h - lh - 1:h - 1, 1:1 + lw] = (1.0, 0.95, 0.6)
        patch[h - lh - 1:h - 1, w - lw - 1:w - 1] = (1.0, 0.95, 0.6)
    region = img[y0:y0 + h, x0:x0 + w]
    region[mask] = patch[mask]
    # the outermost rows/columns carry the body color so the box stays tight
    return img


def _sample_vehicle(rng, spec: SceneSpec) -> tuple[int, int]:
    side = rng.uniform(spec.vehicle_size_min, spec.vehicle_size_max)
    aspect = np.exp(rng.uniform(np.log(spec.aspect_min), np.log(spec.aspect_max)))
    w = int(round(side * np.sqrt(aspect)))
    h = int(round(side / np.sqrt(aspect)))
    return min(max(w, 2), spec.image_w), min(max(h, 2), spec.image_h)


def _center_inside(x0, y0, w, h, regions) -> bool:
    cx, cy = x0 + w / 2, y0 + h / 2
    return any(rx <= cx <= rx + rw and ry <= cy <= ry + rh for rx, ry, rw, rh in regions)


def _hatch(img: np.ndarray, x0: int, y0: int, w: int, h: int):
    yy, xx = np.mgrid[y0:y0 + h, x0:x0 + w]
    stripes = ((xx + yy) % 6) < 2
    region = img[y0:y0 + h, x0:x0 + w]
    region[stripes] = region[stripes] * 0.4 + 0.6 * np.array([0.9, 0.8, 0.1])


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    """Render scene ``index``; a pure function of ``(spec, index)``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, index])
    condition = spec.condition
    if condition == "mixed":
        condition = CONDITIONS[int(rng.integers(len(CONDITIONS)))]
    H, W = spec.image_h, spec.image_w
    img = _background(rng, spec, condition)

    regions = []
    n_ignore = int(rng.integers(spec.ignore_count_min, spec.ignore_count_max + 1))
    for _ in range(n_ignore):
        rw = int(rng.integers(max(4, W // 6), max(5, W // 3)))
        rh = int(rng.integers(max(4, H // 6), max(5, H // 3)))
        rx = int(rng.integers(0, W - rw + 1))
        ry = int(rng.integers(0, H - rh + 1))
        regions.append((rx, ry, rw, rh))

    # unlabeled vehicles inside ignore regions go underneath the hatching
    for rx, ry, rw, rh in regions:
        for _ in range(int(rng.integers(1, 3))):
            w, h = _sample_vehicle(rng, spec)
            w, h = min(w, rw), min(h, rh)
            if w < 2 or h < 2:
                continue
            x0 = rx + int(rng.integers(0, rw - w + 1))
            y0 = ry + int(rng.integers(0, rh - h + 1))
            _draw_vehicle(img, rng, x0, y0, w, h, condition)

    count = int(rng.integers(spec.vehicle_count_min, spec.vehicle_count_max + 1))
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(count):
        w, h = _sample_vehicle(rng, spec)
        occlude = bool(placed) and rng.random() < spec.occlusion_probability
        for attempt in range(60):
            if occlude and attempt < 30:
                px, py, pw, ph = placed[int(rng.integers(len(placed)))]
                x0 = int(round(px + rng.uniform(-0.6, 0.6) * pw + (pw - w) / 2))
                y0 = int(round(py + rng.uniform(-0.6, 0.6) * ph + (ph - h) / 2))
                x0 = min(max(x0, 0), W - w)
                y0 = min(max(y0, 0), H - h)
            else:
                x0 = int(rng.integers(0, W - w + 1))
                y0 = int(rng.integers(0, H - h + 1))
            if _center_inside(x0, y0, w, h, regions):
                continue
            if not occlude and attempt < 40 and any(
                    _overlap_fraction((x0, y0, w, h), p) > 0.3 for p in placed):
                continue
            break
        else:
            x0, y0 = _free_spot(W, H, w, h, regions)
        placed.append((x0, y0, w, h))
        _draw_vehicle(img, rng, x0, y0, w, h, condition)

    for rx, ry, rw, rh in regions:
        _hatch(img, rx, ry, rw, rh)

    img = img * _BACKGROUND[condition][3]
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    anns = [Annotation(Box.from_corners(x, y, w, h)) for x, y, w, h in placed]
    anns += [Annotation(Box.from_corners(x, y, w, h), ignore=True) for x, y, w, h in regions]
    image = np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)
    return Sample(image, anns, condition, f"{spec.seed:04d}_{index:06d}")


def _overlap_fraction(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih / min(aw * ah, bw * bh)


def _free_spot(W, H, w, h, regions) -> tuple[int, int]:
    """First position in a raster scan whose center avoids every ignore region."""
    for y0 in range(0, H - h + 1, 2):
        for x0 in range(0, W - w + 1, 2):
            if not _center_inside(x0, y0, w, h, regions):
                return x0, y0
    return 0, 0


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> list[Sample]:
    return [generate_scene(spec, i) for i in range(start, start + count)]


# ---------------------------------------------------------------------------
# PPM


def write_image_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    _, h, w = image.shape
    data = np.round(image.transpose(1, 2, 0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def _ppm_tokens(buf: bytes, count: int, pos: int):
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def read_image_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval <= 255) PPM into a (3, H, W) float32 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {buf[:2]!r})")
    tokens, pos = _ppm_tokens(buf, 3, 2)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric PPM header") from exc
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(f"{path}: unsupported PPM geometry {w}x{h} maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: truncated PPM header")
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise FormatError(f"{path}: truncated pixel data ({len(buf) - pos} of {need} bytes)")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return np.ascontiguousarray(data.transpose(2, 0, 1), dtype=np.float32) / np.float32(maxval)


# ---------------------------------------------------------------------------
# annotation CSV


class AnnotationRow(NamedTuple):
    id: str
    annotation: Annotation
    condition: str


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def write_annotations(path, samples: Iterable[Sample]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for s in samples:
            for a in s.annotations:
                b = a.box
                writer.writerow([s.id, _fmt(b.x_min), _fmt(b.y_min), _fmt(b.w), _fmt(b.h),
                                 int(a.ignore), s.condition])


def _read_csv(path, header: Sequence[str]):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, header required", line=1) from None
        if [c.strip() for c in first] != list(header):
            raise FormatError(f"{path}: expected header {','.join(header)}", line=1)
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: expected {len(header)} columns, got {len(row)}",
                                  line=lineno)
            yield lineno, row


def _number(text: str, path, lineno: int, what: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise FormatError(f"{path}: {what} {text!r} is not a number", line=lineno) from None
    if not np.isfinite(v):
        raise FormatError(f"{path}: {what} {text!r} is not finite", line=lineno)
    return v


def read_annotations(path) -> list[AnnotationRow]:
    rows = []
    for lineno, row in _read_csv(path, ANNOTATION_HEADER):
        x, y, w, h = (_number(t, path, lineno, name) for t, name in
                      zip(row[1:5], ANNOTATION_HEADER[1:5]))
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: non-positive box size", line=lineno)
        if row[5].strip() not in ("0", "1"):
            raise FormatError(f"{path}: ignore must be 0 or 1, got {row[5]!r}", line=lineno)
        rows.append(AnnotationRow(row[0], Annotation(Box.from_corners(x, y, w, h),
                                                     row[5].strip() == "1"), row[6]))
    return rows


def group_annotations(rows: Iterable[AnnotationRow]) -> dict[str, list[Annotation]]:
    out: dict[str, list[Annotation]] = {}
    for r in rows:
        out.setdefault(r.id, []).append(r.annotation)
    return out


# ---------------------------------------------------------------------------
# splits and dataset directories


def split_dataset(samples: Sequence, train_fraction: float, seed: int):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(len(samples) * train_fraction))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.csv"
IMAGES = "images"


def save_dataset(directory, samples: Sequence[Sample], spec: SceneSpec | None = None) -> None:
    directory = Path(directory)
    (directory / IMAGES).mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image_ppm(directory / IMAGES / f"{s.id}.ppm", s.image)
    write_annotations(directory / ANNOTATIONS, samples)
    manifest = {
        "count": len(samples),
        "scene_spec": asdict(spec) if spec is not None else None,
        "seed": spec.seed if spec is not None else None,
        "images": [{"id": s.id, "condition": s.condition} for s in samples],
    }
    with open(directory / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    with open(directory / MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    anns = group_annotations(read_annotations(directory / ANNOTATIONS))
    samples = []
    for entry in manifest["images"]:
        image = read_image_ppm(directory / IMAGES / f"{entry['id']}.ppm")
        samples.append(Sample(image, anns.get(entry["id"], []), entry["condition"], entry["id"]))
    return samples


def dataset_ids(directory) -> list[str]:
    with open(Path(directory) / MANIFEST, encoding="utf-8") as fh:
        return [e["id"] for e in json.load(fh)["images"]]
