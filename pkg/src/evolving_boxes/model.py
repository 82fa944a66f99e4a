"""The three networks: backbone with multi-layer fusion (DCN), proposal
network (PN) and fine-tuning network (FTN), plus the detection pipeline."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSpec, generate_anchors
from .boxgeom import Box, Detection, clip_array, decode_array, nms_indices
from .config import ModelConfig
from .errors import ConfigError, InvalidShapeError

NUM_BLOCKS = 5


@dataclass
class HyperFeature:
    map: ad.Node
    stride: float


@dataclass
class Proposal:
    box: Box
    score: float
    pn_feature: np.ndarray
    anchor_index: int


@dataclass
class PNOutput:
    """Per-anchor PN outputs (train mode keeps every anchor)."""

    fc: ad.Node          # (R, pn_fc_dim) post-ReLU features
    head: ad.Node        # (R, 5): four deltas and the score logit
    boxes: np.ndarray    # decoded and clipped, (R, 4)
    scores: np.ndarray   # (R,)

    @property
    def deltas(self) -> np.ndarray:
        return self.head.value[:, :4]


@dataclass
class Proposals:
    """Boxes that survived the PN filter, with their PN fc features."""

    boxes: np.ndarray
    scores: np.ndarray
    anchor_index: np.ndarray
    features: ad.Node    # (K, pn_fc_dim), rows of PNOutput.fc

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[Proposal]:
        for i in range(len(self)):
            yield Proposal(Box(*map(float, self.boxes[i])), float(self.scores[i]),
                           self.features.value[i], int(self.anchor_index[i]))

    def subset(self, index) -> "Proposals":
        index = np.asarray(index, dtype=np.int64)
        return Proposals(self.boxes[index], self.scores[index], self.anchor_index[index],
                         ad.gather_rows(self.features, index))


@dataclass
class FTNOutput:
    head: ad.Node        # (K, 5)
    boxes: np.ndarray
    scores: np.ndarray

    @property
    def deltas(self) -> np.ndarray:
        return self.head.value[:, :4]


def block_sizes(cfg: ModelConfig) -> list[tuple[int, int]]:
    """Spatial (h, w) of each backbone block's output."""
    h, w = cfg.image_h, cfg.image_w
    sizes = []
    for b in range(1, NUM_BLOCKS + 1):
        sizes.append((h, w))
        if b < NUM_BLOCKS:
            h, w = (h + h % 2) // 2, (w + w % 2) // 2
    return sizes


def hyper_shape(cfg: ModelConfig) -> tuple[int, int, int]:
    """(C, H, W) of the hyper feature map produced by :meth:`EvolvingBoxes.dcn_forward`."""
    sizes = block_sizes(cfg)
    if cfg.fusion_mode == "last-layer-only":
        return (cfg.backbone_widths[-1],) + sizes[-1]
    c = sum(cfg.backbone_widths[b - 1] for b in cfg.fusion_layers)
    if cfg.hyper_w and cfg.hyper_h:
        return c, cfg.hyper_h, cfg.hyper_w
    return (c,) + sizes[cfg.align_block - 1]


def _fused_blocks(cfg: ModelConfig) -> tuple:
    return (NUM_BLOCKS,) if cfg.fusion_mode == "last-layer-only" else tuple(cfg.fusion_layers)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every trainable parameter, in creation order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for b, width in enumerate(cfg.backbone_widths, 1):
        shapes[f"dcn.block{b}.conv.weight"] = (width, c_in, 3, 3)
        shapes[f"dcn.block{b}.conv.bias"] = (width,)
        c_in = width
    for b in _fused_blocks(cfg):
        shapes[f"dcn.bn{b}.gamma"] = (cfg.backbone_widths[b - 1],)
        shapes[f"dcn.bn{b}.beta"] = (cfg.backbone_widths[b - 1],)
    c_hyper = hyper_shape(cfg)[0]
    r2 = cfg.roi_size ** 2
    shapes["pn.conv6_1.weight"] = (cfg.conv6_1_filters, c_hyper, 3, 3)
    shapes["pn.conv6_1.bias"] = (cfg.conv6_1_filters,)
    shapes["pn.fc.weight"] = (cfg.pn_fc_dim, cfg.conv6_1_filters * r2)
    shapes["pn.fc.bias"] = (cfg.pn_fc_dim,)
    shapes["pn.head.weight"] = (5, cfg.pn_fc_dim)
    shapes["pn.head.bias"] = (5,)
    shapes["ftn.conv6_2.weight"] = (cfg.conv6_2_filters, c_hyper, 3, 3)
    shapes["ftn.conv6_2.bias"] = (cfg.conv6_2_filters,)
    shapes["ftn.fc.weight"] = (cfg.ftn_fc_dim, cfg.conv6_2_filters * r2)
    shapes["ftn.fc.bias"] = (cfg.ftn_fc_dim,)
    shapes["ftn.head.weight"] = (5, ftn_head_input_dim(cfg))
    shapes["ftn.head.bias"] = (5,)
    return shapes


def ftn_head_input_dim(cfg: ModelConfig) -> int:
    if cfg.concat_mode == "pn-plus-ftn":
        return cfg.ftn_fc_dim + cfg.pn_fc_dim
    return cfg.ftn_fc_dim


def buffer_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Batchnorm running statistics (saved with checkpoints, never trained)."""
    out = {}
    for b in _fused_blocks(cfg):
        out[f"dcn.bn{b}.running_mean"] = (cfg.backbone_widths[b - 1],)
        out[f"dcn.bn{b}.running_var"] = (cfg.backbone_widths[b - 1],)
    return out


class EvolvingBoxes:
    """Parameters plus forward passes of the DCN -> PN -> FTN cascade."""

    def __init__(self, config: ModelConfig, params: dict[str, ad.Parameter],
                 bn: dict[int, ad.BatchNormState]):
        self.config = config
        self.params = params
        self.bn = bn
        self.anchor_spec = AnchorSpec.from_model_config(config)
        self.anchors = generate_anchors(self.anchor_spec)
        self._roi_cache: dict[tuple, ad.RoiIndex] = {}

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "EvolvingBoxes":
        config.validate()
        if hyper_shape(config)[0] <= 0:
            raise ConfigError("fused channel count is zero")
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name.endswith(".bias") or name.endswith(".beta"):
                value = np.zeros(shape)
            elif name.endswith(".gamma"):
                value = np.ones(shape)
            elif name.startswith("dcn.") and config.backbone_init == "he":
                fan_in = int(np.prod(shape[1:]))
                value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            else:
                value = rng.standard_normal(shape) * config.init_std
            params[name] = ad.Parameter(name, value)
        bn = {b: ad.BatchNormState(config.backbone_widths[b - 1], config.bn_momentum,
                                   config.bn_eps) for b in _fused_blocks(config)}
        return cls(config, params, bn)

    # -- bookkeeping -------------------------------------------------------

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for b, st in self.bn.items():
            out[f"dcn.bn{b}.running_mean"] = st.running_mean
            out[f"dcn.bn{b}.running_var"] = st.running_var
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        b = int(name.split(".")[1][2:])
        setattr(self.bn[b], name.rsplit(".", 1)[1], np.asarray(value, np.float32).copy())

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.value for name, p in self.params.items()}
        out.update(self.buffers())
        return out

    def _p(self, g: ad.Graph, name: str) -> ad.Node:
        return g.param(self.params[name])

    def _act(self, x: ad.Node) -> ad.Node:
        return ad.relu(x) if self.config.head_activation == "relu" else x

    # -- DCN ---------------------------------------------------------------

    def dcn_forward(self, g: ad.Graph, image: np.ndarray, train: bool = False,
                    update_stats: bool = True) -> HyperFeature:
        cfg = self.config
        image = np.asarray(image)
        if image.shape != (3, cfg.image_h, cfg.image_w):
            raise InvalidShapeError(
                f"image shape {image.shape} does not match config (3, {cfg.image_h}, {cfg.image_w})")
        x = g.constant(image)
        outputs = {}
        for b in range(1, NUM_BLOCKS + 1):
            x = ad.relu(ad.conv2d(x, self._p(g, f"dcn.block{b}.conv.weight"),
                                  self._p(g, f"dcn.block{b}.conv.bias"), 1, 1))
            outputs[b] = x
            if b < NUM_BLOCKS:
                x = ad.maxpool2(ad.pad_to_even(x))
        c, h, w = hyper_shape(cfg)
        maps = []
        for b in _fused_blocks(cfg):
            m = ad.resample_bilinear(outputs[b], h, w)
            m = ad.batchnorm(m, self._p(g, f"dcn.bn{b}.gamma"), self._p(g, f"dcn.bn{b}.beta"),
                             self.bn[b], train=train, update_stats=update_stats)
            maps.append(m)
        fused = maps[0] if len(maps) == 1 else ad.concat_channels(maps)
        return HyperFeature(fused, cfg.image_w / w)

    # -- PN ----------------------------------------------------------------

    def pn_forward(self, g: ad.Graph, hyper: HyperFeature,
                   anchors: np.ndarray | None = None) -> PNOutput:
        """Score and regress every anchor (the train-mode view)."""
        cfg = self.config
        conv = self._act(ad.conv2d(hyper.map, self._p(g, "pn.conv6_1.weight"),
                                 self._p(g, "pn.conv6_1.bias"), 1, 1))
        if anchors is None:
            anchors = self.anchors
            pooled = ad.roi_maxpool(conv, self._anchor_index(hyper.stride, conv.shape[1:]))
        else:
            pooled = ad.roi_maxpool(conv, anchors, hyper.stride, cfg.roi_size, cfg.roi_size)
        flat = ad.reshape(pooled, (len(anchors), -1))
        fc = self._act(ad.linear(flat, self._p(g, "pn.fc.weight"), self._p(g, "pn.fc.bias")))
        head = ad.linear(fc, self._p(g, "pn.head.weight"), self._p(g, "pn.head.bias"))
        return PNOutput(fc, head, *self._decode(head.value, anchors))

    def _anchor_index(self, stride: float, hw: tuple) -> ad.RoiIndex:
        key = (stride,) + tuple(hw)
        if key not in self._roi_cache:
            self._roi_cache[key] = ad.RoiIndex(self.anchors, stride, hw[0], hw[1],
                                               self.config.roi_size, self.config.roi_size)
        return self._roi_cache[key]

    def _decode(self, head: np.ndarray, references: np.ndarray):
        boxes = clip_array(decode_array(head[:, :4], references),
                           self.config.image_w, self.config.image_h)
        logits = head[:, 4].astype(np.float64)
        scores = np.where(logits >= 0, 1 / (1 + np.exp(-np.abs(logits))),
                          np.exp(-np.abs(logits)) / (1 + np.exp(-np.abs(logits))))
        return boxes, scores

    def filter_proposals(self, pn: PNOutput) -> Proposals:
        """Score cut, NMS and top-k: the PN inference path."""
        cfg = self.config
        cand = np.nonzero(pn.scores >= cfg.pn_score_threshold)[0]
        keep = cand[nms_indices(pn.boxes[cand], pn.scores[cand], cfg.pn_nms_threshold,
                                limit=cfg.pn_keep)]
        return Proposals(pn.boxes[keep], pn.scores[keep], keep, ad.gather_rows(pn.fc, keep))

    def pn_forward_infer(self, g: ad.Graph, hyper: HyperFeature) -> Proposals:
        return self.filter_proposals(self.pn_forward(g, hyper))

    # -- FTN ---------------------------------------------------------------

    def ftn_features(self, g: ad.Graph, hyper: HyperFeature) -> ad.Node:
        return self._act(ad.conv2d(hyper.map, self._p(g, "ftn.conv6_2.weight"),
                                 self._p(g, "ftn.conv6_2.bias"), 1, 1))

    def ftn_forward(self, g: ad.Graph, hyper: HyperFeature, proposals: Proposals,
                    conv: ad.Node | None = None) -> FTNOutput:
        cfg = self.config
        k = len(proposals)
        if conv is None:
            conv = self.ftn_features(g, hyper)
        if k == 0:
            empty = g.constant(np.zeros((0, 5)))
            return FTNOutput(empty, np.zeros((0, 4)), np.zeros(0))
        pooled = ad.roi_maxpool(conv, proposals.boxes, hyper.stride, cfg.roi_size, cfg.roi_size)
        fc = self._act(ad.linear(ad.reshape(pooled, (k, -1)), self._p(g, "ftn.fc.weight"),
                               self._p(g, "ftn.fc.bias")))
        if cfg.concat_mode == "pn-plus-ftn":
            fc = ad.concat_features([fc, proposals.features])
        head = ad.linear(fc, self._p(g, "ftn.head.weight"), self._p(g, "ftn.head.bias"))
        return FTNOutput(head, *self._decode(head.value, proposals.boxes))

    # -- pipeline ----------------------------------------------------------

    def _finalize(self, boxes, scores, score_threshold, nms_threshold) -> list[Detection]:
        cfg = self.config
        score_threshold = cfg.final_score_threshold if score_threshold is None else score_threshold
        nms_threshold = cfg.ftn_nms_threshold if nms_threshold is None else nms_threshold
        cand = np.nonzero(scores >= score_threshold)[0]
        keep = cand[nms_indices(boxes[cand], scores[cand], nms_threshold)]
        return [Detection(Box(*map(float, boxes[i])), float(scores[i])) for i in keep]

    def detect(self, image: np.ndarray, score_threshold: float | None = None,
               nms_threshold: float | None = None, timings: dict | None = None
               ) -> list[Detection]:
        """Full cascade on one image; detections sorted by descending score."""
        t0 = time.perf_counter()
        g = ad.Graph()
        hyper = self.dcn_forward(g, image, train=False)
        t1 = time.perf_counter()
        proposals = self.pn_forward_infer(g, hyper)
        t2 = time.perf_counter()
        out = self.ftn_forward(g, hyper, proposals)
        dets = self._finalize(out.boxes, out.scores, score_threshold, nms_threshold)
        t3 = time.perf_counter()
        if timings is not None:
            timings.update(dcn=t1 - t0, pn=t2 - t1, ftn=t3 - t2, total=t3 - t0)
        return dets

    def detect_pn_only(self, image: np.ndarray, score_threshold: float | None = None,
                       nms_threshold: float | None = None) -> list[Detection]:
        """Treat the PN proposals as final detections (no FTN refinement)."""
        g = ad.Graph()
        proposals = self.pn_forward_infer(g, self.dcn_forward(g, image, train=False))
        return self._finalize(proposals.boxes, proposals.scores, score_threshold, nms_threshold)


build_model = EvolvingBoxes.build
