"""Configuration dataclasses, presets and the flat ``key = value`` text format.

Every field of :class:`ModelConfig`, :class:`TrainConfig`, :class:`SceneSpec`
and :class:`EvalConfig` is reachable through exactly one flat key; the
:data:`SCHEMA` table built from the dataclass metadata drives parsing,
serialization and the CLI flags, so the three cannot drift apart.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .errors import ConfigError

FUSION_MODES = ("multi-layer", "last-layer-only")
CONCAT_MODES = ("pn-plus-ftn", "ftn-only")
CONDITIONS = ("sunny", "cloudy", "rainy", "night")
INIT_MODES = ("he", "gaussian")
HEAD_ACTIVATIONS = ("relu", "identity")


def _opt(default, kind, help, choices=None, key=None):
    meta = {"kind": kind, "help": help, "choices": choices, "key": key}
    if isinstance(default, (list, dict)):
        return field(default_factory=lambda: type(default)(default), metadata=meta)
    return field(default=default, metadata=meta)


@dataclass
class ModelConfig:
    image_w: int = _opt(128, "int", "input image width in pixels")
    image_h: int = _opt(96, "int", "input image height in pixels")
    backbone_widths: tuple = _opt((8, 16, 32, 32, 32), "ints",
                                  "output channels of the five backbone blocks")
    fusion_layers: tuple = _opt((1, 3, 5), "ints", "backbone blocks fused into the hyper map")
    align_block: int = _opt(3, "int", "block whose resolution the fused maps are resampled to")
    hyper_w: int = _opt(0, "int", "explicit hyper map width (0 = align block resolution)")
    hyper_h: int = _opt(0, "int", "explicit hyper map height (0 = align block resolution)")
    conv6_1_filters: int = _opt(4, "int", "PN convolution filters")
    conv6_2_filters: int = _opt(64, "int", "FTN convolution filters")
    pn_fc_dim: int = _opt(128, "int", "PN fc width")
    ftn_fc_dim: int = _opt(512, "int", "FTN fc width")
    roi_size: int = _opt(14, "int", "ROI pooling output side")
    grid_w: int = _opt(16, "int", "anchor grid columns")
    grid_h: int = _opt(12, "int", "anchor grid rows")
    anchor_scales: tuple = _opt((16.0, 24.0, 36.0), "floats", "anchor side lengths in pixels")
    anchor_ratios: tuple = _opt(((1, 2), (2, 1), (1, 1)), "ratios", "anchor w:h aspect ratios")
    pn_score_threshold: float = _opt(0.05, "float", "PN inference score cut")
    pn_nms_threshold: float = _opt(0.7, "float", "PN NMS IoU threshold")
    pn_keep: int = _opt(128, "int", "proposals kept after PN NMS")
    ftn_nms_threshold: float = _opt(0.45, "float", "final NMS IoU threshold after FTN")
    final_score_threshold: float = _opt(0.5, "float", "final detection score cut")
    fusion_mode: str = _opt("multi-layer", "str", "backbone feature fusion", FUSION_MODES)
    concat_mode: str = _opt("pn-plus-ftn", "str", "FTN fc input composition", CONCAT_MODES)
    head_activation: str = _opt("relu", "str", "nonlinearity after conv6 and fc layers",
                                HEAD_ACTIVATIONS)
    bn_eps: float = _opt(1e-5, "float", "batchnorm epsilon")
    bn_momentum: float = _opt(0.9, "float", "batchnorm running-stat momentum")
    init_std: float = _opt(0.01, "float", "std of the Gaussian weight init")
    backbone_init: str = _opt("he", "str", "backbone weight init", INIT_MODES)

    def validate(self) -> "ModelConfig":
        if self.image_w < 1 or self.image_h < 1:
            raise ConfigError("image size must be positive")
        if len(self.backbone_widths) != 5 or min(self.backbone_widths) < 1:
            raise ConfigError("backbone_widths needs five positive widths")
        if list(self.fusion_layers) != sorted(self.fusion_layers) or not self.fusion_layers \
                or not all(1 <= b <= 5 for b in self.fusion_layers):
            raise ConfigError(f"fusion_layers must be sorted block indices in [1, 5], "
                              f"got {self.fusion_layers}")
        if not 1 <= self.align_block <= 5:
            raise ConfigError("align_block must be in [1, 5]")
        if self.roi_size < 1 or self.pn_keep < 1:
            raise ConfigError("roi_size and pn_keep must be >= 1")
        if min(self.conv6_1_filters, self.conv6_2_filters, self.pn_fc_dim, self.ftn_fc_dim) < 1:
            raise ConfigError("head widths must be positive")
        if self.grid_w * self.grid_h <= 0 or not self.anchor_scales or not self.anchor_ratios:
            raise ConfigError("anchor grid, scales and ratios must be non-empty")
        if self.fusion_mode not in FUSION_MODES or self.concat_mode not in CONCAT_MODES:
            raise ConfigError("unknown fusion_mode or concat_mode")
        for name in ("pn_nms_threshold", "ftn_nms_threshold", "pn_score_threshold",
                     "final_score_threshold"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        return self


@dataclass
class TrainConfig:
    lr_initial: float = _opt(1e-3, "float", "initial learning rate")
    lr_drop_iteration: int = _opt(50_000, "int", "iteration at which the learning rate drops")
    lr_after_drop: float = _opt(1e-4, "float", "learning rate after the drop")
    total_iterations: int = _opt(70_000, "int", "training iterations")
    minibatch: int = _opt(256, "int", "samples per stage per iteration")
    alpha: float = _opt(0.5, "float", "weight of the PN stage in the joint loss")
    lam: float = _opt(1.0, "float", "weight of localization vs classification",
                      key="lambda")
    hard_mine_fraction: float = _opt(0.7, "float", "fraction of FTN samples kept by hard mining")
    hard_mine_scope: str = _opt("classification", "str",
                                "FTN loss terms limited to hard-mined samples",
                                ("classification", "both"))
    pn_pos_fraction: float = _opt(0.5, "float", "max positive share of a PN minibatch")
    momentum: float = _opt(0.0, "float", "SGD momentum")
    weight_decay: float = _opt(0.0, "float", "L2 weight decay")
    seed: int = _opt(0, "int", "seed for initialization and sampling")
    checkpoint_every: int = _opt(0, "int", "write a checkpoint every K iterations (0 = off)")

    def validate(self) -> "TrainConfig":
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 < self.hard_mine_fraction <= 1:
            raise ConfigError("hard_mine_fraction must lie in (0, 1]")
        if not 0 <= self.pn_pos_fraction <= 1:
            raise ConfigError("pn_pos_fraction must lie in [0, 1]")
        if self.minibatch < 1 or self.total_iterations < 0:
            raise ConfigError("minibatch must be >= 1 and total_iterations >= 0")
        if self.lr_initial < 0 or self.lr_after_drop < 0 or self.lam < 0:
            raise ConfigError("learning rates and lambda must be non-negative")
        return self

    def learning_rate(self, iteration: int) -> float:
        return self.lr_initial if iteration < self.lr_drop_iteration else self.lr_after_drop


@dataclass
class SceneSpec:
    image_w: int = _opt(128, "int", "input image width in pixels")
    image_h: int = _opt(96, "int", "input image height in pixels")
    vehicle_count_min: int = _opt(2, "int", "fewest labeled vehicles per scene")
    vehicle_count_max: int = _opt(6, "int", "most labeled vehicles per scene")
    vehicle_size_min: float = _opt(16.0, "float", "smallest vehicle side (sqrt of area)")
    vehicle_size_max: float = _opt(36.0, "float", "largest vehicle side (sqrt of area)")
    aspect_min: float = _opt(0.8, "float", "smallest vehicle w/h")
    aspect_max: float = _opt(1.8, "float", "largest vehicle w/h")
    occlusion_probability: float = _opt(0.3, "float", "chance a vehicle overlaps another")
    condition: str = _opt("mixed", "str", "scene condition",
                          CONDITIONS + ("mixed",))
    ignore_count_min: int = _opt(0, "int", "fewest ignore regions per scene")
    ignore_count_max: int = _opt(1, "int", "most ignore regions per scene")
    seed: int = _opt(1, "int", "scene generator seed", key="scene_seed")

    def validate(self) -> "SceneSpec":
        if self.vehicle_count_min < 0 or self.vehicle_count_max < self.vehicle_count_min:
            raise ConfigError("bad vehicle count range")
        if not 2 <= self.vehicle_size_min <= self.vehicle_size_max:
            raise ConfigError("bad vehicle size range")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ConfigError("bad aspect range")
        if not 0 <= self.occlusion_probability <= 1:
            raise ConfigError("occlusion_probability must lie in [0, 1]")
        if self.ignore_count_min < 0 or self.ignore_count_max < self.ignore_count_min:
            raise ConfigError("bad ignore region count range")
        if self.condition not in CONDITIONS + ("mixed",):
            raise ConfigError(f"unknown condition {self.condition!r}")
        return self


@dataclass
class EvalConfig:
    iou_threshold: float = _opt(0.7, "float", "IoU needed for a detection to match")

    def validate(self) -> "EvalConfig":
        if not 0 < self.iou_threshold < 1:
            raise ConfigError("iou_threshold must lie in (0, 1)")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.scene.validate()
        self.eval.validate()
        return self


# ---------------------------------------------------------------------------
# flat key schema


def _parse_ratio(tok: str) -> tuple[int, int]:
    a, sep, b = tok.partition(":")
    if not sep:
        raise ValueError(f"ratio {tok!r} is not of the form w:h")
    return (int(a), int(b))


_PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": str,
    "ints": lambda s: tuple(int(t) for t in s.split(",") if t.strip()),
    "floats": lambda s: tuple(float(t) for t in s.split(",") if t.strip()),
    "ratios": lambda s: tuple(_parse_ratio(t.strip()) for t in s.split(",") if t.strip()),
}

_FORMATTERS: dict[str, Callable[[Any], str]] = {
    "int": str,
    "float": repr,
    "str": str,
    "ints": lambda v: ",".join(str(int(x)) for x in v),
    "floats": lambda v: ",".join(repr(float(x)) for x in v),
    "ratios": lambda v: ",".join(f"{a}:{b}" for a, b in v),
}


@dataclass(frozen=True)
class Key:
    name: str
    targets: tuple  # ((section, attribute), ...)
    kind: str
    help: str
    choices: tuple | None
    default: Any

    def parse(self, text: str):
        try:
            value = _PARSERS[self.kind](text.strip())
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{self.name}: cannot parse {text!r} as {self.kind}") from exc
        if self.choices and value not in self.choices:
            raise ConfigError(f"{self.name}: {value!r} not one of {', '.join(self.choices)}")
        return value

    def format(self, value) -> str:
        return _FORMATTERS[self.kind](value)


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "scene": SceneSpec, "eval": EvalConfig}


def _build_schema() -> dict[str, Key]:
    schema: dict[str, Key] = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            meta = f.metadata
            name = meta.get("key") or f.name
            if name in schema:
                prev = schema[name]
                if prev.kind != meta["kind"]:
                    raise AssertionError(f"key {name} reused with a different type")
                schema[name] = dataclasses.replace(
                    prev, targets=prev.targets + ((section, f.name),))
                continue
            schema[name] = Key(name, ((section, f.name),), meta["kind"], meta["help"],
                               meta.get("choices"), f.default)
    return schema


SCHEMA = _build_schema()


def keys_for(section: str) -> list[Key]:
    return [k for k in SCHEMA.values() if any(s == section for s, _ in k.targets)]


def apply(config: RunConfig, values: dict[str, str]) -> RunConfig:
    """Apply textual ``key -> value`` overrides in place (unknown keys rejected)."""
    for name, text in values.items():
        key = SCHEMA.get(name)
        if key is None:
            raise ConfigError(f"unknown config key {name!r}")
        value = key.parse(text)
        for section, attr in key.targets:
            setattr(getattr(config, section), attr, value)
    return config


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        name = name.strip()
        if name not in SCHEMA and name != "preset":
            raise ConfigError(f"{source}:{lineno}: unknown config key {name!r}")
        values[name] = value.strip()
    return values


def dump_text(config: RunConfig, sections: Iterable[str] = tuple(SECTIONS)) -> str:
    sections = tuple(sections)
    lines = []
    for key in SCHEMA.values():
        section, attr = next(((s, a) for s, a in key.targets if s in sections), (None, None))
        if section is None:
            continue
        lines.append(f"{key.name} = {key.format(getattr(getattr(config, section), attr))}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# presets


def desk_preset() -> RunConfig:
    """Small images and widths that train on one CPU core in minutes."""
    cfg = RunConfig()
    # 16 FTN filters keep the 14x14 pooled vector small enough for CPU training
    cfg.model.conv6_2_filters = 16
    cfg.train = TrainConfig(lr_initial=1e-2, lr_drop_iteration=4000, lr_after_drop=1e-3,
                            total_iterations=5000, momentum=0.9)
    return cfg


def paper_preset() -> RunConfig:
    """All architectural and schedule constants as published (nominal on CPU)."""
    model = ModelConfig(
        image_w=960, image_h=540,
        backbone_widths=(64, 128, 256, 512, 512),
        hyper_w=256, hyper_h=144,
        grid_w=64, grid_h=36,
        anchor_scales=(32.0, 64.0, 128.0, 256.0, 512.0),
        pn_keep=800,
    )
    scene = SceneSpec(image_w=960, image_h=540, vehicle_count_min=4, vehicle_count_max=13,
                      vehicle_size_min=24.0, vehicle_size_max=200.0)
    return RunConfig(model=model, train=TrainConfig(), scene=scene)


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def load_config(path=None, preset: str = "desk", overrides: dict[str, str] | None = None
                ) -> RunConfig:
    """Preset, then file, then overrides; validated."""
    file_values: dict[str, str] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            file_values = parse_text(fh.read(), str(path))
    preset = file_values.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    apply(cfg, file_values)
    apply(cfg, overrides or {})
    return cfg.validate()


def model_config_from_text(text: str) -> ModelConfig:
    values = parse_text(text)
    values.pop("preset", None)
    model_keys = {k.name for k in keys_for("model")}
    stray = set(values) - model_keys
    if stray:
        raise ConfigError(f"non-model keys in model config: {sorted(stray)}")
    cfg = RunConfig()
    apply(cfg, values)
    return cfg.model.validate()
