"""Flat key-value experiment configuration.

The format is structured text: one ``section.key = value`` per line,
``#`` starts a comment. Every key has a documented default; unknown keys
are hard errors so a typo in an ablation switch cannot silently corrupt
an experiment.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from ..adaptation import AblationSwitches, AdaptConfig, LossWeights, UemaConfig
from ..geometry import ModelDims
from ..synth import DomainShift, SceneSpec
from ..uncertainty import FusionConfig


class ConfigError(ValueError):
    """Malformed configuration: unknown key, bad value, or missing file."""


@dataclass(frozen=True)
class _Key:
    default: Any
    kind: str  # int | float | bool | str | float_or_auto
    doc: str


REGISTRY: dict[str, _Key] = {
    "corpus.source": _Key("source.corpus", "str", "labeled source-domain corpus path"),
    "corpus.target": _Key("target.corpus", "str", "unlabeled target-domain corpus path"),
    "corpus.eval": _Key("eval.corpus", "str", "sealed-label evaluation corpus path"),
    "scene.n_objects": _Key(2, "int", "objects per synthetic scene"),
    "scene.layout": _Key("grid-city", "str", "scene layout style: grid-city or curved-city"),
    "scene.views": _Key(2, "int", "camera views per scene (>= 2)"),
    "scene.image_h": _Key(16, "int", "image height in pixels (even)"),
    "scene.image_w": _Key(32, "int", "image width in pixels (even)"),
    "scene.depth_min": _Key(2.0, "float", "near end of the metric depth range"),
    "scene.depth_max": _Key(20.0, "float", "far end of the metric depth range"),
    "scene.depth_bins": _Key(8, "int", "depth bins shared by scenes and the model"),
    "scene.place_min": _Key(4.0, "float", "nearest object placement depth"),
    "scene.place_max": _Key(12.0, "float", "farthest object placement depth"),
    "scene.grid_h": _Key(3, "int", "BEV label grid rows"),
    "scene.grid_w": _Key(6, "int", "BEV label grid columns"),
    "scene.n_classes": _Key(4, "int", "object categories"),
    "scene.lidar_density": _Key(0.5, "float", "fraction of feature pixels with lidar returns"),
    "scene.n_scenes": _Key(96, "int", "scenes per training corpus"),
    "scene.n_eval_scenes": _Key(24, "int", "scenes per evaluation corpus"),
    "shift.kind": _Key("fog", "str", "target-domain shift: none, fog, night, or rain"),
    "shift.level": _Key(3, "int", "fog ladder level 1..5"),
    "shift.fog_beta0": _Key(0.05, "float", "fog extinction at ladder level 2 (1/m)"),
    "shift.fog_airlight": _Key(0.8, "float", "fog airlight gray level"),
    "shift.night_gain": _Key(0.4, "float", "night brightness gain in (0, 1]"),
    "shift.night_noise": _Key(0.02, "float", "night gaussian noise sigma"),
    "shift.rain_density": _Key(0.015, "float", "rain streak pixel fraction"),
    "shift.rain_noise": _Key(0.02, "float", "rain gaussian noise sigma"),
    "model.c_i": _Key(16, "int", "image feature channels"),
    "model.depth_hidden": _Key(32, "int", "depth net hidden width"),
    "model.disc_hidden": _Key(32, "int", "domain discriminator hidden width"),
    "model.pool_kd": _Key(2, "int", "BEV pooling kernel, depth axis"),
    "model.pool_kh": _Key(2, "int", "BEV pooling kernel, height axis"),
    "model.pool_kw": _Key(2, "int", "BEV pooling kernel, width axis"),
    "model.pool_sd": _Key(2, "int", "BEV pooling stride, depth axis"),
    "model.pool_sh": _Key(2, "int", "BEV pooling stride, height axis"),
    "model.pool_sw": _Key(2, "int", "BEV pooling stride, width axis"),
    "train.lr": _Key(0.01, "float", "source pretraining learning rate (Adam)"),
    "train.epochs": _Key(60, "int", "source pretraining epochs"),
    "train.batch_size": _Key(8, "int", "scenes per source-training batch"),
    "train.depth_weight": _Key(1.0, "float", "weight of the lidar depth anchoring term in pretraining"),
    "train.lidar_sub_prob": _Key(0.5, "float", "per-scene probability of lidar depth substitution in pretraining"),
    "adapt.lr": _Key(0.001, "float", "adaptation learning rate"),
    "adapt.disc_lr": _Key(0.05, "float", "discriminator learning rate"),
    "adapt.epochs": _Key(12, "int", "adaptation epochs over the target corpus"),
    "adapt.batch_size": _Key(4, "int", "target scenes per adaptation step"),
    "adapt.conf_threshold": _Key(0.5, "float", "pseudo-label confidence threshold"),
    "fusion.m": _Key(5, "int", "MC-dropout passes (>= 2)"),
    "fusion.dropout_rate": _Key(0.3, "float", "depth-net hidden dropout rate in (0, 1)"),
    "fusion.theta": _Key("auto", "float_or_auto", "fusion threshold; auto = batch quantile"),
    "fusion.quantile": _Key(0.7, "float", "quantile for the auto fusion threshold"),
    "fusion.criterion": _Key("uncertainty", "str", "fusion criterion: uncertainty or confidence"),
    "uema.alpha": _Key(0.999, "float", "EMA smoothing coefficient"),
    "uema.sigma": _Key(0.001, "float", "uncertainty modulation of the EMA coefficient"),
    "loss.lambda1": _Key(1.0, "float", "weight of the pseudo-label detection loss"),
    "loss.lambda2": _Key(1.0, "float", "weight of the source supervision loss"),
    "loss.lambda3": _Key(0.1, "float", "weight of the knowledge transfer loss"),
    "loss.lambda4": _Key(0.1, "float", "weight of the prototype alignment loss"),
    "ablation.da": _Key(True, "bool", "depth-aware teacher pathway (fused depth + pseudo labels)"),
    "ablation.uema": _Key(True, "bool", "uncertainty-guided EMA (off = plain EMA)"),
    "ablation.kt": _Key(True, "bool", "multi-space knowledge transfer loss"),
    "ablation.ba": _Key(True, "bool", "BEV space in the shared embedding"),
    "ablation.ia": _Key(True, "bool", "image space in the shared embedding"),
    "ablation.va": _Key(True, "bool", "voxel space in the shared embedding"),
    "eval.match_radius": _Key(1.0, "float", "matching radius in cell units"),
    "eval.occ_threshold": _Key(0.5, "float", "operating threshold for translation error"),
    "eval.occ_floor": _Key(0.05, "float", "minimum occupancy for a cell to count as a prediction"),
    "divergence.bins": _Key(32, "int", "histogram bins per channel"),
    "divergence.space": _Key("bev", "str", "feature space: image, voxel, bev, or prototype"),
    "divergence.probe_steps": _Key(200, "int", "probe discriminator training steps"),
    "divergence.probe_lr": _Key(0.2, "float", "probe discriminator learning rate"),
    "report.repeats": _Key(1, "int", "repeated runs aggregated as mean +/- std"),
}


def _coerce(key: str, raw: str) -> Any:
    spec = REGISTRY[key]
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "bool":
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError("expected true or false")
        if spec.kind == "float_or_auto":
            return None if raw == "auto" else float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {raw!r} ({err})") from err


def parse_config(text: str) -> dict[str, Any]:
    """Parse config text into a fully-defaulted key->value mapping."""
    values = {k: (None if v.kind == "float_or_auto" and v.default == "auto" else v.default)
              for k, v in REGISTRY.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in REGISTRY:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def describe_keys() -> str:
    lines = ["# All configuration keys with their defaults:"]
    for name in sorted(REGISTRY):
        spec = REGISTRY[name]
        lines.append(f"{name} = {spec.default}  # {spec.doc}")
    return "\n".join(lines)


@dataclass
class ExperimentConfig:
    """Typed view over a parsed key-value mapping."""

    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def scene_spec(self, seed: int = 0) -> SceneSpec:
        v = self.values
        return SceneSpec(
            seed=seed,
            n_objects=v["scene.n_objects"],
            layout_style=v["scene.layout"],
            view_count=v["scene.views"],
            image_hw=(v["scene.image_h"], v["scene.image_w"]),
            depth_range=(v["scene.depth_min"], v["scene.depth_max"]),
            depth_bins=v["scene.depth_bins"],
            place_depth=(v["scene.place_min"], v["scene.place_max"]),
            grid=(v["scene.grid_h"], v["scene.grid_w"]),
            n_categories=v["scene.n_classes"],
            lidar_density=v["scene.lidar_density"],
        )

    def domain_shift(self, level: int | None = None) -> DomainShift:
        v = self.values
        return DomainShift(
            kind=v["shift.kind"],
            level=v["shift.level"] if level is None else level,
            fog_beta0=v["shift.fog_beta0"],
            fog_airlight=v["shift.fog_airlight"],
            night_gain=v["shift.night_gain"],
            night_noise=v["shift.night_noise"],
            rain_density=v["shift.rain_density"],
            rain_noise=v["shift.rain_noise"],
        )

    def model_dims(self) -> ModelDims:
        v = self.values
        return ModelDims(
            c_i=v["model.c_i"],
            c_d=v["scene.depth_bins"],
            depth_hidden=v["model.depth_hidden"],
            grid_h=v["scene.grid_h"],
            grid_w=v["scene.grid_w"],
            n_classes=v["scene.n_classes"],
            image_hw=(v["scene.image_h"], v["scene.image_w"]),
            pool_kernel=(v["model.pool_kd"], v["model.pool_kh"], v["model.pool_kw"]),
            pool_stride=(v["model.pool_sd"], v["model.pool_sh"], v["model.pool_sw"]),
            depth_min=v["scene.depth_min"],
            depth_max=v["scene.depth_max"],
            disc_hidden=v["model.disc_hidden"],
        )

    def fusion_config(self) -> FusionConfig:
        v = self.values
        return FusionConfig(
            theta=v["fusion.theta"],
            m=v["fusion.m"],
            dropout_rate=v["fusion.dropout_rate"],
            quantile=v["fusion.quantile"],
            criterion=v["fusion.criterion"],
        )

    def uema_config(self) -> UemaConfig:
        return UemaConfig(alpha=self.values["uema.alpha"], sigma=self.values["uema.sigma"])

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(v["loss.lambda1"], v["loss.lambda2"], v["loss.lambda3"], v["loss.lambda4"])

    def switches(self) -> AblationSwitches:
        v = self.values
        return AblationSwitches(
            da=v["ablation.da"],
            uema=v["ablation.uema"],
            kt=v["ablation.kt"],
            ba=v["ablation.ba"],
            ia=v["ablation.ia"],
            va=v["ablation.va"],
        )

    def adapt_config(self, seed: int) -> AdaptConfig:
        v = self.values
        return AdaptConfig(
            dims=self.model_dims(),
            fusion=self.fusion_config(),
            uema=self.uema_config(),
            weights=self.loss_weights(),
            switches=self.switches(),
            lr=v["adapt.lr"],
            disc_lr=v["adapt.disc_lr"],
            conf_threshold=v["adapt.conf_threshold"],
            seed=seed,
        )

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        values = dict(self.values)
        for key, value in overrides.items():
            dotted = key.replace("__", ".")
            if dotted not in REGISTRY:
                raise ConfigError(f"unknown key {dotted!r}")
            values[dotted] = value
        return ExperimentConfig(values)


def default_config() -> ExperimentConfig:
    return ExperimentConfig(parse_config(""))


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return default_config()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return ExperimentConfig(parse_config(text))
