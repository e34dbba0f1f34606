"""Run configuration (JSON) and ablation presets."""

from __future__ import annotations

import copy
import dataclasses
import json

from .gridworld import SceneConfig
from .model import ModelConfig
from .objectives import LossWeights
from .training import TrainConfig


class ConfigError(ValueError):
    pass


class UnknownPreset(ConfigError):
    pass


PRESETS = ("full", "il_qa", "il", "no_geo", "no_sem", "no_aux")

PRESET_HELP = {
    "full": "all losses, all components",
    "il_qa": "action + answer losses only (contrastive, atlas and episodic weights zero)",
    "il": "action loss only",
    "no_geo": "fused frame is the visual channel alone (fusion bypass)",
    "no_sem": "no cognitive-map slot in the head input (contrastive loss has no anchor)",
    "no_aux": "keeps the contrastive loss, zero atlas and episodic weights",
}


def apply_preset(cfg: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise UnknownPreset(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    cfg = copy.deepcopy(cfg)
    w, m = cfg.weights, cfg.model
    if preset in ("il_qa", "il"):
        w.lambda_c = w.lambda_s = w.lambda_r = 0.0
    if preset == "il":
        w.lambda_qa = 0.0
    if preset == "no_geo":
        m.use_geo = False
    if preset == "no_sem":
        m.use_map = False
    if preset == "no_aux":
        w.lambda_s = w.lambda_r = 0.0
    return cfg


@dataclasses.dataclass
class DataConfig:
    n_scenes: int = 100
    n_train: int = 400
    n_test: int = 100
    query_budget: int = 6


@dataclasses.dataclass
class EvalConfig:
    success_radius: int = 1
    max_steps: int | None = None


@dataclasses.dataclass
class RunConfig:
    scene: SceneConfig = dataclasses.field(default_factory=SceneConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    preset: str = "full"

    def to_dict(self):
        return {
            "scene": dataclasses.asdict(self.scene),
            "data": dataclasses.asdict(self.data),
            "train": self.train.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "preset": self.preset,
        }

    def effective_train(self) -> TrainConfig:
        return apply_preset(self.train, self.preset)


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return cls(**d)


def run_config_from_dict(d) -> RunConfig:
    d = dict(d)
    top = {"scene", "data", "train", "eval", "preset"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    t = dict(d.get("train", {}))
    weights = _build(LossWeights, t.pop("weights", {}), "train.weights")
    model = _build(ModelConfig, t.pop("model", {}), "train.model")
    if "betas" in t:
        t["betas"] = tuple(t["betas"])
    train = _build(TrainConfig, t, "train")
    train.weights, train.model = weights, model
    cfg = RunConfig(
        scene=_build(SceneConfig, d.get("scene", {}), "scene"),
        data=_build(DataConfig, d.get("data", {}), "data"),
        train=train,
        eval=_build(EvalConfig, d.get("eval", {}), "eval"),
        preset=d.get("preset", "full"),
    )
    if cfg.preset not in PRESETS:
        raise UnknownPreset(f"unknown preset {cfg.preset!r}")
    try:
        cfg.train.validate()
        cfg.scene.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        return run_config_from_dict(json.load(f))


def describe_defaults() -> str:
    """Flattened default values, for --help."""
    lines = []

    def walk(prefix, d):
        for k, v in d.items():
            if isinstance(v, dict):
                walk(f"{prefix}{k}.", v)
            else:
                lines.append(f"  {prefix}{k} = {json.dumps(v)}")

    walk("", RunConfig().to_dict())
    return "\n".join(lines)
