"""Run configuration: one JSON file, strict schema, unknown keys rejected.

Schema (all keys optional unless noted, defaults shown):

    {
      "seed": 0,
      "model": {
        "width": 32, "layers": 2, "heads": 4, "mlp_ratio": 4,
        "vocab_size": 124, "max_seq_len": 20,
        "image_size": 24, "patch_size": 8, "channels": 3,
        "bottleneck": 8, "num_classes": 12,
        "use_tsa": true, "use_xaa": true
      },
      "data": {
        "n_products": 600,
        "sizes": {"xmr": 2000, "tgir": 200, "scr": 2000, "fic": 2000}
      },
      "training": {
        "iterations": 3000, "batch_size": 16, "val_every": 100,
        "lr_backbone": 0.001, "lr_adapters": 0.003,
        "warmup_frac": 0.1111, "warmup_factor": 0.25,
        "milestone_fracs": [0.5556, 0.8889], "decay": 0.1,
        "weight_decay": 1e-5,
        "teacher_iterations": {"xmr": 900, "tgir": 500, "scr": 700, "fic": 900}
      },
      "strategy": "size_proportional",
      "grad_method": "none",
      "distill": false
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import NUM_CLASSES, TASKS, VOCAB
from .model import ModelConfig
from .training import GRAD_METHODS, STRATEGIES, TrainConfig
from .transformer import TextConfig, VisionConfig


class ConfigError(ValueError):
    """Schema violations, listed field by field."""


_MODEL_DEFAULTS = {
    "width": 32, "layers": 2, "heads": 4, "mlp_ratio": 4,
    "vocab_size": VOCAB.size, "max_seq_len": 20,
    "image_size": 24, "patch_size": 8, "channels": 3,
    "bottleneck": 8, "num_classes": NUM_CLASSES,
    "use_tsa": True, "use_xaa": True,
}

_DATA_DEFAULTS = {
    "n_products": 600,
    "sizes": {"xmr": 2000, "tgir": 200, "scr": 2000, "fic": 2000},
}

_TRAIN_KEYS = ("iterations", "batch_size", "val_every", "lr_backbone", "lr_adapters",
               "warmup_frac", "warmup_factor", "milestone_fracs", "decay",
               "weight_decay", "teacher_iterations")

_TOP_KEYS = ("seed", "model", "data", "training", "strategy", "grad_method", "distill")


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=lambda: dict(_MODEL_DEFAULTS))
    data: dict = field(default_factory=lambda: {"n_products": 600,
                                                "sizes": dict(_DATA_DEFAULTS["sizes"])})
    training: dict = field(default_factory=dict)
    strategy: str = "size_proportional"
    grad_method: str = "none"
    distill: bool = False

    def model_config(self) -> ModelConfig:
        m = self.model
        text = TextConfig(width=m["width"], layers=m["layers"], heads=m["heads"],
                          mlp_ratio=m["mlp_ratio"], vocab_size=m["vocab_size"],
                          max_seq_len=m["max_seq_len"])
        vision = VisionConfig(width=m["width"], layers=m["layers"], heads=m["heads"],
                              mlp_ratio=m["mlp_ratio"], image_size=m["image_size"],
                              patch_size=m["patch_size"], channels=m["channels"])
        return ModelConfig(text=text, vision=vision, bottleneck=m["bottleneck"],
                           num_classes=m["num_classes"], use_tsa=m["use_tsa"],
                           use_xaa=m["use_xaa"])

    def train_config(self) -> TrainConfig:
        kwargs = dict(self.training)
        if "milestone_fracs" in kwargs:
            kwargs["milestone_fracs"] = tuple(kwargs["milestone_fracs"])
        return TrainConfig(**kwargs)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "model": dict(self.model), "data": dict(self.data),
                "training": dict(self.training), "strategy": self.strategy,
                "grad_method": self.grad_method, "distill": self.distill}


def _reject_unknown(section: str, given: dict, allowed) -> list:
    return [f"{section}.{k}" if section else k for k in given if k not in allowed]


def validate_config_dict(raw: dict) -> RunConfig:
    problems = _reject_unknown("", raw, _TOP_KEYS)
    model = dict(_MODEL_DEFAULTS)
    if "model" in raw:
        problems += _reject_unknown("model", raw["model"], _MODEL_DEFAULTS)
        model.update({k: v for k, v in raw["model"].items() if k in _MODEL_DEFAULTS})
    data = {"n_products": _DATA_DEFAULTS["n_products"], "sizes": dict(_DATA_DEFAULTS["sizes"])}
    if "data" in raw:
        problems += _reject_unknown("data", raw["data"], ("n_products", "sizes"))
        if "n_products" in raw["data"]:
            data["n_products"] = raw["data"]["n_products"]
        if "sizes" in raw["data"]:
            problems += _reject_unknown("data.sizes", raw["data"]["sizes"], TASKS)
            data["sizes"].update({k: v for k, v in raw["data"]["sizes"].items() if k in TASKS})
    training = {}
    if "training" in raw:
        problems += _reject_unknown("training", raw["training"], _TRAIN_KEYS)
        training = {k: v for k, v in raw["training"].items() if k in _TRAIN_KEYS}
        if "teacher_iterations" in training:
            problems += _reject_unknown("training.teacher_iterations",
                                        training["teacher_iterations"], TASKS)
    strategy = raw.get("strategy", "size_proportional")
    if strategy not in STRATEGIES:
        problems.append(f"strategy={strategy!r} (expected one of {STRATEGIES})")
    grad_method = raw.get("grad_method", "none")
    if grad_method not in GRAD_METHODS:
        problems.append(f"grad_method={grad_method!r} (expected one of {GRAD_METHODS})")
    if problems:
        raise ConfigError("invalid config fields: " + ", ".join(sorted(problems)))
    return RunConfig(seed=int(raw.get("seed", 0)), model=model, data=data, training=training,
                     strategy=strategy, grad_method=grad_method,
                     distill=bool(raw.get("distill", False)))


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return validate_config_dict(raw)
