"""Plain-text run configuration: `key = value` lines, `#` comments.

Unknown keys are rejected; omitted keys take the documented defaults. One
`seed` key seeds both weight initialization and the training run.
"""

from __future__ import annotations

from .errors import ConfigError
from .model import DROPOUT_VARIANTS, ModelConfig
from .train import TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_KEYS = {
    "learning_rate": float,
    "weight_decay": float,
    "momentum": float,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "class_balancing": _parse_bool,
    "input_channels": int,
    "num_classes": int,
    "stages": int,
    "features": int,
    "dropout_variant": str,
    "dropout_p": float,
}

_RANGES = {
    "learning_rate": lambda v: v >= 0,
    "weight_decay": lambda v: v >= 0,
    "momentum": lambda v: 0 <= v < 1,
    "epochs": lambda v: v >= 1,
    "batch_size": lambda v: v >= 1,
    "seed": lambda v: v >= 0,
    "input_channels": lambda v: v >= 1,
    "num_classes": lambda v: v >= 2,
    "stages": lambda v: v >= 1,
    "features": lambda v: v >= 1,
    "dropout_variant": lambda v: v in DROPOUT_VARIANTS,
    "dropout_p": lambda v: 0 <= v < 1,
}


def parse_config(path) -> tuple[TrainConfig, ModelConfig]:
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected key = value, got {line!r}", line=lineno)
            key, _, text = line.partition("=")
            key = key.strip()
            text = text.strip()
            if key not in _KEYS:
                raise ConfigError(f"unknown key {key!r}", line=lineno)
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", line=lineno)
            try:
                value = _KEYS[key](text)
            except ValueError:
                raise ConfigError(f"malformed value {text!r} for {key}", line=lineno) from None
            check = _RANGES.get(key)
            if check and not check(value):
                raise ConfigError(f"value {value!r} out of range for {key}", line=lineno)
            values[key] = value

    train = TrainConfig(
        learning_rate=values.get("learning_rate", 0.001),
        weight_decay=values.get("weight_decay", 0.0005),
        momentum=values.get("momentum", 0.9),
        epochs=values.get("epochs", 30),
        batch_size=values.get("batch_size", 4),
        seed=values.get("seed", 0),
        class_balancing=values.get("class_balancing", True),
    )
    model = ModelConfig(
        input_channels=values.get("input_channels", 3),
        num_classes=values.get("num_classes", 4),
        stages=values.get("stages", 4),
        features=values.get("features", 64),
        dropout_variant=values.get("dropout_variant", "central_enc_dec"),
        dropout_p=values.get("dropout_p", 0.5),
        seed=values.get("seed", 0),
    )
    return train, model
