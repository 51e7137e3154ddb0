"""Training configuration and the key-value config file format.

A config file is plain text with one ``key = value`` pair per line; blank
lines and ``#`` comments are ignored. Keys are :class:`TrainConfig` field
names. Unknown keys are an error.
"""

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass(frozen=True)
class TrainConfig:
    # optimiser
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    lr_decay: float = 0.9999  # per optimiser step
    batch_size: int = 32
    epochs: int = 256
    # loss
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    # NCA
    fire_rate: float = 0.5
    inference_mode: str = "expected"  # "expected": deterministic mean update; "stochastic": sampled masks
    nca_channels: int = 32
    nca_hidden: int = 32
    steps: int = 32
    classifier_hidden: int = 128
    perceive_state: bool = True  # concatenate the raw state into the perception vector
    # data / protocol
    num_classes: int = 2
    image_size: int = 64
    folds: int = 5
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0  # epochs; 0 disables intermediate checkpoints
    chunk_size: int = 8  # samples per gradient evaluation inside a batch
    # segmentation
    otsu_bins: int = 256
    seg_state_index: int = -1  # which rollout state feeds mask extraction

    def __post_init__(self):
        checks = [
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (0 <= self.adam_beta1 < 1, "adam_beta1 must be in [0, 1)"),
            (0 <= self.adam_beta2 < 1, "adam_beta2 must be in [0, 1)"),
            (self.adam_epsilon > 0, "adam_epsilon must be > 0"),
            (0 < self.lr_decay <= 1, "lr_decay must be in (0, 1]"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.focal_gamma >= 0, "focal_gamma must be >= 0"),
            (self.focal_alpha > 0, "focal_alpha must be > 0"),
            (0 < self.fire_rate <= 1, "fire_rate must be in (0, 1]"),
            (self.inference_mode in ("expected", "stochastic"), "inference_mode must be 'expected' or 'stochastic'"),
            (self.nca_channels >= 4, "nca_channels must be >= 4"),
            (self.nca_hidden >= 1, "nca_hidden must be >= 1"),
            (self.steps >= 1, "steps must be >= 1"),
            (self.classifier_hidden >= 1, "classifier_hidden must be >= 1"),
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (self.image_size >= 3, "image_size must be >= 3"),
            (self.folds >= 2, "folds must be >= 2"),
            (self.checkpoint_every >= 0, "checkpoint_every must be >= 0"),
            (self.chunk_size >= 1, "chunk_size must be >= 1"),
            (self.otsu_bins >= 2, "otsu_bins must be >= 2"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def field_types(cls=TrainConfig):
    return {f.name: f.type for f in fields(cls)}


def coerce(value, typ):
    """Parse a string into ``typ`` (bool, int, float or str)."""
    if not isinstance(value, str):
        return typ(value)
    text = value.strip()
    if typ is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ is int:
        return int(float(text)) if "e" in text.lower() else int(text)
    return typ(text)


def read_kv_file(path):
    """Read ``key = value`` lines into a dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides=None, cls=TrainConfig):
    """Build a config with precedence overrides > file > defaults."""
    types = field_types(cls)
    raw = {}
    if path is not None:
        raw.update(read_kv_file(path))
    if overrides:
        raw.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(raw) - set(types)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cls(**{k: coerce(v, types[k]) for k, v in raw.items()})


def write_kv_file(config, path):
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(config).items()]
    Path(path).write_text("\n".join(lines) + "\n")
