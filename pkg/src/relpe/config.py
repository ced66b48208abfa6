"""Run configuration: the single source of experiment truth.

A RunConfig is validated on construction, serialized verbatim into every
checkpoint manifest and metrics log, and mirrors its JSON file exactly;
unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .optim import LrSchedule, PrecisionPolicy


class ConfigError(ValueError):
    pass


def _from_mapping(cls, data: dict, context: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {context}: {exc}")


@dataclass
class RunConfig:
    model: EncoderConfig
    schedule: LrSchedule
    precision: PrecisionPolicy = field(default_factory=PrecisionPolicy)
    optimizer: str = "lamb"
    weight_decay: float = 0.01
    use_exclusion_list: bool = True
    train_examples: str | None = None
    corpus: str | None = None
    lexicon: str | None = None
    masking_strategy: str = "char"
    batch_size: int = 8
    total_steps: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    out_dir: str = "run"

    def __post_init__(self):
        if self.optimizer not in ("lamb", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.masking_strategy not in ("char", "wwm"):
            raise ConfigError(f"unknown masking strategy {self.masking_strategy!r}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ConfigError("batch_size must be >= 1 and total_steps >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["scheme"] = self.model.scheme.value
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        data = dict(data)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown keys in run config: {sorted(unknown)}")
        if "model" not in data or "schedule" not in data:
            raise ConfigError("run config requires 'model' and 'schedule' sections")
        data["model"] = _from_mapping(EncoderConfig, data["model"], "model config")
        data["schedule"] = _from_mapping(LrSchedule, data["schedule"], "schedule config")
        if "precision" in data:
            data["precision"] = _from_mapping(PrecisionPolicy, data["precision"],
                                              "precision config")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"invalid run config: {exc}")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}")
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n",
                              encoding="utf-8")


# Full-scale reference presets; recorded as metadata, never exercised by tests.
FULL_SCALE_PRESETS = {
    "base": {
        "model": {"vocab_size": 21128, "d_model": 768, "num_layers": 12,
                  "num_heads": 12, "max_seq_len": 512, "scheme": "frpe"},
        "schedule": {"kind": "linear_warmup_linear_decay", "lr_max": 1.8e-4,
                     "warmup_steps": 1800, "total_steps": 1_000_000},
        "batch_size": 14400,
    },
    "large": {
        "model": {"vocab_size": 21128, "d_model": 1024, "num_layers": 24,
                  "num_heads": 16, "max_seq_len": 512, "scheme": "frpe"},
        "schedule": {"kind": "linear_warmup_poly_decay", "lr_max": 1e-4,
                     "warmup_steps": 1800, "total_steps": 1_000_000},
        "batch_size": 5120,
    },
}
