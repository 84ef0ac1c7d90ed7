"""Model presets and run configuration files.

Config files are flat ``key = value`` text with dotted sections::

    model.preset = S
    model.ratios = 1,2,2,1
    train.steps = 1000

``#`` starts a comment. Later keys and command-line overrides win.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import StftConfig
from .train import EdenConfig, LossWeights
from .zipblocks import ModelConfig

DEFAULT_STFT = StftConfig()
TINY_STFT = StftConfig(n_fft=64, win_length=64, hop=32)

# name: (N, ratios, C, heads)
PRESET_TABLE = {
    "S": (4, (1, 2, 2, 1), 64, 4),
    "S2": (4, (1, 1, 1, 1), 64, 4),
    "S3": (4, (1, 2, 4, 1), 64, 4),
    "S4": (4, (1, 2, 4, 2), 64, 4),
    "S5": (4, (1, 4, 4, 2), 64, 4),
    "S6": (4, (2, 3, 4, 2), 64, 4),
    "S7": (4, (2, 6, 8, 2), 64, 4),
    "S8": (4, (3, 6, 8, 3), 64, 4),
    "M": (6, (1, 2, 3, 4, 2, 1), 128, 8),
    # CI-sized model for tests and the smoke run
    "S-tiny": (2, (1, 2), 16, 2),
}
S_FAMILY = ["S", "S2", "S3", "S4", "S5", "S6", "S7", "S8"]


def preset(name: str) -> ModelConfig:
    try:
        n, ratios, c, heads = PRESET_TABLE[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESET_TABLE)}") from None
    return ModelConfig(n_stacks=n, ratios=ratios, channels=c, heads=heads, name=name)


def preset_stft(name: str) -> StftConfig:
    return TINY_STFT if name == "S-tiny" else DEFAULT_STFT


@dataclass
class DataConfig:
    source: str = "synthetic"
    dir: str = ""
    n_pairs: int = 8
    duration_s: float = 2.0
    snr_min: float = -5.0
    snr_max: float = 15.0
    seed: int = 0


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 4
    segment_seconds: float = 2.0
    steps: int = 1000
    checkpoint_dir: str = "checkpoints"
    checkpoint_every: int = 500
    precision: str = "float64"
    f64_checkpoint: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: preset("S"))
    stft: StftConfig = field(default_factory=StftConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eden: EdenConfig = field(default_factory=EdenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "stft": dataclasses.asdict(self.stft),
            "loss": dataclasses.asdict(self.loss),
            "eden": dataclasses.asdict(self.eden),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=ModelConfig(**{**d["model"], "ratios": tuple(d["model"]["ratios"])}),
            stft=StftConfig(**d["stft"]),
            loss=LossWeights(**d["loss"]),
            eden=EdenConfig(**d["eden"]),
            train=TrainConfig(**d["train"]),
            data=DataConfig(**d["data"]),
        )


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ValueError(f"line {lineno}: key {key!r} needs a section prefix like 'model.'")
        out[key] = value
    return out


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if current is None:
        return int(value)
    return value


def build_run_config(values: dict[str, str]) -> RunConfig:
    """Apply dotted ``section.key`` values on top of defaults.

    ``model.preset`` selects a preset (and its STFT) before other model keys apply.
    """
    values = dict(values)
    name = values.pop("model.preset", None)
    sections = {
        "model": dataclasses.asdict(preset(name)) if name else dataclasses.asdict(preset("S")),
        "stft": dataclasses.asdict(preset_stft(name) if name else DEFAULT_STFT),
        "loss": dataclasses.asdict(LossWeights()),
        "eden": dataclasses.asdict(EdenConfig()),
        "train": dataclasses.asdict(TrainConfig()),
        "data": dataclasses.asdict(DataConfig()),
    }
    sections["model"]["ratios"] = tuple(sections["model"]["ratios"])
    explicit_model = {k.split(".", 1)[1] for k in values if k.startswith("model.")}
    for key, value in values.items():
        section, sub = key.split(".", 1)
        if section not in sections or sub not in sections[section]:
            raise KeyError(f"unknown config key {key!r}")
        sections[section][sub] = _coerce(value, sections[section][sub])
    model = sections["model"]
    if name and explicit_model - {"name"}:
        model["name"] = "custom"
    if "channels" in explicit_model or "heads" in explicit_model:
        # derived dims follow the new width unless given explicitly
        for derived in ("ffn_hidden", "attn_head_dim"):
            if derived not in explicit_model:
                model[derived] = None
    if "ratios" in explicit_model and "n_stacks" not in explicit_model:
        model["n_stacks"] = len(model["ratios"])
    return RunConfig.from_dict(sections)


def load_run_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return build_run_config(values)
