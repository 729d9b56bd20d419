"""
DualNoise Experiment Configuration
Hyper-parameters, experiment settings, presets and the flat key-value config format.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigurationError

# Load environment variables
load_dotenv()

# neighbor-margin K when k_top is left unset
K_TOP_BY_NOISE = {"symmetric": 3, "asymmetric": 1}

OUTPUT_ROOT_ENV = "DUALNOISE_OUTPUT_ROOT"
DEVICE_ENV = "DUALNOISE_DEVICE"
LOG_LEVEL_ENV = "DUALNOISE_LOG_LEVEL"


class HyperParams(BaseModel):
    """Training and identification hyper-parameters (defaults follow the CIFAR setup)"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(0.1, gt=0, description="Temperature of prototype logits, BCL and neighbor weights")
    sharpen_t: float = Field(0.5, gt=0, description="Sharpening temperature T of the pseudo-label target")
    k_top: Optional[int] = Field(
        None, ge=1, description="K, top-K non-label entries in the neighbor margin (None: 3 symmetric, 1 asymmetric)"
    )
    k_neighbors: int = Field(200, ge=1, description="k, neighbors aggregated into the neighbor label")
    mixup_alpha: float = Field(1.0, gt=0, description="Beta(alpha, alpha) parameter of mixup")
    alpha_id: float = Field(0.9, gt=0, le=1, description="Per-class clean selection budget")
    alpha_ood: float = Field(0.1, ge=0, lt=1, description="Fraction of the train set filtered as open-set")
    lambda_con: float = Field(0.5, ge=0)
    lambda_bcl: float = Field(0.3, ge=0)
    lambda_proto: float = Field(1.0, ge=0)
    warmup_epochs: int = Field(50, ge=0)
    total_epochs: int = Field(300, ge=1)
    batch_size: int = Field(128, ge=2)
    lr: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(5e-4, ge=0)
    proj_dim: int = Field(128, ge=1)
    hidden_dim: int = Field(256, ge=1)

    @model_validator(mode="after")
    def _check_schedule(self) -> "HyperParams":
        # warmup == total is a pure warm-up run
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must not exceed total_epochs ({self.total_epochs})"
            )
        return self


class ExperimentConfig(BaseModel):
    """Everything one synth/train/eval run needs, validated before any compute"""

    model_config = ConfigDict(extra="forbid")

    # dataset: a saved dataset directory, an external clean source (.npz) or inline synthesis parameters
    dataset_path: Optional[str] = None
    source_path: Optional[str] = None
    c_total: int = Field(10, ge=2)
    known_classes: int = Field(8, ge=1)
    dim: int = Field(32, ge=1)
    per_class: int = Field(500, ge=2)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    separation: float = Field(3.0, gt=0)
    noise_type: Literal["symmetric", "asymmetric"] = "symmetric"
    noise_rate: float = Field(0.4, ge=0, le=1)
    task_mode: Literal["lond", "lcnd", "lrnd"] = "lond"
    open_train_count: Optional[int] = Field(None, ge=0)

    hyper: HyperParams = Field(default_factory=HyperParams)

    method: Literal["dual", "ce"] = "dual"
    enable_pu: bool = True
    enable_con: bool = True
    enable_bcl: bool = True

    seed: int = 0
    output_dir: Optional[str] = None
    device: str = Field(default_factory=lambda: os.getenv(DEVICE_ENV, "cpu"))
    save_every: int = Field(10, ge=1)
    eval_batch_size: int = Field(1024, ge=1)
    progress: bool = True

    @field_validator("noise_type", mode="before")
    @classmethod
    def _expand_noise_alias(cls, value: Any) -> Any:
        aliases = {"sym": "symmetric", "asym": "asymmetric"}
        return aliases.get(value, value)

    @model_validator(mode="after")
    def _check_classes(self) -> "ExperimentConfig":
        if self.dataset_path is not None or self.source_path is not None:
            # class counts come from the files
            return self
        if self.known_classes > self.c_total:
            raise ValueError(f"known_classes ({self.known_classes}) exceeds c_total ({self.c_total})")
        if self.task_mode != "lcnd" and self.known_classes == self.c_total:
            raise ValueError(f"task_mode '{self.task_mode}' needs open classes; set known_classes < c_total or use lcnd")
        return self

    @model_validator(mode="after")
    def _resolve_k_top(self) -> "ExperimentConfig":
        if self.hyper.k_top is None:
            self.hyper = self.hyper.model_copy(update={"k_top": K_TOP_BY_NOISE[self.noise_type]})
        return self

    @property
    def is_closed_world(self) -> bool:
        return self.task_mode == "lcnd" or self.known_classes == self.c_total

    def resolve_output_dir(self, name: str = "run") -> Path:
        """Output directory, falling back to $DUALNOISE_OUTPUT_ROOT/<name>"""
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.getenv(OUTPUT_ROOT_ENV, "runs")) / name

    def to_flat_dict(self) -> Dict[str, Any]:
        """Flatten the nested hyper-parameters into one key space"""
        flat = self.model_dump(exclude={"hyper"})
        flat.update(self.hyper.model_dump())
        return flat

    def write_echo(self, directory: Union[str, Path]) -> Path:
        """Write the exact config used into a run directory"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.json"
        path.write_text(json.dumps(self.to_flat_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path


HYPER_KEYS = frozenset(HyperParams.model_fields)


def build_config(values: Dict[str, Any]) -> ExperimentConfig:
    """
    Build a validated ExperimentConfig from a flat mapping.

    Keys may name ExperimentConfig fields or HyperParams fields; None values are dropped.

    Raises:
        ConfigurationError: on unknown keys or any failed validation
    """
    experiment: Dict[str, Any] = {}
    hyper: Dict[str, Any] = {}
    for key, value in values.items():
        if value is None:
            continue
        if key in HYPER_KEYS:
            hyper[key] = value
        elif key in ExperimentConfig.model_fields and key != "hyper":
            experiment[key] = value
        else:
            raise ConfigurationError(f"Unknown config key: {key}")
    try:
        return ExperimentConfig(hyper=HyperParams(**hyper), **experiment)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def parse_config_text(text: str) -> Dict[str, str]:
    """Parse the flat `key = value` format; `#` starts a comment"""
    values: Dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"Line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"Line {line_no}: empty key")
        values[key] = value
    return values


def collect_values(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None,
                   preset: Optional[str] = None) -> Dict[str, Any]:
    """
    Merge preset, then file, then explicit overrides (later wins) into one flat mapping.

    Raises:
        ConfigurationError: missing file or unknown preset
    """
    values: Dict[str, Any] = {}
    if preset is not None:
        if preset not in CONFIG_PRESETS:
            raise ConfigurationError(f"Unknown preset '{preset}'. Available: {', '.join(CONFIG_PRESETS)}")
        values.update(CONFIG_PRESETS[preset]["values"])
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8")))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return values


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Dict[str, Any]] = None,
                preset: Optional[str] = None) -> ExperimentConfig:
    """
    Load a config from preset, then file, then explicit overrides (later wins).

    Raises:
        ConfigurationError: missing file, unknown preset or invalid values
    """
    return build_config(collect_values(path, overrides, preset))


# Available presets
CONFIG_PRESETS: Dict[str, Dict[str, Any]] = {
    "smoke": {
        "description": "Seconds-long sanity run on a tiny synthetic task",
        "values": {
            "c_total": 5, "known_classes": 4, "dim": 8, "per_class": 40, "separation": 4.0,
            "warmup_epochs": 2, "total_epochs": 4, "k_neighbors": 5, "batch_size": 32,
            "hidden_dim": 32, "proj_dim": 16, "save_every": 2, "progress": False,
        },
    },
    "desk": {
        "description": "Desk-scale LOND task: 10 classes, 8 known, 40% symmetric noise",
        "values": {
            "c_total": 10, "known_classes": 8, "dim": 32, "per_class": 500, "test_fraction": 0.2,
            "separation": 3.0, "noise_type": "symmetric", "noise_rate": 0.4,
            "warmup_epochs": 10, "total_epochs": 60, "k_neighbors": 20, "batch_size": 128,
            "hidden_dim": 256, "proj_dim": 128, "save_every": 10,
        },
    },
    "extended": {
        "description": "Full-length schedule: 300 epochs with 50 warm-up, k=200",
        "values": {
            "warmup_epochs": 50, "total_epochs": 300, "k_neighbors": 200, "save_every": 25,
        },
    },
}

# Ablation ladder: switch overrides per rung
ABLATION_LADDER: Dict[str, Dict[str, Any]] = {
    "warmup": {"warmup_only": True, "enable_pu": False, "enable_con": False, "enable_bcl": False},
    "baseline": {"enable_pu": False, "enable_con": False, "enable_bcl": False},
    "+pu": {"enable_pu": True, "enable_con": False, "enable_bcl": False},
    "+con": {"enable_pu": True, "enable_con": True, "enable_bcl": False},
    "full": {"enable_pu": True, "enable_con": True, "enable_bcl": True},
}


def ladder_config(base: ExperimentConfig, rung: str, seed: Optional[int] = None) -> ExperimentConfig:
    """Derive the config of one ablation rung from a base config"""
    if rung not in ABLATION_LADDER:
        raise ConfigurationError(f"Unknown ablation rung '{rung}'. Available: {', '.join(ABLATION_LADDER)}")
    values = base.to_flat_dict()
    switches = dict(ABLATION_LADDER[rung])
    if switches.pop("warmup_only", False):
        values["total_epochs"] = values["warmup_epochs"]
    values.update(switches)
    values["method"] = "dual"
    if seed is not None:
        values["seed"] = seed
    return build_config(values)


def print_presets():
    """Print the available presets"""
    print("Available DualNoise Presets:")
    print("=" * 50)
    for name, preset in CONFIG_PRESETS.items():
        print(f"\nPreset: {name}")
        print(f"Description: {preset['description']}")
        for key, value in preset["values"].items():
            print(f"  {key} = {value}")


if __name__ == "__main__":
    print("DualNoise Configuration")
    print("=" * 40)
    print_presets()
    try:
        config = load_config(preset="desk")
        print(f"\nDesk config validated: {config.hyper.total_epochs} epochs, k={config.hyper.k_neighbors}")
    except ConfigurationError as e:
        print(f"\n❌ Configuration error: {e}")
