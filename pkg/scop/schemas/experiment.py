import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from ..core.exceptions import ConfigError
from ..models.architectures import ARCHITECTURES

DATASETS = ("mnist", "cifar10")


class ControlMode(str, Enum):
    KNOCKOFF = "knockoff"
    NOISE = "noise"
    RANDOM_SAMPLE = "random-sample"
    NONE = "none"


class Criterion(str, Enum):
    SCOP = "scop"
    L1 = "l1"
    RANDOM = "random"


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=0.04, gt=0, description="Initial learning rate (cosine decayed)")
    epochs: int = Field(default=5, ge=0, description="Training epochs")
    batch: int = Field(default=128, gt=0, description="Mini-batch size")
    momentum: float = Field(default=0.9, ge=0, lt=1, description="SGD momentum")
    weight_decay: float = Field(default=5e-4, ge=0, description="L2 weight decay")
    augment: bool = Field(default=False, description="Random crop; colour images also get a horizontal flip")
    max_examples: Optional[int] = Field(default=None, gt=0, description="Use only the first N training examples")


class SelectionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(default=0.001, gt=0, description="Adam learning rate for the scaling logits")
    epochs: int = Field(default=10, ge=0, description="Selection epochs")
    batch: int = Field(default=128, gt=0, description="Mini-batch size")
    control: ControlMode = Field(default=ControlMode.KNOCKOFF, description="Control group")
    bias: bool = Field(default=False, description="Add second-order bias pairs after each prunable conv")
    detach_control: bool = Field(default=False, description="Detach control-stream features from the tape")
    check_invariants: bool = Field(default=True, description="Assert beta + beta_tilde == 1 after every step")
    max_examples: Optional[int] = Field(default=None, gt=0, description="Use only the first N training examples")


class KnockoffConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ridge: float = Field(default=1e-3, ge=0, description="Ridge relative to the mean covariance diagonal")
    clip: bool = Field(default=True, description="Clamp knockoff pixels to the data range")


class PruneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rate: float = Field(default=0.5, ge=0, lt=1, description="Uniform per-layer pruning rate")
    criterion: Criterion = Field(default=Criterion.SCOP, description="Importance criterion")
    bn_scaled: bool = Field(default=True, description="Scale importance by |gamma| of the following BN")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field(default="scop", min_length=1, description="Experiment label in metrics records")
    arch: str = Field(default="small-cnn", description="Architecture name")
    dataset: str = Field(default="mnist", description="Dataset name")
    seed: int = Field(..., ge=0, description="Master seed for every random stream")
    pretrain: TrainConfig = Field(default_factory=TrainConfig)
    knockoff: KnockoffConfig = Field(default_factory=KnockoffConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    prune: PruneConfig = Field(default_factory=PruneConfig)
    finetune: TrainConfig = Field(default_factory=lambda: TrainConfig(lr=0.01, epochs=20))

    @field_validator("arch")
    @classmethod
    def validate_arch(cls, v):
        if v not in ARCHITECTURES:
            raise ValueError(f"Invalid arch: {v}. Valid architectures are: {', '.join(ARCHITECTURES)}")
        return v

    @field_validator("dataset")
    @classmethod
    def validate_dataset(cls, v):
        if v not in DATASETS:
            raise ValueError(f"Invalid dataset: {v}. Valid datasets are: {', '.join(DATASETS)}")
        return v

    @classmethod
    def from_file(cls, path: Path, overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        """Load a JSON config; dotted override keys (``prune.rate``) win over the file."""
        payload = json.loads(Path(path).read_text()) if path else {}
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: expected a JSON object, found {type(payload).__name__}")
        return cls.model_validate(apply_overrides(payload, overrides or {}))

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        return type(self).model_validate(apply_overrides(self.model_dump(mode="json"), overrides))

    def stage_payload(self, *sections: str) -> Dict[str, Any]:
        """The config slice a stage artifact depends on."""
        dumped = self.model_dump(mode="json")
        base = {"arch": self.arch, "dataset": self.dataset, "seed": self.seed}
        base.update({s: dumped[s] for s in sections})
        return base


def apply_overrides(payload: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = json.loads(json.dumps(payload))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = merged
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return merged
