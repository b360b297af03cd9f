import math
from typing import List

from pydantic import BaseModel, Field, model_validator


def keep_budget(rate: float, filters: int) -> int:
    """kappa = ceil((1 - r) * M), rounded first so 0.7 * 10 stays 7."""
    return math.ceil(round((1.0 - rate) * filters, 9))


class LayerKeep(BaseModel):
    layer_index: int = Field(..., ge=0, description="Index of the pruned conv layer")
    filters: int = Field(..., gt=0, description="Filter count M before pruning")
    keep: List[int] = Field(..., description="Sorted indices of preserved filters")


class PruningPlan(BaseModel):
    rate: float = Field(..., ge=0, lt=1, description="Uniform pruning rate")
    criterion: str = Field(default="scop", description="Importance criterion that produced the plan")
    layers: List[LayerKeep] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_keep_lists(self):
        for entry in self.layers:
            budget = keep_budget(self.rate, entry.filters)
            if entry.keep != sorted(set(entry.keep)):
                raise ValueError(f"layer {entry.layer_index}: keep list must be sorted and unique")
            if entry.keep and not 0 <= entry.keep[0] <= entry.keep[-1] < entry.filters:
                raise ValueError(f"layer {entry.layer_index}: keep index out of range 0..{entry.filters - 1}")
            if len(entry.keep) != budget:
                raise ValueError(f"layer {entry.layer_index}: keeps {len(entry.keep)} filters, budget is {budget}")
        return self

    def keep_for(self, layer_index: int) -> List[int]:
        for entry in self.layers:
            if entry.layer_index == layer_index:
                return entry.keep
        raise KeyError(layer_index)


class ReductionSummary(BaseModel):
    params_drop_pct: float
    flops_drop_pct: float
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
