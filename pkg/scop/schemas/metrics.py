from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class MetricsRecord(BaseModel):
    """One line of the metrics JSON-lines file.

    Every field except ``timestamp`` is a pure function of the experiment
    config and seed.
    """

    timestamp: str = Field(..., description="UTC ISO-8601 time the record was written")
    experiment: str
    config_key: str = Field(..., description="Content address of the resolved config")
    seed: int
    arch: str
    dataset: str
    control: str
    bias: bool
    criterion: str
    rate: float
    baseline_accuracy: float
    pruned_accuracy: float
    final_accuracy: float
    accuracy_gap: float = Field(..., description="baseline_accuracy - final_accuracy, in percentage points")
    params_drop_pct: float
    flops_drop_pct: float
    beta_histograms: Dict[str, List[int]] = Field(default_factory=dict, description="10-bin histogram of beta per prunable layer")
    artifacts: Dict[str, str] = Field(default_factory=dict)
    note: Optional[str] = None
