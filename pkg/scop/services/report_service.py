"""Feature histograms and metrics tables."""

import csv
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core.config import settings
from ..models.network import NetworkSpec, forward
from ..schemas.metrics import MetricsRecord

HISTOGRAM_COLUMNS = ("bin_left", "bin_right", "real_count", "knockoff_count")
TABLE_COLUMNS = ("criterion", "control", "bias", "rate", "seeds", "accuracy_gap", "final_accuracy",
                 "params_drop_pct", "flops_drop_pct")


def feature_histogram(real: np.ndarray, knockoff: np.ndarray, bins: int) -> Dict[str, np.ndarray]:
    """Counts of both feature sets over shared uniform bins spanning their pooled range."""
    low = float(min(real.min(), knockoff.min()))
    high = float(max(real.max(), knockoff.max()))
    if high <= low:
        high = low + 1.0
    edges = np.linspace(low, high, bins + 1)
    return {
        "edges": edges,
        "real": np.histogram(real, bins=edges)[0],
        "knockoff": np.histogram(knockoff, bins=edges)[0],
    }


def total_variation(real_counts: np.ndarray, knockoff_counts: np.ndarray) -> float:
    p = real_counts / max(real_counts.sum(), 1)
    q = knockoff_counts / max(knockoff_counts.sum(), 1)
    return float(0.5 * np.abs(p - q).sum())


def emit_feature_histograms(net: NetworkSpec, real_batch: np.ndarray, knockoff_batch: np.ndarray,
                            layer_indices: Sequence[int], out_dir: Path, bins: Optional[int] = None) -> List[Path]:
    """One CSV per layer comparing the real and knockoff feature distributions."""
    bins = bins or settings.histogram_bins
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    real_features: Dict[int, object] = {i: None for i in layer_indices}
    knockoff_features: Dict[int, object] = {i: None for i in layer_indices}
    forward(net, real_batch, "eval", capture=real_features)
    forward(net, knockoff_batch, "eval", capture=knockoff_features)
    paths = []
    for i in layer_indices:
        hist = feature_histogram(real_features[i].data, knockoff_features[i].data, bins)
        path = out_dir / f"features_layer{i}.csv"
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(HISTOGRAM_COLUMNS)
            for k in range(bins):
                writer.writerow([repr(float(hist["edges"][k])), repr(float(hist["edges"][k + 1])),
                                 int(hist["real"][k]), int(hist["knockoff"][k])])
        paths.append(path)
    return paths


def read_histogram_csv(path: Path) -> Dict[str, np.ndarray]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    return {column: np.array([float(row[column]) for row in rows]) for column in HISTOGRAM_COLUMNS}


def read_metrics(path: Path) -> List[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [MetricsRecord.model_validate(json.loads(line))
            for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def format_table(rows: Sequence[Dict]) -> str:
    """Plain-text table of median rows."""
    if not rows:
        return "(no metrics records)"
    cells = [[_cell(row[c]) for c in TABLE_COLUMNS] for row in rows]
    widths = [max(len(c), *(len(r[k]) for r in cells)) for k, c in enumerate(TABLE_COLUMNS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(TABLE_COLUMNS, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)
