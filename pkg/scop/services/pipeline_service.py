"""Experiment orchestration.

Every stage output is stored under a content address derived from the stage
config and the addresses of its inputs, so a stage that already ran with the
same inputs is loaded instead of recomputed (unless ``force`` is set).
"""

import statistics
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from ..core.cache import ArtifactStore
from ..core.config import settings
from ..core.integrity import fingerprint_json
from ..core.seeding import stream
from ..models.architectures import build_arch, planted_network
from ..models.network import NetworkSpec
from ..schemas.experiment import ControlMode, Criterion, ExperimentConfig, SelectionConfig, TrainConfig
from ..schemas.metrics import MetricsRecord
from ..schemas.pruning import PruningPlan
from .checkpoint_service import decode_checkpoint, encode_checkpoint, json_section, network_from_sections, \
    network_sections, section_json
from .dataset_service import Dataset, PlantedData, load_dataset, make_planted_dataset
from .knockoff_service import (
    KnockoffModel,
    fit_knockoff_model,
    generate_knockoff_dataset,
    load_knockoff_model,
    read_knockoff_cache,
    save_knockoff_model,
    swap_moment_test,
)
from .pruning_service import apply_plan, compute_importance, importance_for, make_plan, reduction_summary
from .selection_service import (
    BiasPairs,
    ControlSource,
    SelectionState,
    load_selection_state,
    optimize_scaling,
    save_selection_state,
)
from .training_service import evaluate, train

HISTOGRAM_BINS = 10
NOISE_GAMMA = 2.0


@dataclass
class KnockoffArtifacts:
    model: KnockoffModel
    images: np.ndarray
    key: str


@dataclass
class RunResult:
    net: NetworkSpec
    record: MetricsRecord


class ScopPipeline:
    """Stages of one experiment over a shared artifact store."""

    def __init__(self, config: ExperimentConfig, store: Optional[ArtifactStore] = None,
                 data_dir: Optional[Path] = None, force: bool = False):
        self.config = config
        self.store = store or ArtifactStore()
        self.data_dir = Path(data_dir or settings.data_dir)
        self.force = force
        self._data: Optional[Tuple[Dataset, Dataset]] = None

    # -- helpers ------------------------------------------------------------
    def _lookup(self, key: str, suffix: str) -> Optional[Path]:
        return None if self.force else self.store.get(key, suffix)

    def data(self) -> Tuple[Dataset, Dataset]:
        if self._data is None:
            self._data = load_dataset(self.config.dataset, self.data_dir)
        return self._data

    def _store_network(self, key: str, net: NetworkSpec, **meta) -> Path:
        sections = network_sections(net)
        sections["meta.json"] = json_section(meta)
        return self.store.set(key, encode_checkpoint(sections), ".ckpt")

    @staticmethod
    def _load_network(path: Path) -> Tuple[NetworkSpec, Dict]:
        sections = decode_checkpoint(path.read_bytes(), path.name)
        return network_from_sections(sections), section_json(sections["meta.json"])

    # -- stages -------------------------------------------------------------
    def pretrain(self) -> Tuple[NetworkSpec, float, str]:
        cfg = self.config
        key = self.store.key("pretrain", cfg.stage_payload("pretrain"))
        cached = self._lookup(key, ".ckpt")
        if cached is not None:
            net, meta = self._load_network(cached)
            return net, float(meta["accuracy"]), key
        train_set, test_set = self.data()
        logger.info(f"Stage pretrain: {cfg.arch} on {cfg.dataset}")
        net = build_arch(cfg.arch, train_set.num_classes, train_set.input_shape, stream(cfg.seed, "init"))
        result = train(net, train_set, test_set, cfg.pretrain, cfg.seed, "pretrain")
        self._store_network(key, result.net, accuracy=result.accuracy)
        return result.net, result.accuracy, key

    def knockoffs(self) -> KnockoffArtifacts:
        cfg = self.config
        key = self.store.key("knockoff", {"dataset": cfg.dataset, "seed": cfg.seed,
                                          "knockoff": cfg.knockoff.model_dump(mode="json")})
        model_path, cache_path = self._lookup(key, ".knm"), self._lookup(key, ".knk")
        if model_path is not None and cache_path is not None:
            return KnockoffArtifacts(load_knockoff_model(model_path), read_knockoff_cache(cache_path), key)
        train_set, _ = self.data()
        logger.info(f"Stage knockoff: fitting on {len(train_set)} {cfg.dataset} images")
        model = fit_knockoff_model(train_set.images.reshape(len(train_set), -1), cfg.knockoff.ridge)
        images = generate_knockoff_dataset(model, train_set, cfg.seed, self.store.path(key, ".knk"),
                                           clip=cfg.knockoff.clip)
        save_knockoff_model(self.store.path(key, ".knm"), model)
        return KnockoffArtifacts(model, images, key)

    def select(self, net: NetworkSpec, pretrain_key: str) -> Tuple[SelectionState, str]:
        cfg = self.config
        sel = cfg.selection
        needs_knockoffs = sel.control is ControlMode.KNOCKOFF or sel.bias
        knock = self.knockoffs() if needs_knockoffs else None
        upstream = [pretrain_key] + ([knock.key] if knock else [])
        key = self.store.key("select", cfg.stage_payload("selection"), *upstream)
        cached = self._lookup(key, ".ckpt")
        if cached is not None:
            return load_selection_state(cached), key
        train_set, _ = self.data()
        data = train_set.head(sel.max_examples)
        images = knock.images[:len(data)] if knock and sel.control is ControlMode.KNOCKOFF else None
        source = ControlSource(sel.control, data.images, images)
        bias = BiasPairs.build(net, knock.model.s) if knock and sel.bias else None
        logger.info(f"Stage select: control={sel.control.value} bias={sel.bias} epochs={sel.epochs}")
        result = optimize_scaling(net, SelectionState.initial(net), data, source, sel, cfg.seed, bias)
        save_selection_state(self.store.path(key, ".ckpt"), result.state)
        return result.state, key

    def plan(self, net: NetworkSpec, state: Optional[SelectionState], upstream: Sequence[str]) -> Tuple[PruningPlan, str]:
        cfg = self.config
        key = self.store.key("prune", cfg.stage_payload("prune", "selection"), *upstream)
        cached = self._lookup(key, ".json")
        if cached is not None:
            return PruningPlan.model_validate_json(cached.read_text()), key
        report = importance_for(cfg.prune.criterion, net, cfg.seed, state,
                                bn_scaled=cfg.prune.bn_scaled, control=cfg.selection.control)
        plan = make_plan(report, cfg.prune.rate)
        self.store.set(key, plan.model_dump_json(indent=2).encode("utf-8"), ".json")
        return plan, key

    def finetune(self, pruned: NetworkSpec, plan_key: str) -> Tuple[NetworkSpec, float, str]:
        cfg = self.config
        key = self.store.key("finetune", cfg.stage_payload("finetune"), plan_key)
        cached = self._lookup(key, ".ckpt")
        if cached is not None:
            net, meta = self._load_network(cached)
            return net, float(meta["accuracy"]), key
        train_set, test_set = self.data()
        result = train(pruned, train_set, test_set, cfg.finetune, cfg.seed, "finetune")
        self._store_network(key, result.net, accuracy=result.accuracy)
        return result.net, result.accuracy, key

    # -- full sequence ------------------------------------------------------
    def run(self) -> RunResult:
        cfg = self.config
        net, baseline, pretrain_key = self.pretrain()
        state, upstream = None, [pretrain_key]
        if cfg.prune.criterion is Criterion.SCOP:
            state, select_key = self.select(net, pretrain_key)
            upstream.append(select_key)
        plan, plan_key = self.plan(net, state, upstream)
        pruned = apply_plan(net, plan)
        _, test_set = self.data()
        pruned_accuracy = evaluate(pruned, test_set)
        final_net, final_accuracy, finetune_key = self.finetune(pruned, plan_key)
        summary = reduction_summary(net, final_net)
        record = MetricsRecord(
            timestamp=datetime.now(timezone.utc).isoformat(),
            experiment=cfg.name,
            config_key=fingerprint_json(cfg.model_dump(mode="json"))[:24],
            seed=cfg.seed,
            arch=cfg.arch,
            dataset=cfg.dataset,
            control=cfg.selection.control.value,
            bias=cfg.selection.bias,
            criterion=cfg.prune.criterion.value,
            rate=cfg.prune.rate,
            baseline_accuracy=baseline,
            pruned_accuracy=pruned_accuracy,
            final_accuracy=final_accuracy,
            accuracy_gap=baseline - final_accuracy,
            params_drop_pct=summary.params_drop_pct,
            flops_drop_pct=summary.flops_drop_pct,
            beta_histograms=beta_histograms(state) if state else {},
            artifacts={"pretrain": pretrain_key, "plan": plan_key, "finetune": finetune_key},
        )
        logger.info(f"Run finished: baseline={baseline:.2f}% pruned={pruned_accuracy:.2f}% "
                    f"final={final_accuracy:.2f}% params-{summary.params_drop_pct:.1f}% "
                    f"flops-{summary.flops_drop_pct:.1f}%")
        return RunResult(net=final_net, record=record)


def beta_histograms(state: SelectionState) -> Dict[str, List[int]]:
    return {str(i): np.histogram(state.beta(i), bins=HISTOGRAM_BINS, range=(0.0, 1.0))[0].tolist()
            for i in state.layers}


def append_metrics(path: Path, record: MetricsRecord) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        handle.write(record.model_dump_json() + "\n")


def run_scop(config: ExperimentConfig, store: Optional[ArtifactStore] = None, data_dir: Optional[Path] = None,
             metrics_path: Optional[Path] = None, force: bool = False) -> RunResult:
    result = ScopPipeline(config, store, data_dir, force).run()
    if metrics_path is not None:
        append_metrics(metrics_path, result.record)
    return result


def ablate(config: ExperimentConfig, seeds: Iterable[int], store: Optional[ArtifactStore] = None,
           data_dir: Optional[Path] = None, metrics_path: Optional[Path] = None,
           force: bool = False) -> List[MetricsRecord]:
    """One run per control mode x bias flag x seed, sharing stage artifacts."""
    records = []
    for seed in seeds:
        for mode in ControlMode:
            for bias in (False, True):
                variant = config.with_overrides({"seed": seed, "selection.control": mode.value,
                                                 "selection.bias": bias, "prune.criterion": Criterion.SCOP.value})
                records.append(run_scop(variant, store, data_dir, metrics_path, force).record)
    return records


def sweep_rates(config: ExperimentConfig, rates: Sequence[float], finetune: bool = True,
                store: Optional[ArtifactStore] = None, data_dir: Optional[Path] = None,
                metrics_path: Optional[Path] = None, force: bool = False) -> List[MetricsRecord]:
    """Prune one selection result at several rates."""
    records = []
    for rate in rates:
        overrides = {"prune.rate": rate}
        if not finetune:
            overrides["finetune.epochs"] = 0
        records.append(run_scop(config.with_overrides(overrides), store, data_dir, metrics_path, force).record)
    return records


def median_summary(records: Sequence[MetricsRecord]) -> List[Dict]:
    """Per (criterion, control, bias, rate) medians over seeds."""
    groups: Dict[Tuple, List[MetricsRecord]] = {}
    for record in records:
        groups.setdefault((record.criterion, record.control, record.bias, record.rate), []).append(record)
    rows = []
    for (criterion, control, bias, rate), members in sorted(groups.items()):
        rows.append({
            "criterion": criterion,
            "control": control,
            "bias": bias,
            "rate": rate,
            "seeds": len(members),
            "accuracy_gap": statistics.median(r.accuracy_gap for r in members),
            "final_accuracy": statistics.median(r.final_accuracy for r in members),
            "params_drop_pct": statistics.median(r.params_drop_pct for r in members),
            "flops_drop_pct": statistics.median(r.flops_drop_pct for r in members),
        })
    return rows


# -- planted diagnostic ---------------------------------------------------------

@dataclass
class DiagnosticResult:
    seed: int
    control: str
    precision: float
    importance: np.ndarray
    signal_filters: np.ndarray
    kept: List[int]
    swap_discrepancy: float


def build_planted_network(task: PlantedData, seed: int) -> Tuple[NetworkSpec, np.ndarray]:
    """A 1x1-conv network whose signal filters are +/- the class projections and
    whose noise filters live in the noise coordinates only.

    Noise filters get BN scale 2 and signal filters scale 1; filter order is a
    seeded permutation. Returns the network and the signal-filter mask.
    """
    rng = stream(seed, "planted", "network")
    mask, projections = task.signal_mask, task.projections
    classes = projections.shape[0]
    signal_idx, noise_idx = np.flatnonzero(mask), np.flatnonzero(~mask)
    signal = np.zeros((2 * classes, mask.size))
    signal[:classes, signal_idx] = projections
    signal[classes:, signal_idx] = -projections
    noise = np.zeros((2 * classes, mask.size))
    noise[:, noise_idx] = rng.standard_normal((2 * classes, noise_idx.size))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    filters = np.vstack([signal, noise])
    gamma = np.concatenate([np.ones(2 * classes), np.full(2 * classes, NOISE_GAMMA)])
    order = rng.permutation(filters.shape[0])
    planted = planted_network(filters[order], gamma[order], classes, rng)
    return planted, order < 2 * classes


def planted_diagnostic(seed: int, control: ControlMode = ControlMode.KNOCKOFF, epochs: int = 10,
                       lr: float = 0.01, n: int = 2048, bias: bool = False) -> DiagnosticResult:
    """Precision of the top half of filters by importance against the planted signal filters."""
    task = make_planted_dataset(seed, n, split="train")
    test = make_planted_dataset(seed, max(n // 4, 1), split="test")
    planted, signal_filters = build_planted_network(task, seed)
    head = planted.depth - 1
    fitted = train(planted, task.dataset, test.dataset, TrainConfig(lr=0.1, epochs=5, batch=128, weight_decay=0.0),
                   seed, "planted-head", trainable=lambda name: name.startswith(f"{head}."))
    planted = fitted.net

    data = task.dataset
    model = fit_knockoff_model(data.images.reshape(len(data), -1))
    knockoffs = generate_knockoff_dataset(model, data, seed, clip=False)
    subset = stream(seed, "planted", "swap").choice(data.dim, size=data.dim // 2, replace=False)
    discrepancy = swap_moment_test(data.images.reshape(len(data), -1), knockoffs.reshape(len(data), -1), subset)

    source = ControlSource(control, data.images, knockoffs if control is ControlMode.KNOCKOFF else None)
    config = SelectionConfig(lr=lr, epochs=epochs, batch=128, control=control, bias=bias)
    pairs = BiasPairs.build(planted, model.s) if bias else None
    state = optimize_scaling(planted, SelectionState.initial(planted), data, source, config, seed, pairs).state
    report = compute_importance(state, planted, bn_scaled=True, control=control)
    layer = planted.prunable_indices[0]
    kept = make_plan(report, 0.5).keep_for(layer)
    precision = float(signal_filters[kept].mean())
    logger.info(f"Planted diagnostic seed={seed} control={control.value}: precision={precision:.3f} "
                f"(head accuracy {fitted.accuracy:.1f}%, swap discrepancy {discrepancy:.3f})")
    return DiagnosticResult(seed=seed, control=control.value, precision=precision,
                            importance=report.scores[layer], signal_filters=signal_filters,
                            kept=kept, swap_discrepancy=discrepancy)
