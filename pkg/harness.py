"""
Experiment harness.

- Experiment files: YAML with single-parent ``base:`` inheritance, registry
  presets as the lowest layer, pydantic validation with unknown keys rejected
- Runs: one trainer call per seed inside a ``ResourceMonitor``, results flushed
  to CSV/JSON after every seed and before an error propagates
- Reports: per-metric deltas of an alternative algorithm against its BP baseline
- Tuning: seeded random search over log-uniform / integer ranges
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Union

import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from algo_bp import train_bp
from algo_cafo import train_cafo
from algo_ff import train_ff
from algo_mf import train_mf
from config import config as env_config
from datasets import DataBundle, canonical_dataset_name, get_meta, prepare_data
from errors import ConfigError, ReportError
from hyperparams import get_hyperparams, get_search_space, has_hyperparams
from model_specs import canonical_architecture, parse_architecture
from numerics import RngStream
from profiling import FlopsReport, ResourceMonitor, estimate_forward_flops, make_meter
from results import GROUP_COLUMNS, RunResult, read_results_csv, write_results
from tensor_cache import TensorCache

logger = logging.getLogger(__name__)

ALGORITHM_VARIANTS = {
    'bp': ('', 'default'),
    'ff': ('', 'adamw', 'sgd'),
    'cafo': ('', 'rand', 'dfa'),
    'mf': ('', 'default'),
}
EPOCH_BUDGET_FIELDS = ('max_epochs', 'epochs_per_block', 'epochs_per_layer')


# ============================================================================
# CONFIG MODELS
# ============================================================================

class _Strict(BaseModel):
    model_config = ConfigDict(extra='forbid')


METRIC_MODES = {'val_acc': 'maximize', 'val_loss': 'minimize'}
# Early-stopping metrics each trainer actually reads; the first is the default.
HONORED_METRICS = {
    'bp': ('val_acc', 'val_loss'),
    'ff': ('val_acc',),
    'cafo': ('val_loss',),
    'mf': ('val_loss',),
}


class EarlyStoppingConfig(_Strict):
    """Unset ``metric`` defaults per algorithm; ``mode`` always follows ``metric``."""
    metric: Optional[Literal['val_acc', 'val_loss']] = None
    mode: Optional[Literal['maximize', 'minimize']] = None
    patience: int = Field(10, ge=0)
    min_delta: float = Field(0.0, ge=0.0)

    @model_validator(mode='after')
    def _mode_matches_metric(self) -> "EarlyStoppingConfig":
        if self.metric is not None and self.mode is not None and self.mode != METRIC_MODES[self.metric]:
            raise ValueError(f"early_stopping.mode '{self.mode}' contradicts metric '{self.metric}' "
                             f"(expected '{METRIC_MODES[self.metric]}')")
        return self


class MonitorConfig(_Strict):
    """Unset energy/intensity fields fall back to the environment configuration."""
    energy_source: Optional[Literal['null', 'file-poll', 'external-command']] = None
    power_file: Optional[str] = None
    power_command: Optional[str] = None
    memory: bool = True
    memory_interval_ms: Optional[int] = Field(None, ge=10)
    grid_intensity: Optional[float] = Field(None, ge=0.0)


class BPHyperparameters(_Strict):
    optimizer: Literal['sgd', 'adam', 'adamw'] = 'adamw'
    lr: float = Field(..., ge=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    max_epochs: int = 100


class FFHyperparameters(_Strict):
    optimizer: Literal['sgd', 'adam', 'adamw'] = 'adamw'
    ff_lr: float = Field(..., ge=0.0)
    ff_weight_decay: float = Field(0.0, ge=0.0)
    ff_momentum: float = Field(0.0, ge=0.0, lt=1.0)
    downstream_lr: float = Field(..., ge=0.0)
    downstream_weight_decay: float = Field(0.0, ge=0.0)
    downstream_momentum: float = Field(0.0, ge=0.0, lt=1.0)
    threshold_mode: Literal['dynamic', 'fixed'] = 'dynamic'
    threshold: float = 2.0
    include_first_layer: bool = True
    embed_value: Optional[float] = None
    length_norm_eps: float = Field(1e-8, gt=0.0)
    peer_factor: float = Field(0.03, ge=0.0)
    peer_momentum: float = Field(0.9, ge=0.0, le=1.0)
    max_epochs: int = 100


class CaFoHyperparameters(_Strict):
    predictor_lr: float = Field(..., ge=0.0)
    predictor_weight_decay: float = Field(0.0, ge=0.0)
    epochs_per_block: int
    patience: int = Field(8, ge=0)
    block_lr: float = Field(0.0, ge=0.0)
    block_weight_decay: float = Field(0.0, ge=0.0)
    dfa_scale: float = Field(1.0, gt=0.0)
    calibrate_batchnorm: bool = True
    cache_features: bool = True
    parallel_predictors: bool = False


class MFHyperparameters(_Strict):
    lr: float = Field(..., ge=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    epochs_per_layer: int
    patience: int = Field(3, ge=0)
    min_delta: float = Field(0.0, ge=0.0)
    cache_activations: bool = False
    use_bias: bool = True
    aggregate_inference: bool = False


HYPERPARAM_MODELS = {
    'bp': BPHyperparameters,
    'ff': FFHyperparameters,
    'cafo': CaFoHyperparameters,
    'mf': MFHyperparameters,
}


class ExperimentConfig(_Strict):
    name: str = ''
    base: Optional[str] = None
    algorithm: Literal['bp', 'ff', 'cafo', 'mf']
    variant: str = ''
    dataset: str
    architecture: str
    hyperparameters: Any = None
    batch_size: int = Field(128, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    early_stopping: EarlyStoppingConfig = Field(default_factory=EarlyStoppingConfig)
    monitors: MonitorConfig = Field(default_factory=MonitorConfig)
    precision: Literal['float32', 'float64'] = 'float32'
    augmentation: bool = True
    train_subset: Optional[int] = Field(None, ge=1)
    data_dir: Optional[str] = None
    output_dir: Optional[str] = None

    @field_validator('dataset')
    @classmethod
    def _dataset(cls, value: str) -> str:
        return canonical_dataset_name(value)

    @field_validator('architecture')
    @classmethod
    def _architecture(cls, value: str) -> str:
        return canonical_architecture(value)

    @field_validator('hyperparameters', mode='before')
    @classmethod
    def _hyperparameters(cls, value, info):
        algorithm = info.data.get('algorithm')
        if algorithm is None:
            return value
        model = HYPERPARAM_MODELS[algorithm]
        if isinstance(value, model):
            return value
        return model.model_validate(value or {})

    @model_validator(mode='after')
    def _consistency(self) -> "ExperimentConfig":
        if self.hyperparameters is None:
            self.hyperparameters = HYPERPARAM_MODELS[self.algorithm].model_validate({})
        if self.variant not in ALGORITHM_VARIANTS[self.algorithm]:
            raise ValueError(f"variant '{self.variant}' is not valid for {self.algorithm}, "
                             f"expected one of {ALGORITHM_VARIANTS[self.algorithm][1:]}")
        if self.algorithm == 'cafo' and self.architecture != 'cnn_3block':
            raise ValueError("cafo runs on cnn_3block")
        if self.algorithm in ('ff', 'mf') and self.architecture == 'cnn_3block':
            raise ValueError(f"{self.algorithm} runs on MLPs")
        self._resolve_early_stopping()
        return self

    def _resolve_early_stopping(self) -> None:
        es = self.early_stopping
        honored = HONORED_METRICS[self.algorithm]
        if es.metric is None:
            candidates = [m for m in honored if es.mode is None or METRIC_MODES[m] == es.mode]
            if not candidates:
                raise ValueError(f"{self.algorithm} has no early-stopping metric with mode '{es.mode}'")
            es.metric = candidates[0]
        if es.metric not in honored:
            raise ValueError(f"{self.algorithm} stops on {honored}, not '{es.metric}'")
        es.mode = METRIC_MODES[es.metric]


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a resolved mapping; every failure becomes a ``ConfigError``."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}")


# ============================================================================
# LOADING
# ============================================================================

def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Child-overrides-parent merge; nested mappings merge key by key, everything else is replaced."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _read_yaml(path: Path) -> Dict[str, Any]:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}")
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_chain(path: Union[str, Path], _seen: Optional[List[Path]] = None) -> Dict[str, Any]:
    """Merge ``path`` over its ``base:`` ancestors (relative to the including file)."""
    path = Path(path).resolve()
    seen = list(_seen or [])
    if path in seen:
        chain = " -> ".join(p.name for p in seen + [path])
        raise ConfigError(f"config inheritance cycle: {chain}")
    seen.append(path)
    data = _read_yaml(path)
    base = data.pop('base', None)
    if base is None:
        return data
    parent = resolve_chain(path.parent / base, seen)
    parent.pop('base', None)
    merged = deep_merge(parent, data)
    merged['base'] = str(base)
    return merged


def apply_registry_defaults(data: Dict[str, Any]) -> Dict[str, Any]:
    """Put the matching hyperparameter preset underneath ``data`` when one exists."""
    try:
        algorithm = data['algorithm']
        dataset = canonical_dataset_name(data['dataset'])
        arch = canonical_architecture(data['architecture'])
    except (KeyError, TypeError):
        return data
    variant = data.get('variant') or None
    if not has_hyperparams(algorithm, dataset, arch, variant):
        return data
    return deep_merge(get_hyperparams(algorithm, dataset, arch, variant), data)


def load_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    data = resolve_chain(path)
    if overrides:
        data = deep_merge(data, overrides)
    data = apply_registry_defaults(data)
    data.setdefault('name', Path(path).stem)
    experiment = config_from_dict(data)
    logger.info(f"📋 Loaded {experiment.name}: {experiment.algorithm}"
                f"{'-' + experiment.variant if experiment.variant else ''} {experiment.architecture} "
                f"on {experiment.dataset}")
    return experiment


def fingerprint(experiment: ExperimentConfig) -> str:
    """SHA-256 of the canonical resolved config, ignoring seeds, paths and names."""
    payload = experiment.model_dump(mode='json', exclude={'seeds', 'data_dir', 'output_dir', 'name', 'base'})
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode('utf-8')).hexdigest()


# ============================================================================
# RUNNING
# ============================================================================

Trainer = Callable[[ExperimentConfig, DataBundle, int], RunResult]
TRAINERS: Dict[str, Trainer] = {'bp': train_bp, 'ff': train_ff, 'cafo': train_cafo, 'mf': train_mf}


def load_data(experiment: ExperimentConfig, seed: int, data_dir: Optional[Union[str, Path]] = None) -> DataBundle:
    root = Path(data_dir or experiment.data_dir or env_config.BENCH_DATA_DIR)
    return prepare_data(experiment.dataset, root, seed=seed, train_subset=experiment.train_subset,
                        augmentation=experiment.augmentation, cache=TensorCache(root / '.cache'))


def experiment_flops(experiment: ExperimentConfig) -> FlopsReport:
    meta = get_meta(experiment.dataset)
    spec = parse_architecture(experiment.architecture, meta, final_head=experiment.algorithm == 'bp')
    return estimate_forward_flops(spec, experiment.algorithm, meta)


def _monitor_for(experiment: ExperimentConfig) -> ResourceMonitor:
    mon = experiment.monitors
    meter = make_meter(mon.energy_source, mon.power_file, mon.power_command)
    intensity = mon.grid_intensity if mon.grid_intensity is not None else env_config.BENCH_GRID_INTENSITY
    return ResourceMonitor(meter, memory=mon.memory, intensity=intensity, memory_interval_ms=mon.memory_interval_ms)


def run_experiment(experiment: ExperimentConfig, out_dir: Optional[Union[str, Path]] = None,
                   trainers: Optional[Dict[str, Trainer]] = None,
                   data_loader: Optional[Callable[[ExperimentConfig, int], DataBundle]] = None,
                   monitor_factory: Optional[Callable[[ExperimentConfig], ResourceMonitor]] = None,
                   stem: Optional[str] = None) -> List[RunResult]:
    """
    Train once per seed and write ``<stem>.csv`` / ``.json`` / ``_trace.csv``.

    Seeds run sequentially. Results are flushed after each seed, and the
    completed seeds are flushed again before any error propagates.
    """
    trainers = trainers or TRAINERS
    if experiment.algorithm not in trainers:
        raise ConfigError(f"unknown algorithm '{experiment.algorithm}'")
    trainer = trainers[experiment.algorithm]
    data_loader = data_loader or load_data
    monitor_factory = monitor_factory or _monitor_for
    out = Path(out_dir or experiment.output_dir or env_config.BENCH_OUTPUT_DIR)
    stem = stem or experiment.name or f"{experiment.algorithm}_{experiment.dataset}_{experiment.architecture}"

    flops = experiment_flops(experiment)
    digest = fingerprint(experiment)
    logger.info(f"🚀 {stem}: seeds {experiment.seeds}, F_fwd={flops.f_fwd_gflops:.5f} GFLOPs, "
                f"fingerprint {digest[:12]}")

    results: List[RunResult] = []
    try:
        for seed in experiment.seeds:
            data = data_loader(experiment, seed)
            with monitor_factory(experiment) as monitor:
                result = trainer(experiment, data, seed)
            report = monitor.report
            result.wall_time_s = report.wall_time_s
            result.peak_mem_mib = report.peak_memory_mib
            result.energy_wh = report.energy_wh
            result.co2e_g = report.co2e_g
            result.f_fwd_gflops = flops.f_fwd_gflops
            result.f_bp_update_gflops = flops.f_bp_update_gflops if experiment.algorithm == 'bp' else None
            result.fingerprint = digest
            results.append(result)
            logger.info(f"✅ seed {seed}: test_acc={result.test_acc:.2f}% epochs={result.effective_epochs} "
                        f"time={result.wall_time_s:.1f}s")
            write_results(results, out, stem, include_summary=False, include_trace=False)
    except BaseException:
        if results:
            logger.error(f"Run aborted after {len(results)} seed(s); partial results kept in {out}")
            write_results(results, out, stem, include_summary=False)
        raise

    write_results(results, out, stem)
    return results


# ============================================================================
# REPORTS
# ============================================================================

REPORT_METRICS = {
    'delta_acc_pp': 'test_acc',
    'delta_time_pct': 'wall_time_s',
    'delta_energy_pct': 'energy_wh',
    'delta_mem_pct': 'peak_mem_mib',
}
MATCH_COLUMNS = ['dataset', 'arch']


def _mean_rows(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-group means: recomputed from per-seed rows, or the file's own mean rows if that is all it has."""
    seeds = frame['seed'].astype(str)
    per_seed = frame[~seeds.isin(['mean', 'std'])]
    metrics = list(REPORT_METRICS.values())
    if per_seed.empty:
        rows = frame[seeds == 'mean'].copy()
    else:
        numeric = per_seed.copy()
        numeric[metrics] = numeric[metrics].apply(pd.to_numeric, errors='coerce')
        rows = numeric.groupby(GROUP_COLUMNS, sort=False, dropna=False)[metrics].mean().reset_index()
    rows[metrics] = rows[metrics].apply(pd.to_numeric, errors='coerce')
    return rows.reset_index(drop=True)


def _relative(alt: float, base: float) -> float:
    if base is None or alt is None or math.isnan(base) or math.isnan(alt) or base == 0:
        return float('nan')
    return 100.0 * (alt - base) / base


def compare_report(baseline_csv: Union[str, Path], alternative_csv: Union[str, Path],
                   out_csv: Optional[Union[str, Path]] = None) -> pd.DataFrame:
    """
    Delta table of each alternative (algo, variant, dataset, arch) against the
    baseline row with the same dataset and architecture: accuracy in percentage
    points, time/energy/memory in percent of the baseline.
    """
    base = _mean_rows(read_results_csv(baseline_csv))
    alt = _mean_rows(read_results_csv(alternative_csv))
    rows = []
    for _, a in alt.iterrows():
        match = base[(base['dataset'] == a['dataset']) & (base['arch'] == a['arch'])]
        if match.empty:
            raise ReportError(f"no baseline row for {a['dataset']}/{a['arch']} in {baseline_csv}")
        if len(match) > 1:
            raise ReportError(f"ambiguous baseline rows for {a['dataset']}/{a['arch']} in {baseline_csv}")
        b = match.iloc[0]
        row = {'algo': a['algo'], 'variant': a['variant'], 'dataset': a['dataset'], 'arch': a['arch']}
        row['delta_acc_pp'] = a['test_acc'] - b['test_acc']
        for column in ('delta_time_pct', 'delta_energy_pct', 'delta_mem_pct'):
            metric = REPORT_METRICS[column]
            row[column] = _relative(a[metric], b[metric])
        rows.append(row)
    report = pd.DataFrame(rows, columns=['algo', 'variant', 'dataset', 'arch', *REPORT_METRICS])
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_csv, index=False)
        logger.info(f"💾 Wrote delta report to {out_csv}")
    return report


# ============================================================================
# TUNING
# ============================================================================

@dataclass
class TrialRecord:
    index: int
    params: Dict[str, Any]
    val_acc: float
    effective_epochs: int


@dataclass
class TuneResult:
    best_params: Dict[str, Any]
    best_val_acc: float
    trials: List[TrialRecord] = field(default_factory=list)


def sample_params(space: Dict[str, tuple], rng: RngStream) -> Dict[str, Any]:
    params = {}
    for name in sorted(space):
        kind, low, high = space[name]
        if low > high:
            raise ConfigError(f"{name}: empty range ({low}, {high})")
        if kind == 'log_uniform':
            if low <= 0:
                raise ConfigError(f"{name}: log-uniform bounds must be positive")
            params[name] = low if low == high else float(math.exp(rng.uniform(math.log(low), math.log(high))))
        elif kind == 'int_uniform':
            params[name] = int(rng.integers(int(low), int(high) + 1))
        else:
            raise ConfigError(f"{name}: unknown distribution '{kind}'")
    return params


def random_search_tune(experiment: ExperimentConfig, space: Optional[Dict[str, tuple]] = None,
                       trials: int = 10, seed: int = 0, epoch_budget: Optional[int] = None,
                       trainer: Optional[Trainer] = None, data: Optional[DataBundle] = None) -> TuneResult:
    """
    Seeded random search; each trial trains once on ``seed`` with epochs capped
    at ``epoch_budget``. Best is the highest validation accuracy, earliest on ties.
    """
    space = get_search_space(experiment.algorithm) if space is None else space
    if not space:
        raise ConfigError("search space is empty")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    unknown = set(space) - set(type(experiment.hyperparameters).model_fields)
    if unknown:
        raise ConfigError(f"search space names unknown hyperparameters {sorted(unknown)}")
    trainer = trainer or TRAINERS[experiment.algorithm]
    data = data if data is not None else load_data(experiment, seed)
    rng = RngStream('search', seed)

    records: List[TrialRecord] = []
    best: Optional[TrialRecord] = None
    for t in range(trials):
        params = sample_params(space, rng)
        update = dict(params)
        if epoch_budget is not None:
            for name in EPOCH_BUDGET_FIELDS:
                if name in type(experiment.hyperparameters).model_fields and name not in params:
                    update[name] = min(getattr(experiment.hyperparameters, name), epoch_budget)
        hp = experiment.hyperparameters.model_copy(update=update)
        trial = experiment.model_copy(update={'hyperparameters': hp})
        result = trainer(trial, data, seed)
        val_acc = float(result.val_acc if result.val_acc is not None else float('nan'))
        record = TrialRecord(t, params, val_acc, result.effective_epochs)
        records.append(record)
        logger.info(f"🔎 trial {t + 1}/{trials}: val_acc={val_acc:.2f}% {params}")
        if best is None or val_acc > best.val_acc:
            best = record

    logger.info(f"🏆 best trial {best.index + 1}: val_acc={best.val_acc:.2f}% {best.params}")
    return TuneResult(dict(best.params), best.val_acc, records)
