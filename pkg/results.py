"""
Run results and result files.

One ``RunResult`` per (config, seed). Rows go to CSV with a fixed leading
column set, to JSON with the per-epoch trace, and optionally to a long-format
trace CSV for plotting. Summary rows (``seed`` = mean / std) are appended per
(algo, variant, dataset, arch) group.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import ReportError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

CSV_COLUMNS = [
    'algo', 'dataset', 'arch', 'seed', 'test_acc', 'effective_epochs', 'wall_time_s',
    'energy_wh', 'co2e_g', 'peak_mem_mib', 'f_fwd_gflops', 'f_bp_update_gflops',
]
EXTRA_COLUMNS = ['variant', 'val_acc', 'fingerprint', 'schema_version']
METRIC_COLUMNS = ['test_acc', 'effective_epochs', 'wall_time_s', 'energy_wh', 'co2e_g',
                  'peak_mem_mib', 'f_fwd_gflops', 'f_bp_update_gflops', 'val_acc']
GROUP_COLUMNS = ['algo', 'variant', 'dataset', 'arch']


@dataclass
class EpochRecord:
    """One epoch of one training phase (``global``, ``layer1``, ``predictor2``, ``dfa`` ...)."""
    phase: str
    epoch: int
    train_loss: float
    val_loss: Optional[float] = None
    val_acc: Optional[float] = None
    extra: Dict[str, float] = field(default_factory=dict)


@dataclass
class RunResult:
    algo: str
    dataset: str
    arch: str
    seed: int
    test_acc: float
    effective_epochs: int
    wall_time_s: Optional[float] = None
    energy_wh: Optional[float] = None
    co2e_g: Optional[float] = None
    peak_mem_mib: Optional[float] = None
    f_fwd_gflops: Optional[float] = None
    f_bp_update_gflops: Optional[float] = None
    variant: str = ''
    val_acc: Optional[float] = None
    fingerprint: str = ''
    trace: List[EpochRecord] = field(default_factory=list)
    extras: Dict[str, Any] = field(default_factory=dict)

    def row(self) -> Dict[str, Any]:
        data = {c: getattr(self, c) for c in CSV_COLUMNS}
        data.update(variant=self.variant, val_acc=self.val_acc, fingerprint=self.fingerprint,
                    schema_version=SCHEMA_VERSION)
        return data

    def to_json(self) -> Dict[str, Any]:
        """JSON record; unmeasured metrics are left out rather than written as null."""
        data = {k: v for k, v in self.row().items() if v is not None}
        data['trace'] = [asdict(r) for r in self.trace]
        data['extras'] = self.extras
        return data


def results_frame(results: Sequence[RunResult]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in results], columns=CSV_COLUMNS + EXTRA_COLUMNS)


def summarize(results: Sequence[RunResult]) -> pd.DataFrame:
    """Mean and sample std over seeds for each (algo, variant, dataset, arch)."""
    frame = results_frame(results)
    rows = []
    for keys, group in frame.groupby(GROUP_COLUMNS, sort=False, dropna=False):
        base = dict(zip(GROUP_COLUMNS, keys))
        numeric = group[METRIC_COLUMNS].apply(pd.to_numeric, errors='coerce')
        for stat in ('mean', 'std'):
            values = numeric.mean() if stat == 'mean' else numeric.std()
            row = {**base, 'seed': stat, 'schema_version': SCHEMA_VERSION,
                   'fingerprint': group['fingerprint'].iloc[0]}
            row.update({c: (None if pd.isna(v) else float(v)) for c, v in values.items()})
            rows.append(row)
    return pd.DataFrame(rows, columns=CSV_COLUMNS + EXTRA_COLUMNS)


def trace_frame(results: Sequence[RunResult]) -> pd.DataFrame:
    rows = []
    for r in results:
        for rec in r.trace:
            row = {'algo': r.algo, 'variant': r.variant, 'dataset': r.dataset, 'arch': r.arch,
                   'seed': r.seed, 'phase': rec.phase, 'epoch': rec.epoch, 'train_loss': rec.train_loss,
                   'val_loss': rec.val_loss, 'val_acc': rec.val_acc}
            row.update(rec.extra)
            rows.append(row)
    return pd.DataFrame(rows)


def write_results(results: Sequence[RunResult], out_dir: Union[str, Path], stem: str,
                  include_summary: bool = True, include_trace: bool = True) -> Dict[str, Path]:
    """Write ``<stem>.csv``, ``<stem>.json`` and ``<stem>_trace.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {'csv': out / f"{stem}.csv", 'json': out / f"{stem}.json"}

    frame = results_frame(results)
    if include_summary and len(results):
        frame = pd.concat([frame, summarize(results)], ignore_index=True)
    frame.to_csv(paths['csv'], index=False)

    payload = {'schema_version': SCHEMA_VERSION, 'runs': [r.to_json() for r in results]}
    paths['json'].write_text(json.dumps(json_safe(payload), indent=2, allow_nan=False), encoding='utf-8')

    if include_trace:
        paths['trace'] = out / f"{stem}_trace.csv"
        trace_frame(results).to_csv(paths['trace'], index=False)
    logger.info(f"💾 Wrote {len(results)} run(s) to {paths['csv']}")
    return paths


def json_safe(value):
    """Plain-Python copy of ``value`` with numpy scalars unwrapped and NaN / inf mapped to None."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return json_safe(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def read_results_csv(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ReportError(f"results file not found: {path}")
    frame = pd.read_csv(path, dtype={'seed': str})
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise ReportError(f"{path}: missing columns {missing}")
    if 'schema_version' in frame.columns:
        versions = set(frame['schema_version'].dropna().astype(int))
        if versions - {SCHEMA_VERSION}:
            raise ReportError(f"{path}: unsupported schema version(s) {sorted(versions)}")
    if 'variant' not in frame.columns:
        frame['variant'] = ''
    frame['variant'] = frame['variant'].fillna('')
    return frame
