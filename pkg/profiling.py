"""
Profiling: FLOPs, wall clock, peak memory, energy and CO2e
==========================================================

FLOPs are closed-form counts over the inference path of a catalog model
(2 FLOPs per multiply-accumulate). Resource figures come from concurrent
samplers started around the effective training window:

- ``MemoryMonitor`` tracks the process resident-set high-water via psutil
- ``PowerSampler`` polls an energy meter and integrates Watts over time
- ``ResourceMonitor`` wraps both plus the wall clock in one context manager

Meters:
- ``null``: no measurement; energy is reported as unavailable
- ``file-poll``: reads one decimal Watts value from a file per sample
- ``external-command``: runs a command whose last output line is Watts
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

try:
    import psutil
except ImportError:
    psutil = None

from config import ENERGY_SOURCES, config
from datasets import DatasetMeta
from errors import ConfigError, MeterError, UnknownSpecError
from model_specs import CNNSpec, MLPSpec, ModelSpec, cnn_block_flat_dims, cnn_block_shapes, require_valid

logger = logging.getLogger(__name__)

FLOPS_PER_MAC = 2
BP_UPDATE_FACTOR = 3
ALGORITHMS = ('bp', 'ff', 'cafo', 'mf')
MIB = 1024 * 1024


# ============================================================================
# FLOPS
# ============================================================================

@dataclass
class FlopsReport:
    """Per-sample GFLOPs. ``stages`` lists (stage name, GFLOPs) and sums to ``f_fwd_gflops``."""
    algorithm: str
    arch: str
    dataset: str
    stages: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def f_fwd_gflops(self) -> float:
        return sum(g for _, g in self.stages)

    @property
    def f_bp_update_gflops(self) -> float:
        return BP_UPDATE_FACTOR * self.f_fwd_gflops


def _gflops(macs: int) -> float:
    return FLOPS_PER_MAC * macs / 1e9


def _dense_stages(spec: MLPSpec) -> List[Tuple[str, float]]:
    return [(f'layer{i + 1}', _gflops(n_in * n_out)) for i, (n_in, n_out) in enumerate(spec.layer_dims())]


def _conv_stages(spec: CNNSpec) -> List[Tuple[str, float]]:
    """3x3 same-padding convs counted at their input resolution: O*C*9*H*W MACs."""
    stages = []
    c_in, h, w = spec.input_shape
    k2 = spec.kernel_size * spec.kernel_size
    for i, (c_out, h_next, w_next) in enumerate(cnn_block_shapes(spec)):
        stages.append((f'block{i + 1}', _gflops(c_out * c_in * k2 * h * w)))
        c_in, h, w = c_out, h_next, w_next
    return stages


def estimate_forward_flops(spec: ModelSpec, algorithm: str, meta: DatasetMeta) -> FlopsReport:
    """
    Per-sample forward FLOPs of the inference path.

    - bp: hidden layers (or conv blocks) plus the classification head
    - ff: hidden layers only (the label rides in the input)
    - mf: hidden layers plus the last layer's projection matrix
    - cafo: conv blocks plus all three predictors
    """
    if algorithm not in ALGORITHMS:
        raise UnknownSpecError(f"unknown algorithm '{algorithm}', expected one of {ALGORITHMS}")
    require_valid(spec)
    report = FlopsReport(algorithm, spec.name, meta.name)
    c = meta.num_classes

    if isinstance(spec, CNNSpec):
        if algorithm not in ('bp', 'cafo'):
            raise UnknownSpecError(f"{algorithm} does not run on {spec.name}")
        report.stages.extend(_conv_stages(spec))
        flat = cnn_block_flat_dims(spec)
        if algorithm == 'cafo':
            report.stages.extend((f'predictor{k + 1}', _gflops(d * c)) for k, d in enumerate(flat))
        else:
            report.stages.append(('head', _gflops(flat[-1] * c)))
        return report

    if algorithm == 'cafo':
        raise UnknownSpecError(f"cafo runs on the 3-block CNN, got {spec.name}")
    report.stages.extend(_dense_stages(spec))
    last = spec.hidden[-1]
    if algorithm == 'bp':
        report.stages.append(('head', _gflops(last * c)))
    elif algorithm == 'mf':
        report.stages.append(('projection', _gflops(last * c)))
    return report


def estimate_bp_update_flops(spec: ModelSpec, meta: DatasetMeta) -> float:
    """Per-sample GFLOPs of one BP update: forward, input-gradient and weight-gradient passes."""
    return estimate_forward_flops(spec, 'bp', meta).f_bp_update_gflops


# ============================================================================
# ENERGY
# ============================================================================

class EnergySample(NamedTuple):
    t: float
    watts: float


@dataclass
class EnergyReport:
    source: str
    samples: List[EnergySample] = field(default_factory=list)
    energy_wh: Optional[float] = None


def integrate_energy(samples: Sequence[Union[EnergySample, Tuple[float, float]]]) -> float:
    """Trapezoidal integral of (seconds, Watts) samples, in Wh."""
    if len(samples) < 2:
        raise MeterError(f"energy integration needs at least 2 samples, got {len(samples)}")
    joules = 0.0
    for (t0, p0), (t1, p1) in zip(samples, samples[1:]):
        if t1 < t0:
            raise MeterError(f"energy samples out of order: {t1} after {t0}")
        if p0 < 0 or p1 < 0:
            raise MeterError("negative power sample")
        joules += 0.5 * (p0 + p1) * (t1 - t0)
    return joules / 3600.0


def estimate_co2e(energy_wh: float, intensity_g_per_kwh: float) -> float:
    if intensity_g_per_kwh < 0:
        raise ConfigError(f"grid intensity must be non-negative, got {intensity_g_per_kwh}")
    return energy_wh * intensity_g_per_kwh / 1000.0


class NullMeter:
    source = 'null'

    def read_watts(self) -> Optional[float]:
        return None


class FilePollMeter:
    """Reads one decimal Watts value from ``path`` per sample."""
    source = 'file-poll'

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        if not self.path.is_file():
            raise MeterError(f"power file not found: {self.path}")

    def read_watts(self) -> float:
        text = self.path.read_text(encoding='utf-8').strip()
        try:
            return float(text)
        except ValueError:
            raise MeterError(f"{self.path}: not a Watts value: {text[:40]!r}")


class CommandMeter:
    """Runs ``command`` per sample; the last non-empty output line is the Watts value."""
    source = 'external-command'

    def __init__(self, command: str, timeout: float = 5.0):
        self.argv = shlex.split(command)
        if not self.argv:
            raise MeterError("empty power command")
        self.timeout = timeout

    def read_watts(self) -> float:
        try:
            proc = subprocess.run(self.argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise MeterError(f"power command failed: {e}")
        if proc.returncode != 0:
            raise MeterError(f"power command exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        try:
            return float(lines[-1])
        except (IndexError, ValueError):
            raise MeterError(f"power command printed no Watts value: {proc.stdout[:80]!r}")


def make_meter(source: Optional[str] = None, power_file: Optional[str] = None,
               power_command: Optional[str] = None):
    """Meter for ``source``; unset arguments come from the environment configuration."""
    source = source or config.BENCH_ENERGY_SOURCE
    if source not in ENERGY_SOURCES:
        raise ConfigError(f"energy source must be one of {ENERGY_SOURCES}, got '{source}'")
    if source == 'file-poll':
        path = power_file or config.BENCH_POWER_FILE
        if not path:
            raise ConfigError("file-poll energy source needs BENCH_POWER_FILE")
        return FilePollMeter(path)
    if source == 'external-command':
        command = power_command or config.BENCH_POWER_COMMAND
        if not command:
            raise ConfigError("external-command energy source needs BENCH_POWER_COMMAND")
        return CommandMeter(command)
    return NullMeter()


class _Sampler:
    """Background thread calling ``_sample`` every ``interval_s`` until stopped."""

    def __init__(self, interval_s: float, name: str):
        self.interval_s = interval_s
        self._stop = threading.Event()
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)

    def _sample(self) -> None:
        raise NotImplementedError

    def _run(self) -> None:
        while not self._stop.wait(self.interval_s):
            self._sample()

    def start(self) -> None:
        self._sample()
        self._thread.start()

    def _join(self) -> None:
        self._stop.set()
        if self._thread.is_alive():
            self._thread.join()
        self._sample()


class PowerSampler(_Sampler):
    def __init__(self, meter, interval_s: float = 0.5):
        super().__init__(interval_s, 'power-sampler')
        self.meter = meter
        self.samples: List[EnergySample] = []
        self.errors = 0

    def _sample(self) -> None:
        try:
            watts = self.meter.read_watts()
        except MeterError as e:
            self.errors += 1
            if self.errors == 1:
                logger.warning(f"⚠️ Power reading failed: {e}")
            return
        if watts is not None:
            with self._lock:
                self.samples.append(EnergySample(time.monotonic(), watts))

    def stop(self) -> EnergyReport:
        self._join()
        with self._lock:
            samples = list(self.samples)
        energy = integrate_energy(samples) if len(samples) >= 2 else None
        if energy is None and self.meter.source != 'null':
            logger.warning(f"⚠️ Too few power samples ({len(samples)}) to integrate energy")
        return EnergyReport(self.meter.source, samples, energy)


class MemoryMonitor(_Sampler):
    """Resident-set high-water of this process, sampled every ``interval_ms``."""

    def __init__(self, interval_ms: Optional[int] = None):
        interval_ms = config.BENCH_MEMORY_INTERVAL_MS if interval_ms is None else interval_ms
        if interval_ms < 10:
            raise ConfigError(f"memory sampling interval must be >= 10 ms, got {interval_ms}")
        super().__init__(interval_ms / 1000.0, 'memory-monitor')
        self.available = psutil is not None
        self.peak_bytes = 0
        self._process = psutil.Process() if self.available else None
        if not self.available:
            logger.warning("⚠️ psutil not available, peak memory will not be reported")

    def _sample(self) -> None:
        if not self.available:
            return
        try:
            rss = self._process.memory_info().rss
        except (psutil.Error, OSError) as e:
            logger.warning(f"⚠️ Memory introspection failed, disabling: {e}")
            self.available = False
            return
        with self._lock:
            self.peak_bytes = max(self.peak_bytes, rss)

    def stop(self) -> Optional[float]:
        """Peak MiB, or None when memory introspection is unavailable."""
        self._join()
        if not self.available:
            return None
        return self.peak_bytes / MIB


@dataclass
class ResourceReport:
    wall_time_s: float = 0.0
    peak_memory_mib: Optional[float] = None
    energy_wh: Optional[float] = None
    co2e_g: Optional[float] = None
    energy_source: str = 'null'
    energy_samples: int = 0


class ResourceMonitor:
    """
    Context manager timing a block and sampling memory and power around it.

    with ResourceMonitor(meter=make_meter(), memory=True, intensity=400.0) as mon:
        train()
    mon.report.wall_time_s, mon.report.energy_wh, ...
    """

    def __init__(self, meter=None, memory: bool = True, intensity: Optional[float] = None,
                 memory_interval_ms: Optional[int] = None, power_interval_s: Optional[float] = None):
        self.meter = meter or NullMeter()
        self.intensity = intensity
        self.memory = MemoryMonitor(memory_interval_ms) if memory else None
        interval = power_interval_s if power_interval_s is not None else config.BENCH_POWER_INTERVAL_MS / 1000.0
        self.power = PowerSampler(self.meter, interval) if not isinstance(self.meter, NullMeter) else None
        self.report = ResourceReport(energy_source=self.meter.source)
        self._t0 = 0.0

    def __enter__(self) -> "ResourceMonitor":
        if self.memory is not None:
            self.memory.start()
        if self.power is not None:
            self.power.start()
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.report.wall_time_s = time.perf_counter() - self._t0
        if self.memory is not None:
            self.report.peak_memory_mib = self.memory.stop()
        if self.power is not None:
            energy = self.power.stop()
            self.report.energy_wh = energy.energy_wh
            self.report.energy_samples = len(energy.samples)
        if self.report.energy_wh is not None and self.intensity is not None:
            self.report.co2e_g = estimate_co2e(self.report.energy_wh, self.intensity)
        logger.debug(f"Resource report: {self.report}")
