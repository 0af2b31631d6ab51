"""
Benchmark Configuration Module
==============================

Centralized environment configuration for the local-learning benchmark. Handles
``.env`` loading, validation and defaults for everything that is not part of an
experiment YAML file (paths, logging, metering).

Environment Variables:
- BENCH_DATA_DIR: directory holding the raw dataset files (default: data)
- BENCH_OUTPUT_DIR: directory for result CSV/JSON files (default: results)
- BENCH_LOG_DIR / BENCH_LOG_LEVEL: logging destination and verbosity
- BENCH_ENERGY_SOURCE: null | file-poll | external-command
- BENCH_POWER_FILE / BENCH_POWER_COMMAND: inputs for the two real meters
- BENCH_GRID_INTENSITY: grid carbon intensity in g/kWh; CO2e is only emitted when set
- BENCH_MEMORY_INTERVAL_MS: memory sampling interval (minimum 10)
- BENCH_FEATURE_CACHE_MIB: ceiling for cached frozen-block features

Usage:
    from config import config
    data_dir = config.BENCH_DATA_DIR
    ok = config.validate_numeric_config()
"""

from dotenv import load_dotenv
load_dotenv()
import os
import time
import logging
from typing import Optional

logger = logging.getLogger(__name__)

ENERGY_SOURCES = ("null", "file-poll", "external-command")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Config:
    """
    Environment-backed settings with a short-lived cache so values stay
    consistent across one run while still picking up changes between runs.
    """

    def __init__(self, cache_duration: float = 30.0):
        self._cache = {}
        self._cache_timestamp = 0.0
        self._cache_duration = cache_duration

    def _get_cached_value(self, key: str, default=None):
        now = time.time()
        if now - self._cache_timestamp > self._cache_duration:
            self._cache.clear()
            self._cache_timestamp = now
        if key not in self._cache:
            self._cache[key] = os.environ.get(key, default)
        return self._cache[key]

    def clear_cache(self):
        """Drop cached values so the next access re-reads the environment."""
        self._cache.clear()
        self._cache_timestamp = 0.0

    # ============================================================================
    # PATHS
    # ============================================================================

    @property
    def BENCH_DATA_DIR(self) -> str:
        """Directory holding MNIST / Fashion-MNIST / CIFAR raw files."""
        return self._get_cached_value('BENCH_DATA_DIR', 'data')

    @property
    def BENCH_OUTPUT_DIR(self) -> str:
        return self._get_cached_value('BENCH_OUTPUT_DIR', 'results')

    @property
    def BENCH_LOG_DIR(self) -> str:
        return self._get_cached_value('BENCH_LOG_DIR', 'logs')

    # ============================================================================
    # LOGGING
    # ============================================================================

    @property
    def BENCH_LOG_LEVEL(self) -> str:
        level = str(self._get_cached_value('BENCH_LOG_LEVEL', 'INFO')).upper()
        if level not in LOG_LEVELS:
            logger.warning(f"BENCH_LOG_LEVEL {level} not recognised, using INFO")
            return 'INFO'
        return level

    # ============================================================================
    # METERING
    # ============================================================================

    @property
    def BENCH_ENERGY_SOURCE(self) -> str:
        """Energy meter backend; the null meter records no samples."""
        source = str(self._get_cached_value('BENCH_ENERGY_SOURCE', 'null')).lower()
        if source not in ENERGY_SOURCES:
            logger.warning(f"BENCH_ENERGY_SOURCE {source} not recognised, using null")
            return 'null'
        return source

    @property
    def BENCH_POWER_FILE(self) -> Optional[str]:
        value = self._get_cached_value('BENCH_POWER_FILE')
        return value.strip() if value else None

    @property
    def BENCH_POWER_COMMAND(self) -> Optional[str]:
        value = self._get_cached_value('BENCH_POWER_COMMAND')
        return value.strip() if value else None

    @property
    def BENCH_GRID_INTENSITY(self) -> Optional[float]:
        """Grid carbon intensity in g/kWh. No implicit default."""
        raw = self._get_cached_value('BENCH_GRID_INTENSITY')
        if raw is None or str(raw).strip() == '':
            return None
        try:
            val = float(raw)
            if val < 0:
                logger.warning(f"BENCH_GRID_INTENSITY {val} is negative, ignoring")
                return None
            return val
        except (ValueError, TypeError):
            logger.warning("Invalid BENCH_GRID_INTENSITY value, ignoring")
            return None

    @property
    def BENCH_MEMORY_INTERVAL_MS(self) -> int:
        try:
            val = int(self._get_cached_value('BENCH_MEMORY_INTERVAL_MS', '50'))
            if val < 10 or val > 60000:
                logger.warning(f"BENCH_MEMORY_INTERVAL_MS {val} out of range, using 50")
                return 50
            return val
        except (ValueError, TypeError):
            logger.warning("Invalid BENCH_MEMORY_INTERVAL_MS value, using 50")
            return 50

    @property
    def BENCH_POWER_INTERVAL_MS(self) -> int:
        try:
            val = int(self._get_cached_value('BENCH_POWER_INTERVAL_MS', '500'))
            if val < 10 or val > 60000:
                logger.warning(f"BENCH_POWER_INTERVAL_MS {val} out of range, using 500")
                return 500
            return val
        except (ValueError, TypeError):
            logger.warning("Invalid BENCH_POWER_INTERVAL_MS value, using 500")
            return 500

    @property
    def BENCH_FEATURE_CACHE_MIB(self) -> int:
        try:
            val = int(self._get_cached_value('BENCH_FEATURE_CACHE_MIB', '1024'))
            if val < 0:
                logger.warning(f"BENCH_FEATURE_CACHE_MIB {val} out of range, using 1024")
                return 1024
            return val
        except (ValueError, TypeError):
            logger.warning("Invalid BENCH_FEATURE_CACHE_MIB value, using 1024")
            return 1024

    # ============================================================================
    # CONFIGURATION VALIDATION METHODS
    # ============================================================================

    def validate_energy_config(self) -> bool:
        """
        Check that the selected energy source has the input it needs.

        Returns:
            bool: True if the meter can be constructed, False otherwise
        """
        source = self.BENCH_ENERGY_SOURCE
        if source == 'file-poll':
            return bool(self.BENCH_POWER_FILE) and os.path.isfile(self.BENCH_POWER_FILE)
        if source == 'external-command':
            return bool(self.BENCH_POWER_COMMAND)
        return True

    def validate_numeric_config(self) -> bool:
        try:
            if self.BENCH_MEMORY_INTERVAL_MS < 10:
                return False
            if self.BENCH_POWER_INTERVAL_MS < 10:
                return False
            if self.BENCH_FEATURE_CACHE_MIB < 0:
                return False
            intensity = self.BENCH_GRID_INTENSITY
            if intensity is not None and intensity < 0:
                return False
            return True
        except (ValueError, TypeError):
            return False

    # ============================================================================
    # CONFIGURATION SUMMARY AND DISPLAY
    # ============================================================================

    def print_config_summary(self):
        logger.info("📋 Configuration Summary:")
        logger.info(f"   Data: {self.BENCH_DATA_DIR}")
        logger.info(f"   Output: {self.BENCH_OUTPUT_DIR}")
        logger.info(f"   Logs: {self.BENCH_LOG_DIR} ({self.BENCH_LOG_LEVEL})")
        logger.info(f"   Energy: {self.BENCH_ENERGY_SOURCE} every {self.BENCH_POWER_INTERVAL_MS} ms")
        intensity = self.BENCH_GRID_INTENSITY
        logger.info(f"   Grid intensity: {intensity if intensity is not None else 'unset (no CO2e)'}")
        logger.info(f"   Memory sampling: {self.BENCH_MEMORY_INTERVAL_MS} ms")


config = Config()
