import logging

import pytest

import setup_logs
from config import config


class TestConfig:
    def test_defaults(self, bench_env):
        bench_env(BENCH_DATA_DIR=None, BENCH_ENERGY_SOURCE=None, BENCH_GRID_INTENSITY=None,
                  BENCH_MEMORY_INTERVAL_MS=None, BENCH_FEATURE_CACHE_MIB=None, BENCH_LOG_LEVEL=None)
        assert config.BENCH_DATA_DIR == 'data'
        assert config.BENCH_ENERGY_SOURCE == 'null'
        assert config.BENCH_GRID_INTENSITY is None
        assert config.BENCH_MEMORY_INTERVAL_MS == 50
        assert config.BENCH_FEATURE_CACHE_MIB == 1024
        assert config.BENCH_LOG_LEVEL == 'INFO'

    def test_values_are_read(self, bench_env, tmp_path):
        bench_env(BENCH_DATA_DIR=str(tmp_path), BENCH_ENERGY_SOURCE='File-Poll', BENCH_GRID_INTENSITY='400',
                  BENCH_MEMORY_INTERVAL_MS='20', BENCH_LOG_LEVEL='debug')
        assert config.BENCH_DATA_DIR == str(tmp_path)
        assert config.BENCH_ENERGY_SOURCE == 'file-poll'
        assert config.BENCH_GRID_INTENSITY == 400.0
        assert config.BENCH_MEMORY_INTERVAL_MS == 20
        assert config.BENCH_LOG_LEVEL == 'DEBUG'

    @pytest.mark.parametrize('key,raw,expected', [
        ('BENCH_ENERGY_SOURCE', 'rapl', 'null'),
        ('BENCH_GRID_INTENSITY', '-5', None),
        ('BENCH_GRID_INTENSITY', 'lots', None),
        ('BENCH_MEMORY_INTERVAL_MS', '5', 50),
        ('BENCH_MEMORY_INTERVAL_MS', 'fast', 50),
        ('BENCH_POWER_INTERVAL_MS', '0', 500),
        ('BENCH_FEATURE_CACHE_MIB', '-1', 1024),
        ('BENCH_LOG_LEVEL', 'chatty', 'INFO'),
    ])
    def test_bad_values_fall_back(self, bench_env, key, raw, expected):
        bench_env(**{key: raw})
        assert getattr(config, key) == expected

    def test_cache_is_cleared(self, bench_env):
        bench_env(BENCH_OUTPUT_DIR='first')
        assert config.BENCH_OUTPUT_DIR == 'first'
        bench_env(BENCH_OUTPUT_DIR='second')
        assert config.BENCH_OUTPUT_DIR == 'second'

    def test_validate_energy_config(self, bench_env, tmp_path):
        bench_env(BENCH_ENERGY_SOURCE='null')
        assert config.validate_energy_config()
        bench_env(BENCH_ENERGY_SOURCE='file-poll', BENCH_POWER_FILE=str(tmp_path / 'missing'))
        assert not config.validate_energy_config()
        (tmp_path / 'watts').write_text('1')
        bench_env(BENCH_POWER_FILE=str(tmp_path / 'watts'))
        assert config.validate_energy_config()
        bench_env(BENCH_ENERGY_SOURCE='external-command', BENCH_POWER_COMMAND=None)
        assert not config.validate_energy_config()

    def test_validate_numeric_config(self, bench_env):
        bench_env(BENCH_MEMORY_INTERVAL_MS='25', BENCH_GRID_INTENSITY='300')
        assert config.validate_numeric_config()


class TestLogging:
    @pytest.fixture(autouse=True)
    def _restore_root(self):
        root = logging.getLogger()
        level = root.level
        yield
        for handler in list(setup_logs._configured_handlers):
            root.removeHandler(handler)
            handler.close()
        setup_logs._configured_handlers.clear()
        root.setLevel(level)

    def test_setup_creates_directory_and_files(self, tmp_path):
        logs = setup_logs.setup_logs_directory(tmp_path / 'logs', ('a.log', 'b.log'))
        assert logs.is_dir()
        assert (logs / 'a.log').is_file() and (logs / 'b.log').is_file()

    def test_configure_replaces_handlers(self, tmp_path):
        root = logging.getLogger()
        setup_logs.configure_logging('DEBUG', tmp_path)
        first = list(setup_logs._configured_handlers)
        setup_logs.configure_logging('WARNING', tmp_path)
        assert len(setup_logs._configured_handlers) == 2
        assert not any(h in root.handlers for h in first)
        assert root.level == logging.WARNING

    def test_messages_reach_the_file(self, tmp_path):
        setup_logs.configure_logging('INFO', tmp_path, 'bench.log')
        logging.getLogger('bench.test').info('hello from the benchmark')
        for handler in setup_logs._configured_handlers:
            handler.flush()
        assert 'hello from the benchmark' in (tmp_path / 'bench.log').read_text(encoding='utf-8')
