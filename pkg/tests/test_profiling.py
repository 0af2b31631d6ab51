import sys
import time

import numpy as np
import pytest

from datasets import get_meta
from errors import ConfigError, MeterError, UnknownSpecError
from model_specs import CNNSpec, MLPSpec, parse_architecture
from profiling import (
    CommandMeter,
    EnergySample,
    FilePollMeter,
    MemoryMonitor,
    NullMeter,
    ResourceMonitor,
    estimate_bp_update_flops,
    estimate_co2e,
    estimate_forward_flops,
    integrate_energy,
    make_meter,
)


def _flops(algorithm, arch, dataset):
    meta = get_meta(dataset)
    spec = parse_architecture(arch, meta, final_head=algorithm == 'bp')
    return estimate_forward_flops(spec, algorithm, meta)


class TestFlops:
    @pytest.mark.parametrize('algorithm,arch,dataset,expected', [
        ('mf', '2x1000', 'mnist', 0.003588),
        ('bp', '2x1000', 'mnist', 0.003588),
        ('mf', '3x2000', 'cifar10', 0.028328),
        ('mf', '3x2000', 'cifar100', 0.028688),
        ('ff', '4x2000', 'mnist', 0.027136),
        ('cafo', 'cnn', 'mnist', 0.073048),
        ('cafo', 'cnn', 'cifar10', 0.096633),
    ])
    def test_forward(self, algorithm, arch, dataset, expected):
        assert _flops(algorithm, arch, dataset).f_fwd_gflops == pytest.approx(expected, rel=1e-4)

    def test_ff_3x1000_rounds_to_reference(self):
        assert round(_flops('ff', '3x1000', 'mnist').f_fwd_gflops, 3) == 0.006

    @pytest.mark.parametrize('arch,dataset,expected', [
        ('2x1000', 'mnist', 0.010764),
        ('3x2000', 'cifar10', 0.084984),
        ('3x2000', 'cifar100', 0.086064),
        ('3x1000', 'mnist', 0.016764),
        ('4x2000', 'mnist', 0.081528),
        ('cnn', 'mnist', 0.21839),
        ('cnn', 'cifar10', 0.288916),
    ])
    def test_bp_update(self, arch, dataset, expected):
        meta = get_meta(dataset)
        assert estimate_bp_update_flops(parse_architecture(arch, meta), meta) == pytest.approx(expected, rel=1e-4)

    def test_update_is_three_forwards(self):
        report = _flops('bp', '2x1000', 'mnist')
        assert report.f_bp_update_gflops == pytest.approx(3 * report.f_fwd_gflops)

    def test_stages_sum_to_total(self):
        report = _flops('cafo', 'cnn', 'mnist')
        assert [name for name, _ in report.stages] == [
            'block1', 'block2', 'block3', 'predictor1', 'predictor2', 'predictor3']
        assert sum(g for _, g in report.stages) == pytest.approx(report.f_fwd_gflops)

    def test_ff_counts_hidden_layers_only(self):
        mf = _flops('mf', '2x1000', 'mnist')
        ff = estimate_forward_flops(MLPSpec(784, (1000, 1000), 10, False), 'ff', get_meta('mnist'))
        assert mf.f_fwd_gflops - ff.f_fwd_gflops == pytest.approx(2 * 1000 * 10 / 1e9)

    def test_errors(self):
        meta = get_meta('mnist')
        with pytest.raises(UnknownSpecError):
            estimate_forward_flops(MLPSpec(784, (1000, 1000), 10), 'hebbian', meta)
        with pytest.raises(UnknownSpecError):
            estimate_forward_flops(CNNSpec((1, 28, 28), 10), 'mf', meta)
        with pytest.raises(UnknownSpecError):
            estimate_forward_flops(MLPSpec(784, (1000, 1000), 10), 'cafo', meta)
        with pytest.raises(UnknownSpecError):
            estimate_forward_flops(MLPSpec(784, (10, 10), 10), 'bp', meta)


class TestEnergy:
    def test_constant_power_for_an_hour(self):
        assert integrate_energy([(0.0, 100.0), (3600.0, 100.0)]) == pytest.approx(100.0)

    def test_linear_ramp(self):
        assert integrate_energy([EnergySample(0.0, 0.0), EnergySample(10.0, 360.0)]) == pytest.approx(0.5)

    def test_uneven_spacing(self):
        samples = [(0.0, 10.0), (1.0, 20.0), (4.0, 20.0)]
        assert integrate_energy(samples) == pytest.approx((15.0 + 60.0) / 3600.0)

    @pytest.mark.parametrize('samples', [
        [(0.0, 5.0)],
        [(2.0, 5.0), (1.0, 5.0)],
        [(0.0, 5.0), (1.0, -1.0)],
    ])
    def test_invalid_samples(self, samples):
        with pytest.raises(MeterError):
            integrate_energy(samples)

    def test_co2e(self):
        assert estimate_co2e(3.17, 400.0) == pytest.approx(1.268)
        with pytest.raises(ConfigError):
            estimate_co2e(1.0, -1.0)


class TestMeters:
    def test_file_meter(self, tmp_path):
        path = tmp_path / 'watts'
        path.write_text('42.5\n')
        assert FilePollMeter(path).read_watts() == 42.5
        path.write_text('n/a')
        with pytest.raises(MeterError):
            FilePollMeter(path).read_watts()
        with pytest.raises(MeterError):
            FilePollMeter(tmp_path / 'missing')

    def test_command_meter(self):
        cmd = f'{sys.executable} -c "print(\'noise\'); print(42.5)"'
        assert CommandMeter(cmd).read_watts() == 42.5

    def test_command_meter_failures(self):
        with pytest.raises(MeterError):
            CommandMeter(f'{sys.executable} -c "import sys; sys.exit(3)"').read_watts()
        with pytest.raises(MeterError):
            CommandMeter(f'{sys.executable} -c "print(\'watts\')"').read_watts()
        with pytest.raises(MeterError):
            CommandMeter('')

    def test_make_meter_from_environment(self, tmp_path, bench_env):
        path = tmp_path / 'watts'
        path.write_text('10')
        bench_env(BENCH_ENERGY_SOURCE='file-poll', BENCH_POWER_FILE=str(path))
        meter = make_meter()
        assert isinstance(meter, FilePollMeter) and meter.read_watts() == 10.0

    def test_make_meter_errors(self, bench_env):
        bench_env(BENCH_POWER_FILE=None, BENCH_POWER_COMMAND=None)
        assert isinstance(make_meter('null'), NullMeter)
        with pytest.raises(ConfigError):
            make_meter('rapl')
        with pytest.raises(ConfigError):
            make_meter('file-poll')
        with pytest.raises(ConfigError):
            make_meter('external-command')


class TestMonitors:
    def test_memory_peak_sees_allocation(self):
        pytest.importorskip('psutil')
        monitor = MemoryMonitor(10)
        monitor.start()
        baseline = monitor.peak_bytes / (1024 * 1024)
        block = np.ones(100 * 1024 * 1024 // 8)
        time.sleep(0.05)
        peak = monitor.stop()
        assert block[-1] == 1.0
        assert peak - baseline >= 99.0

    def test_memory_interval_floor(self):
        with pytest.raises(ConfigError):
            MemoryMonitor(5)

    def test_resource_monitor_with_file_meter(self, tmp_path):
        path = tmp_path / 'watts'
        path.write_text('50')
        with ResourceMonitor(FilePollMeter(path), memory=False, intensity=400.0, power_interval_s=0.01) as mon:
            time.sleep(0.2)
        report = mon.report
        assert report.energy_source == 'file-poll'
        assert report.energy_samples >= 2
        assert report.energy_wh == pytest.approx(50.0 * report.wall_time_s / 3600.0, rel=0.5)
        assert report.co2e_g == pytest.approx(report.energy_wh * 0.4)
        assert report.peak_memory_mib is None

    def test_resource_monitor_with_null_meter(self):
        with ResourceMonitor(NullMeter(), memory=False, intensity=400.0) as mon:
            time.sleep(0.01)
        assert mon.report.wall_time_s > 0
        assert mon.report.energy_wh is None and mon.report.co2e_g is None
        assert mon.report.energy_source == 'null'
