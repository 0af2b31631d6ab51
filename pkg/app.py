"""
LocalBench - Local-Learning Training Benchmark
==============================================

Command-line entry point for training runs, FLOPs estimates, delta reports,
random-search tuning and dataset verification.

Usage:
    python app.py run --config configs/mf_mnist_2x1000.yaml [--seed N] [--out DIR] [--data DIR]
    python app.py flops --config configs/cafo_rand_mnist.yaml
    python app.py report --baseline results/bp_mnist_2x1000.csv --alt results/mf_mnist_2x1000.csv
    python app.py tune --config configs/bp_mnist_2x1000.yaml --trials 10 [--budget 3]
    python app.py data verify --dataset mnist --data data/

Exit codes:
    0 success, 2 benchmark error (bad config, missing data, non-finite loss ...),
    1 unexpected failure

Environment Variables:
    BENCH_DATA_DIR, BENCH_OUTPUT_DIR, BENCH_LOG_DIR, BENCH_LOG_LEVEL,
    BENCH_ENERGY_SOURCE, BENCH_POWER_FILE, BENCH_POWER_COMMAND,
    BENCH_GRID_INTENSITY, BENCH_MEMORY_INTERVAL_MS, BENCH_FEATURE_CACHE_MIB
    See env.example for complete configuration
"""

import argparse
import logging
import sys
from typing import List, Optional

from config import config
from errors import BenchError
from setup_logs import configure_logging

logger = logging.getLogger(__name__)

VERSION = "1.0.0"


# ============================================================================
# DEPENDENCY VALIDATION
# ============================================================================

def validate_dependencies() -> bool:
    """
    Check the Python version, required packages and numeric environment values.

    Returns:
        True when everything needed for a run is present
    """
    if sys.version_info < (3, 9):
        logger.error("Python 3.9 or higher is required")
        return False

    # Package name mapping for correct import checking
    required_packages = {
        'numpy': 'numpy',
        'pandas': 'pandas',
        'pyyaml': 'yaml',
        'python-dotenv': 'dotenv',
        'pydantic': 'pydantic',
    }
    missing = []
    for package, import_name in required_packages.items():
        try:
            __import__(import_name)
        except ImportError:
            missing.append(package)
    if missing:
        logger.error(f"Missing required packages: {', '.join(missing)}")
        logger.error("Please install missing packages: pip install -r requirements.txt")
        return False

    if not config.validate_numeric_config():
        logger.error("Invalid numeric configuration")
        logger.error("Please check your environment variables")
        return False
    if not config.validate_energy_config():
        logger.error("Energy meter configuration is incomplete")
        return False
    return True


def print_banner(command: str) -> None:
    banner = f"""
    ┌──────────────────────────────────────────────┐
    │  LocalBench {VERSION:<8} local-learning benchmark │
    └──────────────────────────────────────────────┘"""
    print(banner)
    print(f"🧪 Command: {command}\n")


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_run(args) -> int:
    from harness import load_config, run_experiment

    overrides = {}
    if args.seed is not None:
        overrides['seeds'] = [args.seed]
    if args.data:
        overrides['data_dir'] = args.data
    experiment = load_config(args.config, overrides)
    results = run_experiment(experiment, out_dir=args.out)
    accs = ", ".join(f"{r.test_acc:.2f}%" for r in results)
    print(f"✅ {experiment.name}: {len(results)} run(s), test accuracy {accs}")
    return 0


def cmd_flops(args) -> int:
    from harness import experiment_flops, load_config

    experiment = load_config(args.config)
    report = experiment_flops(experiment)
    for stage, gflops in report.stages:
        print(f"   {stage:<12} {gflops:.6f}")
    print(f"📊 F_fwd = {report.f_fwd_gflops:.5f} GFLOPs/sample")
    if experiment.algorithm == 'bp':
        print(f"📊 F_BP_update = {report.f_bp_update_gflops:.5f} GFLOPs/sample")
    return 0


def cmd_report(args) -> int:
    from harness import compare_report

    table = compare_report(args.baseline, args.alt, args.out)
    print(table.to_string(index=False, float_format=lambda v: f"{v:+.2f}"))
    return 0


def cmd_tune(args) -> int:
    from harness import load_config, random_search_tune

    overrides = {'data_dir': args.data} if args.data else None
    experiment = load_config(args.config, overrides)
    result = random_search_tune(experiment, trials=args.trials, seed=args.seed, epoch_budget=args.budget)
    print(f"🏆 best validation accuracy {result.best_val_acc:.2f}%")
    for name, value in sorted(result.best_params.items()):
        print(f"   {name}: {value}")
    return 0


def cmd_data_verify(args) -> int:
    from datasets import verify_dataset

    report = verify_dataset(args.dataset, args.data or config.BENCH_DATA_DIR)
    if report.ok:
        print(f"✅ {report.dataset}: {report.counts}")
        return 0
    for problem in report.problems:
        print(f"❌ {problem}")
    return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='localbench', description="Local-learning training benchmark")
    parser.add_argument('--log-level', default=None, help="override BENCH_LOG_LEVEL")
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help="train every seed of an experiment file")
    run.add_argument('--config', required=True)
    run.add_argument('--seed', type=int, default=None, help="run this seed only")
    run.add_argument('--out', default=None, help="results directory")
    run.add_argument('--data', default=None, help="dataset directory")
    run.set_defaults(func=cmd_run)

    flops = sub.add_parser('flops', help="per-sample GFLOPs of an experiment's model")
    flops.add_argument('--config', required=True)
    flops.set_defaults(func=cmd_flops)

    report = sub.add_parser('report', help="delta table of an alternative against its BP baseline")
    report.add_argument('--baseline', required=True)
    report.add_argument('--alt', required=True)
    report.add_argument('--out', default=None, help="write the table to this CSV")
    report.set_defaults(func=cmd_report)

    tune = sub.add_parser('tune', help="random search over the algorithm's search space")
    tune.add_argument('--config', required=True)
    tune.add_argument('--trials', type=int, default=10)
    tune.add_argument('--seed', type=int, default=0)
    tune.add_argument('--budget', type=int, default=None, help="epoch cap per trial")
    tune.add_argument('--data', default=None)
    tune.set_defaults(func=cmd_tune)

    data = sub.add_parser('data', help="dataset utilities")
    data_sub = data.add_subparsers(dest='data_command', required=True)
    verify = data_sub.add_parser('verify', help="check dataset files, sizes and checksums")
    verify.add_argument('--dataset', required=True)
    verify.add_argument('--data', default=None)
    verify.set_defaults(func=cmd_data_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    command = args.command if args.command != 'data' else f"data {args.data_command}"
    print_banner(command)
    if not validate_dependencies():
        return 2
    config.print_config_summary()
    try:
        return args.func(args)
    except BenchError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return 2
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 1
    except Exception as e:
        logger.error(f"Unhandled exception: {type(e).__name__}: {e}", exc_info=True)
        return 1


if __name__ == '__main__':
    sys.exit(main())
