"""
Command-line surface: simulate sweep|grape|resilience|reduced.
"""

import argparse
import logging

from app.app import ExperimentError, ExperimentRunner, ExperimentSpec
from app.config import DIR_CONFIG
from app.core import file_operations

COMMANDS = {
    "sweep": "disorder_sweep",
    "grape": "grape_table",
    "resilience": "resilience",
    "reduced": "reduced_time",
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Simulate and optimize global pulses on a driven ladder QPU.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS), help="Experiment to run.")
    parser.add_argument("--config", default=None, help="YAML experiment file (see docs/CONFIG_SCHEMA.md).")
    parser.add_argument("--out", default=DIR_CONFIG["output_dir"], help="Output directory.")
    parser.add_argument("--seed", type=int, default=None, help="Top-level seed; overrides the file.")
    parser.add_argument("--samples", type=int, default=None, help="Disorder realizations per point.")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for realizations.")
    return parser


def main(argv=None):
    """
    Parses arguments and runs one experiment.

    Returns:
        int: Process exit code; 0 on success, 1 on a failed run, 2 on bad input.
    """
    args = build_parser().parse_args(argv)
    logger = logging.getLogger(__name__)
    try:
        config = file_operations.load_experiment_config(args.config)
        spec = ExperimentSpec.from_config(config, kind=COMMANDS[args.command], seed=args.seed,
                                          n_samples=args.samples, threads=args.threads)
    except (FileNotFoundError, ValueError, ExperimentError) as e:
        logger.error(f"Invalid experiment setup: {e}")
        return 2
    try:
        ExperimentRunner(spec, args.out).run()
    except Exception as e:
        logger.error(f"Experiment '{spec.kind}' failed: {e}", exc_info=True)
        return 1
    return 0
