"""
Ladder Pulse Lab - Main Entry Point

Runs one experiment from the command line:

    python simulate.py sweep|grape|resilience|reduced --config configs/<file>.yaml --out results/

The simulation and optimization code lives in the 'app/' directory; this file
only sets up logging and hands over to the CLI.
"""

import logging
import sys

from app.ui.cli import main as cli_main
from app.utils.logging_handler import setup_logging


def main():
    setup_logging()
    logging.info("Ladder pulse lab starting.")
    code = cli_main()
    logging.info(f"Ladder pulse lab finished with exit code {code}.")
    return code


if __name__ == "__main__":
    sys.exit(main())
