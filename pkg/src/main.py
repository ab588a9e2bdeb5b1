"""
AMOC Lab command line
Registers every command group and maps failures to exit codes
"""

import argparse
import sys

import structlog

from src.errors import AmocError, ConfigError
from src.extensions import configure_logging
from src.routes import evaluation, plots, training

log = structlog.get_logger()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser():
    parser = argparse.ArgumentParser(prog='amoc', description='Adversarial momentum-contrastive pre-training lab')
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True
    training.register(subparsers)
    evaluation.register(subparsers)
    plots.register(subparsers)
    return parser


def run_command(argv):
    """Run one subcommand; 0 on success, 2 on config or usage errors, 1 on runtime failures"""
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed usage
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    try:
        return args.handler(args)
    except ConfigError as e:
        log.error("config_error", command=args.command, error=str(e))
        return EXIT_CONFIG
    except AmocError as e:
        log.error("command_failed", command=args.command, error=str(e), kind=type(e).__name__)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as e:
        log.exception("command_crashed", command=args.command, error=str(e))
        return EXIT_RUNTIME


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == '__main__':
    main()
