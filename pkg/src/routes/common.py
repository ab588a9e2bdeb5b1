"""
Shared Command Helpers for AMOC Lab
Handles the common flags, config resolution and output directories of every command
"""

import os

import structlog

from src.extensions import seed_override
from src.models.config import load_config
from src.services.checkpoint_service import load_checkpoint
from src.services.dataio_service import DatasetService

log = structlog.get_logger()

RESOLVED_CONFIG = 'resolved-config.toml'


def add_config_flags(parser, checkpoint=False, resume=False):
    parser.add_argument('--config', help='experiment TOML file')
    parser.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config value by dotted path (repeatable)')
    parser.add_argument('--out', help='output directory (defaults to experiment.out)')
    if checkpoint:
        parser.add_argument('--checkpoint', required=True, help='checkpoint file')
    if resume:
        parser.add_argument('--resume', help='checkpoint to resume from')
    return parser


def resolve_run(args):
    """Config with overrides applied, output directory created, resolved config written"""
    config = load_config(args.config, args.set, seed_override())
    out_dir = args.out or config.experiment.out
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RESOLVED_CONFIG), 'w') as handle:
        handle.write(config.to_toml())
    log.info("run_started", command=args.command, out=out_dir, fingerprint=config.fingerprint())
    return config, out_dir


def load_data(config):
    return DatasetService(config.data).load()


def open_checkpoint(args):
    return load_checkpoint(args.checkpoint)
