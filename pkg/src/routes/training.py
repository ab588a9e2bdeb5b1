"""
Training Commands for AMOC Lab
Handles pretrain, finetune and sensitivity sweep runs
"""

import json
import os

import structlog

from src.errors import ConfigError
from src.models.config import parse_override
from src.routes.common import add_config_flags, load_data, open_checkpoint, resolve_run
from src.services.checkpoint_service import load_checkpoint, save_checkpoint
from src.services.sweep_service import sensitivity_sweep
from src.services.training_service import (
    CHECKPOINT_FILE, capture_classifier, finetune, pretrain, supervised_accuracy, train_supervised,
)

log = structlog.get_logger()


def run_pretrain(args):
    """Adversarial momentum-contrastive pre-training"""
    config, out_dir = resolve_run(args)
    train, _ = load_data(config)
    resume = load_checkpoint(args.resume) if args.resume else None
    service, _ = pretrain(config, train, out_dir, resume)
    log.info("pretrain_finished", epochs=service.epoch, steps=service.step,
             checkpoint=os.path.join(out_dir, CHECKPOINT_FILE))
    return 0


def run_finetune(args):
    """Supervised training of the whole network, from a checkpoint or from scratch"""
    if not args.scratch and not args.checkpoint:
        raise ConfigError("finetune needs --checkpoint or --scratch")
    config, out_dir = resolve_run(args)
    train, test = load_data(config)
    if args.scratch:
        model, history = train_supervised(config, train)
    else:
        model, history = finetune(open_checkpoint(args), train, config)
    path = os.path.join(out_dir, 'classifier.bin')
    save_checkpoint(capture_classifier(model, config, train.channels, history), path)
    log.info("finetune_finished", checkpoint=path, test_accuracy=supervised_accuracy(model, test))
    return 0


def run_sweep(args):
    """Sensitivity sweep of one config value over seeds"""
    config, out_dir = resolve_run(args)
    values = [parse_override(f"v={text}")[1] for text in args.values.split(',')]
    if not values:
        raise ConfigError("--values needs at least one entry")
    seeds = [int(s) for s in args.seeds.split(',')]
    train, test = load_data(config)
    records = sensitivity_sweep(config, args.param, values, seeds, train, test)
    path = os.path.join(out_dir, 'sweep.json')
    with open(path, 'w') as handle:
        json.dump(records, handle, indent=2)
    log.info("sweep_finished", runs=len(records), path=path)
    return 0


def register(subparsers):
    parser = add_config_flags(subparsers.add_parser('pretrain', help=run_pretrain.__doc__), resume=True)
    parser.set_defaults(handler=run_pretrain)

    parser = add_config_flags(subparsers.add_parser('finetune', help=run_finetune.__doc__))
    parser.add_argument('--checkpoint', help='pre-training checkpoint')
    parser.add_argument('--scratch', action='store_true', help='ignore the checkpoint and train from random init')
    parser.set_defaults(handler=run_finetune)

    parser = add_config_flags(subparsers.add_parser('sweep', help=run_sweep.__doc__))
    parser.add_argument('--param', required=True, help='dotted config key, e.g. train.bank_K')
    parser.add_argument('--values', required=True, help='comma-separated TOML literals')
    parser.add_argument('--seeds', default='0,1,2', help='comma-separated seeds')
    parser.set_defaults(handler=run_sweep)
