"""
Evaluation Commands for AMOC Lab
Handles linear-eval, attack-eval, eps-sweep, ttest and export-embeddings
"""

import os

import numpy as np
import structlog

from src.errors import IncompatibleCheckpointError
from src.models.attack_spec import Norm, table_attacks
from src.models.encoder import BNMode
from src.models.report import RobustnessReport
from src.routes.common import add_config_flags, load_data, open_checkpoint, resolve_run
from src.services.checkpoint_service import save_checkpoint, save_embeddings
from src.services.evaluation_service import epsilon_sweep, export_embeddings, linear_eval, robust_accuracy
from src.services.stats_service import load_scores, paired_ttest
from src.services.training_service import (
    capture_classifier, classifier_from_checkpoint, encoder_from_checkpoint, supervised_accuracy,
)

log = structlog.get_logger()


def _write_report(report, out_dir, name):
    path = os.path.join(out_dir, name)
    report.save(path)
    print(report.to_table())
    log.info("report_written", path=path)
    return path


def _attack_subset(config, test):
    limit = config.eval.attack_limit
    return test if not limit else test.subset(np.arange(min(limit, len(test))))


def _classifier_for(checkpoint, config, train, test):
    """Classifier checkpoints are used as stored; pre-training checkpoints get a linear head first"""
    if checkpoint.kind == 'classifier':
        return classifier_from_checkpoint(checkpoint), checkpoint.metadata.get('fingerprint', '')
    if checkpoint.kind != 'pretrain':
        raise IncompatibleCheckpointError(f"cannot evaluate a {checkpoint.kind!r} checkpoint")
    fingerprint = checkpoint.metadata.get('fingerprint', '')
    classifier, _ = linear_eval(encoder_from_checkpoint(checkpoint), train, test, config.eval,
                                fingerprint=fingerprint)
    return classifier, fingerprint


def run_linear_eval(args):
    """Linear evaluation (StdEv or AdEv) on a frozen pre-trained encoder"""
    config, out_dir = resolve_run(args)
    train, test = load_data(config)
    checkpoint = open_checkpoint(args)
    classifier, report = linear_eval(encoder_from_checkpoint(checkpoint), train, test, config.eval,
                                     fingerprint=checkpoint.metadata.get('fingerprint', ''),
                                     label=config.experiment.name)
    save_checkpoint(capture_classifier(classifier, config, train.channels),
                    os.path.join(out_dir, 'linear-head.bin'))
    _write_report(report, out_dir, f"linear-eval-{report.protocol}.json")
    return 0


def run_attack_eval(args):
    """Accuracy under every attack configured in eval.attacks"""
    config, out_dir = resolve_run(args)
    train, test = load_data(config)
    classifier, fingerprint = _classifier_for(open_checkpoint(args), config, train, test)
    report = robust_accuracy(classifier, _attack_subset(config, test), table_attacks(config.eval.attacks),
                             seed=config.eval.seed, batch_size=config.eval.batch_size,
                             fingerprint=fingerprint, protocol=config.eval.protocol,
                             label=config.experiment.name)
    _write_report(report, out_dir, 'attack-eval.json')
    return 0


def run_eps_sweep(args):
    """Accuracy across perturbation budgets with warm-started PGD"""
    config, out_dir = resolve_run(args)
    train, test = load_data(config)
    classifier, fingerprint = _classifier_for(open_checkpoint(args), config, train, test)
    subset = _attack_subset(config, test)
    norm = Norm(args.norm) if args.norm else config.eval.sweep_attack.norm
    curve = epsilon_sweep(classifier, subset, norm, config.eval.sweep_budgets(norm), config.eval.sweep_attack,
                          seed=config.eval.seed, batch_size=config.eval.batch_size)
    report = RobustnessReport(clean=supervised_accuracy(classifier, subset),
                              attacks={f"eps={e:.4f}": a for e, a in curve},
                              fingerprint=fingerprint, seed=config.eval.seed,
                              protocol=config.eval.protocol, label=config.experiment.name,
                              n=len(subset), curve=curve)
    _write_report(report, out_dir, f"eps-sweep-{norm.value}.json")
    return 0


def run_ttest(args):
    """Paired t-test between two score files"""
    scores_a = load_scores(args.a, args.metric)
    scores_b = load_scores(args.b, args.metric)
    result = paired_ttest(scores_a, scores_b)
    print(f"t={result.t} p={result.p} n={result.n}")
    return 0


def run_export_embeddings(args):
    """Embedding matrix and labels of the test split"""
    config, out_dir = resolve_run(args)
    _, test = load_data(config)
    checkpoint = open_checkpoint(args)
    bn_mode = BNMode(args.bn)
    matrix, labels = export_embeddings(encoder_from_checkpoint(checkpoint), test, bn_mode)
    path = os.path.join(out_dir, f"embeddings-{bn_mode.value}.bin")
    save_embeddings(path, matrix, labels, {'bn_mode': bn_mode.value,
                                           'fingerprint': checkpoint.metadata.get('fingerprint', '')})
    return 0


def register(subparsers):
    parser = add_config_flags(subparsers.add_parser('linear-eval', help=run_linear_eval.__doc__), checkpoint=True)
    parser.set_defaults(handler=run_linear_eval)

    parser = add_config_flags(subparsers.add_parser('attack-eval', help=run_attack_eval.__doc__), checkpoint=True)
    parser.set_defaults(handler=run_attack_eval)

    parser = add_config_flags(subparsers.add_parser('eps-sweep', help=run_eps_sweep.__doc__), checkpoint=True)
    parser.add_argument('--norm', choices=[n.value for n in Norm])
    parser.set_defaults(handler=run_eps_sweep)

    parser = subparsers.add_parser('ttest', help=run_ttest.__doc__)
    parser.add_argument('a')
    parser.add_argument('b')
    parser.add_argument('--metric', help="attack column (or 'clean') for lists of reports")
    parser.set_defaults(handler=run_ttest)

    parser = add_config_flags(subparsers.add_parser('export-embeddings', help=run_export_embeddings.__doc__),
                              checkpoint=True)
    parser.add_argument('--bn', choices=[m.value for m in BNMode], default=BNMode.ADV.value)
    parser.set_defaults(handler=run_export_embeddings)
