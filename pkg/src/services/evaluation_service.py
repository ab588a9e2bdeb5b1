"""
Evaluation Service for AMOC Lab
Handles linear evaluation (StdEv/AdEv), robust accuracy over the attack table,
epsilon sweeps and embedding export
"""

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from sklearn.decomposition import PCA

from src.errors import AmocError, ArgumentError
from src.extensions import SeedStreams, get_device
from src.models.attack_spec import AttackKind, attack_by_name
from src.models.classifier import RobustClassifier
from src.models.encoder import BNMode
from src.models.report import EvalProtocol, RobustnessReport
from src.services.attack_service import frozen_statistics, pgd, run_attack
from src.services.dataio_service import finetune_augment_batch
from src.services.training_service import cosine_lr, epoch_batches, param_groups, set_lr

log = structlog.get_logger()

HEAD_WEIGHT_DECAY = 5e-4


def _predict(model, x):
    with torch.no_grad():
        return model(x).argmax(dim=1)


def _labeled_batches(data, batch_size, device):
    images, labels = data.tensors(device)
    for start in range(0, len(data), batch_size):
        yield images[start:start + batch_size], labels[start:start + batch_size]


def robust_accuracy(model, data, attacks, seed=0, batch_size=128, fingerprint='', protocol='', label=''):
    """Clean accuracy plus one accuracy per attack, all computed on the same clean inputs"""
    device = get_device()
    streams = SeedStreams(seed)
    attacks = [attack_by_name(a) if isinstance(a, str) else a for a in attacks]
    correct_clean = 0
    correct = {spec.name: 0 for spec in attacks}
    with frozen_statistics(model):
        for x, y in _labeled_batches(data, batch_size, device):
            correct_clean += int((_predict(model, x) == y).sum())
            for spec in attacks:
                rng = streams.generator(f"eval/{spec.name}")
                try:
                    x_adv = run_attack(model, x, y, spec, rng)
                except AmocError as e:
                    # the whole batch counts as misclassified
                    log.warning("attack_failed", attack=spec.name, points=int(y.numel()), error=str(e))
                    continue
                finite = torch.isfinite(x_adv.flatten(1)).all(dim=1)
                preds = _predict(model, torch.where(finite.view(-1, 1, 1, 1), x_adv, x))
                if not bool(finite.all()):
                    log.warning("attack_non_finite", attack=spec.name, points=int((~finite).sum()))
                correct[spec.name] += int(((preds == y) & finite).sum())
    n = max(len(data), 1)
    report = RobustnessReport(
        clean=100.0 * correct_clean / n,
        attacks={name: 100.0 * count / n for name, count in correct.items()},
        fingerprint=fingerprint, seed=seed, protocol=protocol, label=label, n=len(data),
    )
    log.info("robust_accuracy", clean=report.clean, **report.attacks)
    return report


def epsilon_sweep(model, data, norm, eps_list, attack_template, seed=0, batch_size=128):
    """(epsilon, accuracy) pairs; each budget warm-starts from the previous adversarial example"""
    eps_list = [float(e) for e in eps_list]
    if eps_list != sorted(eps_list):
        raise ArgumentError("eps_list must be sorted ascending")
    if attack_template.kind not in (AttackKind.PGD, AttackKind.FGSM, AttackKind.SLIDE):
        raise ArgumentError(f"epsilon sweeps need a gradient attack, got {attack_template.name}")
    device = get_device()
    template = attack_template if attack_template.norm == norm else \
        type(attack_template).from_dict({**attack_template.to_dict(), 'norm': norm.value})
    rng = SeedStreams(seed).generator('eval')
    correct = np.zeros(len(eps_list), dtype=np.int64)
    with frozen_statistics(model):
        for x, y in _labeled_batches(data, batch_size, device):
            fooled = torch.zeros_like(y, dtype=torch.bool)
            previous = None
            for i, eps in enumerate(eps_list):
                spec = template.with_epsilon(eps)

                def objective(x_var):
                    return F.cross_entropy(model(x_var), y, reduction='sum')

                x_adv = pgd(objective, x, spec, rng, init_delta=previous)
                fooled |= _predict(model, x_adv) != y
                correct[i] += int((~fooled).sum())
                previous = x_adv - x
    n = max(len(data), 1)
    curve = [(eps, 100.0 * int(c) / n) for eps, c in zip(eps_list, correct)]
    log.info("epsilon_sweep", norm=norm.value, points=len(curve))
    return curve


def train_linear_head(classifier, data, protocol, eval_config):
    """SGD with cosine decay on the head only; AdEv trains on PGD examples through the frozen encoder"""
    protocol = EvalProtocol(protocol)
    device = get_device()
    streams = SeedStreams(eval_config.seed)
    images, labels = data.tensors(device)
    optimizer = torch.optim.SGD(param_groups(classifier.head, HEAD_WEIGHT_DECAY),
                                lr=eval_config.head_lr, momentum=0.9)
    batch_size = min(eval_config.batch_size, len(data))

    cached = None
    if protocol == EvalProtocol.STDEV:
        classifier.eval()
        with torch.no_grad():
            cached = torch.cat([classifier.features(images[s:s + 512]) for s in range(0, len(data), 512)])

    for epoch in range(eval_config.head_epochs):
        set_lr(optimizer, cosine_lr(epoch, eval_config.head_epochs, eval_config.head_lr))
        total = 0.0
        batches = epoch_batches(len(data), batch_size, streams.generator('shuffle'))
        for indices in batches:
            y = labels[indices]
            if cached is not None:
                logits = classifier.head(cached[indices])
            else:
                x = finetune_augment_batch(images[indices], streams.generator('augment'))
                classifier.eval()
                x_adv = pgd(lambda x_var: F.cross_entropy(classifier(x_var), y, reduction='sum'),
                            x, eval_config.train_attack, streams.generator('attack'))
                logits = classifier(x_adv)
            loss = F.cross_entropy(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
        log.debug("head_epoch_finished", epoch=epoch, loss=total / len(batches), protocol=protocol.value)
    classifier.eval()
    return classifier


def linear_eval(encoder, train, test, eval_config, protocol=None, fingerprint='', label=''):
    """Fit a linear head on the frozen encoder and report clean and test-attack accuracy"""
    protocol = EvalProtocol(protocol or eval_config.protocol)
    classifier = RobustClassifier(encoder, train.num_classes, freeze_encoder=True, bn_mode=BNMode.ADV)
    classifier.init_head(SeedStreams(eval_config.seed).seed_for('head'))
    classifier.to(get_device())
    train_linear_head(classifier, train, protocol, eval_config)
    evaluated = test if not eval_config.attack_limit else test.subset(np.arange(min(eval_config.attack_limit, len(test))))
    report = robust_accuracy(classifier, evaluated, [eval_config.test_attack], seed=eval_config.seed,
                             batch_size=eval_config.batch_size, fingerprint=fingerprint,
                             protocol=protocol.value, label=label)
    return classifier, report


def export_embeddings(encoder, data, bn_mode=BNMode.ADV, batch_size=256):
    """Unit-norm embedding rows in dataset order, plus the labels"""
    device = get_device()
    images, labels = data.tensors(device)
    rows = []
    with frozen_statistics(encoder):
        with torch.no_grad():
            for start in range(0, len(data), batch_size):
                rows.append(encoder(images[start:start + batch_size], bn_mode).cpu())
    matrix = torch.cat(rows).numpy().astype(np.float32) if rows else np.zeros((0, encoder.embed_dim), np.float32)
    return matrix, labels.cpu().numpy()


def pca_project(matrix, components=2):
    """Top principal components and their explained-variance ratios"""
    pca = PCA(n_components=components, svd_solver='full')
    coords = pca.fit_transform(np.asarray(matrix, dtype=np.float64))
    return coords, pca.explained_variance_ratio_
