"""
Training Service for AMOC Lab
Handles the adversarial momentum-contrastive pre-training loop, learning-rate
schedules, checkpoint capture and the supervised / fine-tuning drivers
"""

import hashlib
import json
import math
import os

import structlog
import torch

from src.errors import ArgumentError, IncompatibleCheckpointError, NumericError
from src.extensions import SeedStreams, get_device
from src.models.classifier import RobustClassifier
from src.models.config import ExperimentConfig
from src.models.encoder import BNMode, DualBNEncoder, init_encoder_pair
from src.models.image_set import AugmentationPipeline
from src.models.memory_bank import BankPair
from src.models.variant import CCC, InputKind, LossWeights
from src.services.attack_service import contrastive_perturb
from src.services.checkpoint_service import (
    Checkpoint, decode_generator_states, encode_generator_states, load_module_arrays,
    load_optimizer_arrays, module_arrays, optimizer_arrays, save_checkpoint,
)
from src.services.contrastive_loss import EmbeddingCache, amoc_loss, variant_loss
from src.services.dataio_service import finetune_augment_batch, make_view_batch
from src.services.supervised_loss import cross_entropy_loss, pgd_at_loss, trades_loss

log = structlog.get_logger()

METRICS_FILE = 'metrics.jsonl'
CHECKPOINT_FILE = 'checkpoint.bin'


def cosine_lr(epoch, epochs, base_lr, warmup_epochs=0):
    """Per-epoch linear warmup to base_lr, then cosine decay without restarts"""
    if not 0 <= epoch < epochs:
        raise ArgumentError(f"epoch {epoch} outside [0, {epochs})")
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    progress = (epoch - warmup_epochs) / (epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(epoch, config):
    """Learning rate of an epoch under a train or finetune config section"""
    return cosine_lr(epoch, config.epochs, config.base_lr, config.warmup_epochs)


def param_groups(module, weight_decay):
    """Weight decay on weight matrices and kernels only; biases and BN affines are exempt"""
    decay, no_decay = [], []
    for param in module.parameters():
        if not param.requires_grad:
            continue
        (decay if param.ndim > 1 else no_decay).append(param)
    return [
        {'params': decay, 'weight_decay': weight_decay},
        {'params': no_decay, 'weight_decay': 0.0},
    ]


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group['lr'] = lr


def epoch_batches(n, batch_size, rng):
    """Shuffled full batches; the permutation wraps so the last batch is full too"""
    perm = torch.randperm(n, generator=rng)
    steps = math.ceil(n / batch_size)
    padded = perm.repeat(math.ceil(steps * batch_size / n))[:steps * batch_size]
    return padded.view(steps, batch_size)


def rng_digest(states):
    """sha256 of each substream byte state, keyed by stream name"""
    return {name: hashlib.sha256(state.numpy().tobytes()).hexdigest() for name, state in states.items()}


def _check_finite(loss, streams, rng_states, **diagnostic):
    """rng_states are the substream states captured before the batch drew from them"""
    if not torch.isfinite(loss):
        diagnostic.update(root_seed=streams.root_seed, rng=rng_digest(rng_states))
        log.error("non_finite_loss", **diagnostic)
        raise NumericError(f"non-finite loss at epoch {diagnostic.get('epoch')} "
                           f"batch {diagnostic.get('batch_index')}", diagnostic, rng_states)


class MetricsLog:
    """Append-only JSONL metrics file; no timestamps so reruns are comparable"""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, METRICS_FILE) if out_dir else None

    def rewrite(self, records):
        if not self.path:
            return
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        with open(self.path, 'w') as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + '\n')

    def append(self, record):
        if not self.path:
            return
        with open(self.path, 'a') as handle:
            handle.write(json.dumps(record, sort_keys=True) + '\n')


def read_metrics(path):
    with open(path) as handle:
        return [json.loads(line) for line in handle if line.strip()]


class PretrainService:
    """Owns the encoder pair, both banks, the optimizer and the seeded substreams of one run"""

    def __init__(self, config, data, out_dir=None):
        self.config = config
        self.cfg = config.train
        self.data = data
        self.out_dir = out_dir
        self.device = get_device()
        self.streams = SeedStreams(self.cfg.seed)
        self.pair = init_encoder_pair(config.model, self.streams.seed_for('init'), self.cfg.momentum,
                                      in_channels=data.channels).to(self.device)
        self.banks = BankPair(self.cfg.bank_K, config.model.embed_dim,
                              seed=self.streams.seed_for('bank')).to(self.device)
        self.optimizer = torch.optim.SGD(
            param_groups(self.pair.query, self.cfg.weight_decay),
            lr=self.cfg.base_lr, momentum=self.cfg.sgd_momentum, nesterov=False,
        )
        self.pipeline = AugmentationPipeline.pretrain_default()
        self.epoch = 0
        self.step = 0
        self.history = []
        self.metrics_log = MetricsLog(out_dir)
        self.images, _ = data.tensors()

    @property
    def is_moco(self):
        return self.cfg.objective == 'moco'

    def train_step(self, batch_index, indices):
        """One pass of craft, encode, update, momentum, enqueue"""
        cfg = self.cfg
        images = self.images[indices]
        rng_states = self.streams.get_states()
        view_q, view_k = make_view_batch(images, self.pipeline, self.streams.generator('augment'))
        view_q, view_k = view_q.to(self.device), view_k.to(self.device)
        self.pair.query.train()
        self.pair.key.train()

        if self.is_moco:
            delta = None
            cache = EmbeddingCache(self.pair, view_q, view_k)
            loss = variant_loss(CCC, self.pair, self.banks, view_q, view_k,
                                temperature=cfg.weights.temperature, cache=cache)
            terms = {'loss': float(loss.detach()), 'ccc': float(loss.detach())}
        else:
            delta = contrastive_perturb(self.pair, self.banks, view_q, view_k, cfg.attack,
                                        self.streams.generator('attack'), cfg.weights.temperature)
            cache = EmbeddingCache(self.pair, view_q, view_k, delta)
            result = amoc_loss(self.pair, self.banks, view_q, view_k, delta, cfg.weights,
                               cfg.variant_tag, cache)
            loss = result.total
            terms = {'loss': float(result.total.detach()), 'ccc': float(result.ccc.detach()),
                     'adversarial': float(result.adversarial.detach())}

        _check_finite(loss, self.streams, rng_states, epoch=self.epoch, step=self.step,
                      batch_index=batch_index, terms=terms)

        # keys of this batch, computed with the pre-update key encoder
        k_clean = cache.key(InputKind.CLEAN)
        k_adv = None if delta is None else cache.key(InputKind.ADV)

        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.pair.momentum_update()

        self.step += 1
        self.banks.clean.enqueue(k_clean, self.step)
        if k_adv is not None:
            self.banks.adv.enqueue(k_adv, self.step)
        return terms

    def run_epoch(self):
        cfg = self.cfg
        lr = lr_at(self.epoch, cfg)
        set_lr(self.optimizer, lr)
        batches = epoch_batches(len(self.data), cfg.batch_size, self.streams.generator('shuffle'))
        totals = {}
        for batch_index, indices in enumerate(batches):
            for name, value in self.train_step(batch_index, indices).items():
                totals[name] = totals.get(name, 0.0) + value
        record = {name: value / len(batches) for name, value in totals.items()}
        record.update({
            'epoch': self.epoch,
            'step': self.step,
            'lr': lr,
            'staleness_clean': self.banks.clean.staleness(self.step),
            'staleness_adv': self.banks.adv.staleness(self.step),
            'enqueued_clean': int(self.banks.clean.total_enqueued),
            'enqueued_adv': int(self.banks.adv.total_enqueued),
        })
        if not self.is_moco:
            record['variant'] = cfg.variant_tag.code
        self.epoch += 1
        self.history.append(record)
        self.metrics_log.append(record)
        log.info("epoch_finished", **record)
        return record

    def run(self, epochs=None):
        """Train up to the configured epoch count (or `epochs` more), checkpointing every epoch"""
        target = self.cfg.epochs if epochs is None else min(self.cfg.epochs, self.epoch + epochs)
        if self.epoch == 0:
            self.metrics_log.rewrite([])
        while self.epoch < target:
            self.run_epoch()
            if self.out_dir:
                save_checkpoint(self.capture(), os.path.join(self.out_dir, CHECKPOINT_FILE))
        return self.history

    def capture(self):
        """Full training state as a Checkpoint"""
        arrays = {}
        arrays.update(module_arrays(self.pair.query, 'query'))
        arrays.update(module_arrays(self.pair.key, 'key'))
        arrays.update(module_arrays(self.banks, 'banks'))
        opt_arrays, groups = optimizer_arrays(self.optimizer)
        arrays.update(opt_arrays)
        metadata = {
            'kind': 'pretrain',
            'config': self.config.to_dict(),
            'fingerprint': self.config.fingerprint(),
            'in_channels': self.data.channels,
            'epoch': self.epoch,
            'step': self.step,
            'history': self.history,
            'optimizer_groups': groups,
            'rng': encode_generator_states(self.streams.get_states()),
        }
        return Checkpoint(metadata=metadata, arrays=arrays)

    def restore(self, checkpoint):
        """Resume from a pre-training checkpoint"""
        if checkpoint.kind != 'pretrain':
            raise IncompatibleCheckpointError(f"cannot resume from a {checkpoint.kind!r} checkpoint")
        meta = checkpoint.metadata
        load_module_arrays(self.pair.query, checkpoint, 'query')
        load_module_arrays(self.pair.key, checkpoint, 'key')
        if self.cfg.fresh_banks_on_resume:
            self.banks.reset(self.streams.seed_for('bank') + meta['epoch'])
            self.banks.to(self.device)
        else:
            load_module_arrays(self.banks, checkpoint, 'banks')
        load_optimizer_arrays(self.optimizer, checkpoint, meta['optimizer_groups'])
        self.streams.set_states(decode_generator_states(meta['rng']))
        self.epoch = meta['epoch']
        self.step = meta['step']
        self.history = list(meta['history'])
        self.metrics_log.rewrite(self.history)
        log.info("pretrain_resumed", epoch=self.epoch, step=self.step,
                 fresh_banks=self.cfg.fresh_banks_on_resume)
        return self


def pretrain(config, data, out_dir=None, resume=None):
    """Run pre-training and return (service, checkpoint)"""
    service = PretrainService(config, data, out_dir)
    if resume is not None:
        service.restore(resume)
    service.run()
    return service, service.capture()


def encoder_from_checkpoint(checkpoint):
    """Rebuild the query encoder stored in a pre-training or classifier checkpoint"""
    config = ExperimentConfig.from_dict(checkpoint.metadata['config'])
    encoder = DualBNEncoder(config.model, checkpoint.metadata.get('in_channels', 3))
    prefix = 'query' if checkpoint.kind == 'pretrain' else 'classifier.encoder'
    load_module_arrays(encoder, checkpoint, prefix)
    return encoder.to(get_device())


def classifier_from_checkpoint(checkpoint):
    if checkpoint.kind != 'classifier':
        raise IncompatibleCheckpointError(f"expected a classifier checkpoint, found {checkpoint.kind!r}")
    meta = checkpoint.metadata
    config = ExperimentConfig.from_dict(meta['config'])
    encoder = DualBNEncoder(config.model, meta.get('in_channels', 3))
    model = RobustClassifier(encoder, meta['num_classes'], freeze_encoder=meta.get('frozen', False))
    load_module_arrays(model, checkpoint, 'classifier')
    return model.to(get_device())


def capture_classifier(model, config, in_channels, history=()):
    metadata = {
        'kind': 'classifier',
        'config': config.to_dict(),
        'fingerprint': config.fingerprint(),
        'in_channels': in_channels,
        'num_classes': model.head.out_features,
        'frozen': model.frozen,
        'history': list(history),
    }
    return Checkpoint(metadata=metadata, arrays=module_arrays(model, 'classifier'))


class SupervisedTrainer:
    """Cross-entropy, PGD-AT or TRADES training of a full classifier"""

    def __init__(self, config, data, objective=None, encoder=None):
        self.config = config
        self.cfg = config.finetune
        self.objective = objective or self.cfg.objective
        if self.objective not in ('standard', 'pgd_at', 'trades'):
            raise ArgumentError(f"unknown supervised objective: {self.objective}")
        self.data = data
        self.device = get_device()
        self.streams = SeedStreams(self.cfg.seed)
        if encoder is None:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(self.streams.seed_for('init'))
                encoder = DualBNEncoder(config.model, data.channels)
        self.model = RobustClassifier(encoder, data.num_classes, bn_mode=BNMode.ADV)
        self.model.init_head(self.streams.seed_for('head'))
        self.model.to(self.device)
        self.optimizer = torch.optim.SGD(
            param_groups(self.model, self.cfg.weight_decay),
            lr=self.cfg.base_lr, momentum=self.cfg.sgd_momentum, nesterov=False,
        )
        self.weights = LossWeights(trades_beta=self.cfg.trades_beta)
        self.images, self.labels = data.tensors(self.device)
        self.history = []

    def batch_loss(self, x, y):
        if self.objective == 'standard':
            return cross_entropy_loss(self.model, x, y)
        rng = self.streams.generator('attack')
        if self.objective == 'pgd_at':
            return pgd_at_loss(self.model, x, y, self.cfg.attack, rng)
        return trades_loss(self.model, x, y, self.weights, self.cfg.attack, rng)

    def run(self, on_epoch=None):
        """Train for finetune.epochs; on_epoch(model, epoch) may add fields to each epoch record"""
        cfg = self.cfg
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            set_lr(self.optimizer, lr)
            self.model.train()
            batches = epoch_batches(len(self.data), cfg.batch_size, self.streams.generator('shuffle'))
            total = 0.0
            for batch_index, indices in enumerate(batches):
                x, y = self.images[indices], self.labels[indices]
                rng_states = self.streams.get_states()
                if cfg.augment:
                    x = finetune_augment_batch(x, self.streams.generator('augment'))
                loss = self.batch_loss(x, y)
                _check_finite(loss, self.streams, rng_states, epoch=epoch,
                              batch_index=batch_index, objective=self.objective)
                self.optimizer.zero_grad()
                loss.backward()
                self.optimizer.step()
                total += float(loss.detach())
            record = {'epoch': epoch, 'lr': lr, 'loss': total / len(batches), 'objective': self.objective}
            if on_epoch is not None:
                record.update(on_epoch(self.model, epoch))
            self.history.append(record)
            log.info("supervised_epoch_finished", **record)
        self.model.eval()
        return self.model, self.history


def train_supervised(config, data, objective=None, encoder=None, on_epoch=None):
    """Train a classifier from scratch (encoder=None) or from a given encoder"""
    return SupervisedTrainer(config, data, objective, encoder).run(on_epoch)


def finetune(checkpoint, data, config, on_epoch=None, scratch=False):
    """Full-network fine-tuning of a pre-trained query encoder with finetune.objective"""
    encoder = None if scratch else encoder_from_checkpoint(checkpoint)
    return train_supervised(config, data, config.finetune.objective, encoder, on_epoch)


def batch_predict(model, images, batch_size=256):
    """Argmax predictions in eval mode; the first maximal logit wins ties"""
    preds = []
    with torch.no_grad():
        for start in range(0, images.size(0), batch_size):
            preds.append(model(images[start:start + batch_size]).argmax(dim=1))
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def supervised_accuracy(model, data, batch_size=256):
    images, labels = data.tensors(get_device())
    was_training = model.training
    model.eval()
    try:
        return 100.0 * float((batch_predict(model, images, batch_size) == labels).double().mean())
    finally:
        model.train(was_training)
