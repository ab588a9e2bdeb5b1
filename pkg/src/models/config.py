"""
Configuration Models for AMOC Lab
Handles the experiment config tree, TOML round-trips and --set overrides
"""

import copy
import hashlib
import dataclasses
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field

import tomli_w

from src.errors import AmocError, ConfigError
from src.extensions import SeedStreams
from src.models.attack_spec import (
    ATTACK_TABLE, EVALUATION_ATTACKS, PRETRAIN_ATTACK, AttackSpec, Norm, pgd_spec,
)
from src.models.variant import LossWeights, VariantTag

OBJECTIVES = ('amoc', 'moco')
SUPERVISED_OBJECTIVES = ('standard', 'pgd_at', 'trades')
PROTOCOLS = ('stdev', 'adev')
DATA_KINDS = ('synthetic', 'cifar10', 'cifar100')
LABEL_KINDS = ('fine', 'coarse')

# Sections whose seed is derived from experiment.seed unless pinned
SEEDED_SECTIONS = ('data', 'train', 'finetune', 'eval')
UNPINNED = -1


@dataclass
class ExperimentSection:
    name: str = 'toy'
    out: str = 'runs/toy'
    seed: int = 0


@dataclass
class DataConfig:
    kind: str = 'synthetic'
    path: list = field(default_factory=list)
    test_path: list = field(default_factory=list)
    label_kind: str = 'fine'
    n: int = 2000
    test_n: int = 500
    classes: int = 2
    side: int = 16
    seed: int = UNPINNED
    limit: int = 0
    test_limit: int = 0

    def validate(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.label_kind not in LABEL_KINDS:
            raise ConfigError(f"data.label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")
        if self.kind == 'synthetic':
            if self.classes < 2:
                raise ConfigError("data.classes must be at least 2")
            if min(self.n, self.test_n) < self.classes:
                raise ConfigError("data.n and data.test_n need at least one sample per class")
            if self.side < 8:
                raise ConfigError(f"data.side must be at least 8 pixels, got {self.side}")
        elif not self.path or not self.test_path:
            raise ConfigError(f"data.kind={self.kind} needs data.path and data.test_path")
        if self.limit < 0 or self.test_limit < 0:
            raise ConfigError("data.limit and data.test_limit must be non-negative")


@dataclass
class ArchConfig:
    name: str = 'convnet4'
    width: int = 32
    embed_dim: int = 128


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    base_lr: float = 0.1
    warmup_epochs: int = 10
    weight_decay: float = 5e-4
    sgd_momentum: float = 0.9
    momentum: float = 0.999
    bank_K: int = 2048
    objective: str = 'amoc'
    variant: str = 'ACA'
    seed: int = UNPINNED
    fresh_banks_on_resume: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    attack: AttackSpec = PRETRAIN_ATTACK

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs must be non-negative")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ConfigError(
                f"train.warmup_epochs ({self.warmup_epochs}) must be below train.epochs ({self.epochs})"
            )
        if self.batch_size < 1 or self.batch_size > self.bank_K:
            raise ConfigError(f"train.batch_size must lie in [1, bank_K={self.bank_K}]")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"train.objective must be one of {OBJECTIVES}")
        try:
            VariantTag.parse(self.variant)
        except AmocError as e:
            raise ConfigError(f"train.variant: {e}")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError("train.momentum must lie in (0, 1)")

    @property
    def variant_tag(self):
        return VariantTag.parse(self.variant)


@dataclass
class FinetuneConfig:
    objective: str = 'trades'
    batch_size: int = 64
    epochs: int = 30
    base_lr: float = 0.1
    warmup_epochs: int = 0
    weight_decay: float = 5e-4
    sgd_momentum: float = 0.9
    trades_beta: float = 6.0
    augment: bool = True
    seed: int = UNPINNED
    attack: AttackSpec = ATTACK_TABLE['PGD10-linf']

    def validate(self):
        if self.objective not in SUPERVISED_OBJECTIVES:
            raise ConfigError(f"finetune.objective must be one of {SUPERVISED_OBJECTIVES}")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ConfigError("finetune.warmup_epochs must be below finetune.epochs")


@dataclass
class EvalConfig:
    protocol: str = 'adev'
    head_epochs: int = 25
    head_lr: float = 0.1
    batch_size: int = 128
    seed: int = UNPINNED
    attack_limit: int = 0
    attacks: list = field(default_factory=lambda: list(EVALUATION_ATTACKS))
    sweep_eps: list = field(default_factory=lambda: [0.0, 2 / 255, 4 / 255, 8 / 255, 12 / 255, 16 / 255])
    sweep_eps_l2: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    sweep_eps_l1: list = field(default_factory=lambda: [0.0, 3.0, 6.0, 12.0, 18.0])
    train_attack: AttackSpec = ATTACK_TABLE['PGD10-linf']
    test_attack: AttackSpec = ATTACK_TABLE['PGD20-linf']
    sweep_attack: AttackSpec = pgd_spec(20, 0.1)

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"eval.protocol must be one of {PROTOCOLS}")
        unknown = [name for name in self.attacks if name not in ATTACK_TABLE]
        if unknown:
            raise ConfigError(f"eval.attacks holds unknown attacks {unknown}")
        for key in ('sweep_eps', 'sweep_eps_l2', 'sweep_eps_l1'):
            budgets = list(getattr(self, key))
            if budgets != sorted(budgets) or any(e < 0 for e in budgets):
                raise ConfigError(f"eval.{key} must be non-negative and sorted ascending")

    def sweep_budgets(self, norm):
        """Epsilon list of an eps-sweep under the given norm"""
        return {
            Norm.LINF: self.sweep_eps,
            Norm.L2: self.sweep_eps_l2,
            Norm.L1: self.sweep_eps_l1,
        }[Norm(norm)]


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.resolve_seeds()

    def resolve_seeds(self):
        """Derive every unpinned section seed from experiment.seed"""
        if self.experiment.seed < 0:
            raise ConfigError(f"experiment.seed must be non-negative, got {self.experiment.seed}")
        streams = SeedStreams(self.experiment.seed)
        for name in SEEDED_SECTIONS:
            section = getattr(self, name)
            if section.seed == UNPINNED:
                section.seed = streams.seed_for(name)
            elif section.seed < 0:
                raise ConfigError(f"{name}.seed must be non-negative, got {section.seed}")
        return self

    def validate(self):
        self.data.validate()
        self.train.validate()
        self.finetune.validate()
        self.eval.validate()
        return self

    def to_dict(self):
        return _to_plain(self)

    @classmethod
    def from_dict(cls, data):
        return _from_plain(cls, resolve_defaults(data), '').resolve_seeds().validate()

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_toml(cls, text):
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML: {e}")
        return cls.from_dict(data)

    def fingerprint(self):
        """Short stable digest of every effective value"""
        return hashlib.sha256(self.to_toml().encode('utf-8')).hexdigest()[:16]


def _to_plain(value):
    if isinstance(value, (AttackSpec, LossWeights)):
        return value.to_dict()
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _check_scalar(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} expects a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            return [value]
        if not isinstance(value, list):
            raise ConfigError(f"{path} expects a list, got {value!r}")
        return list(value)
    return value


def _from_plain(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a table")
    instance = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    for name, value in data.items():
        path = prefix + name
        default = getattr(instance, name)
        try:
            if isinstance(default, AttackSpec):
                value = AttackSpec.from_dict({**default.to_dict(), **_table(value, path)})
            elif isinstance(default, LossWeights):
                value = LossWeights(**{**default.to_dict(), **_table(value, path)})
            elif dataclasses.is_dataclass(default):
                value = _from_plain(type(default), value, path + '.')
            else:
                value = _check_scalar(default, value, path)
        except ConfigError:
            raise
        except (AmocError, TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}")
        setattr(instance, name, value)
    return instance


def _table(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path} must be a table")
    return value


def _default_tree():
    data = ExperimentConfig().to_dict()
    for name in SEEDED_SECTIONS:
        data[name]['seed'] = UNPINNED
    return data


def resolve_defaults(data):
    """Deep-merge a partial config dict over the defaults"""
    merged = _default_tree()
    _merge(merged, data, '')
    return merged


def reseed(data, root):
    """Copy of a config dict with a new root seed and every section seed re-derived"""
    data = copy.deepcopy(data)
    data['experiment']['seed'] = int(root)
    for name in SEEDED_SECTIONS:
        if isinstance(data.get(name), dict):
            data[name]['seed'] = UNPINNED
    return data


def _merge(base, update, prefix):
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, f"{prefix}{key}.")
        else:
            base[key] = value


def parse_override(text):
    """Split 'a.b.c=value' and parse value as a TOML literal (bare strings allowed)"""
    if '=' not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split('=', 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")['v']
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def apply_overrides(data, overrides):
    """Apply --set overrides to a resolved config dict in place"""
    data = copy.deepcopy(data)
    for text in overrides:
        key, value = parse_override(text)
        node = data
        parts = key.split('.')
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the TOML file, then --set overrides, then the seed override"""
    data = _default_tree()
    if path:
        try:
            with open(path, 'rb') as handle:
                file_data = tomllib.load(handle)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: invalid TOML: {e}")
        _merge(data, file_data, '')
    data = apply_overrides(data, overrides)
    if seed is not None:
        data = reseed(data, seed)
    return ExperimentConfig.from_dict(data)
