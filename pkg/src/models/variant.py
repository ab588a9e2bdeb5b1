"""
Loss Variant Models for AMOC Lab
Handles loss weights and the three-letter variant tags (query, key, bank)
"""

from dataclasses import dataclass
from enum import Enum

from src.errors import ArgumentError
from src.models.memory_bank import BankKind


class InputKind(Enum):
    """Whether an encoder sees the clean view or the perturbed view"""
    CLEAN = "C"
    ADV = "A"


@dataclass(frozen=True)
class LossWeights:
    """Balance weight lambda, temperature T and the TRADES weight"""

    lam: float = 0.5
    temperature: float = 0.2
    trades_beta: float = 6.0

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ArgumentError(f"lambda must lie in (0, 1), got {self.lam}")
        if self.temperature <= 0:
            raise ArgumentError(f"temperature must be positive, got {self.temperature}")
        if self.trades_beta <= 0:
            raise ArgumentError(f"trades_beta must be positive, got {self.trades_beta}")

    def to_dict(self):
        return {'lam': self.lam, 'temperature': self.temperature, 'trades_beta': self.trades_beta}


@dataclass(frozen=True)
class VariantTag:
    """Query input, key input and negative bank of one contrastive term"""

    query: InputKind
    key: InputKind
    bank: BankKind

    @classmethod
    def parse(cls, code):
        code = str(code).strip().upper()
        if len(code) != 3 or any(ch not in 'AC' for ch in code):
            raise ArgumentError(f"variant tag must be three letters from A/C, got {code!r}")
        return cls(
            query=InputKind(code[0]),
            key=InputKind(code[1]),
            bank=BankKind.ADV if code[2] == 'A' else BankKind.CLEAN,
        )

    @property
    def code(self):
        bank = 'A' if self.bank == BankKind.ADV else 'C'
        return f"{self.query.value}{self.key.value}{bank}"

    @property
    def needs_delta(self):
        """True when either encoder is fed the perturbed input"""
        return self.query == InputKind.ADV or self.key == InputKind.ADV

    def __str__(self):
        return self.code


CCC = VariantTag.parse('CCC')
ACA = VariantTag.parse('ACA')

# CCC plus the six variants compared against each other
NAMED_VARIANTS = tuple(VariantTag.parse(code) for code in ('CCC', 'ACA', 'ACC', 'AAA', 'AAC', 'CAA', 'CAC'))
