"""
Report Models for AMOC Lab
Handles robustness reports and their JSON / plain-text table forms
"""

import json
from dataclasses import dataclass, field
from enum import Enum

from src.errors import ArgumentError, FormatError


class EvalProtocol(Enum):
    """How the linear head is trained on top of the frozen encoder"""
    STDEV = "stdev"
    ADEV = "adev"


@dataclass
class RobustnessReport:
    """Clean and per-attack accuracies (percent) of one model on one test set"""

    clean: float
    attacks: dict = field(default_factory=dict)
    fingerprint: str = ''
    seed: int = 0
    protocol: str = ''
    label: str = ''
    n: int = 0
    curve: list = field(default_factory=list)

    def __post_init__(self):
        for name, value in [('clean', self.clean), *self.attacks.items()]:
            if not 0.0 <= value <= 100.0:
                raise ArgumentError(f"accuracy {name}={value} outside [0, 100]")

    def to_dict(self):
        return {
            'clean': self.clean,
            'attacks': dict(self.attacks),
            'fingerprint': self.fingerprint,
            'seed': self.seed,
            'protocol': self.protocol,
            'label': self.label,
            'n': self.n,
            'curve': [list(point) for point in self.curve],
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(
                clean=float(data['clean']),
                attacks={str(k): float(v) for k, v in data.get('attacks', {}).items()},
                fingerprint=data.get('fingerprint', ''),
                seed=int(data.get('seed', 0)),
                protocol=data.get('protocol', ''),
                label=data.get('label', ''),
                n=int(data.get('n', 0)),
                curve=[(float(e), float(a)) for e, a in data.get('curve', [])],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"not a robustness report: {e}")

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path):
        with open(path, 'w') as handle:
            handle.write(self.to_json() + '\n')
        return path

    @classmethod
    def load(cls, path):
        try:
            with open(path) as handle:
                data = json.load(handle)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON: {e}")
        return cls.from_dict(data)

    def scores(self):
        """Clean accuracy followed by the attack accuracies in report order"""
        return [self.clean, *self.attacks.values()]

    def to_table(self):
        """Aligned plain-text table, one column per attack"""
        headers = ['Model', 'Clean', *self.attacks]
        row = [self.label or self.protocol or '-', f"{self.clean:.2f}",
               *(f"{v:.2f}" for v in self.attacks.values())]
        widths = [max(len(h), len(c)) for h, c in zip(headers, row)]
        lines = [
            '  '.join(h.ljust(w) for h, w in zip(headers, widths)),
            '  '.join('-' * w for w in widths),
            '  '.join(c.ljust(w) for c, w in zip(row, widths)),
        ]
        return '\n'.join(lines)
