"""
Shared extensions for AMOC Lab
Handles environment loading, structured logging and seeded random streams
"""

import logging
import os
import sys
import zlib

import numpy as np
import structlog
import torch
from dotenv import load_dotenv

from src.errors import ConfigError

load_dotenv()

_configured = False


def configure_logging(level=None):
    """Configure structlog once for the whole process"""
    global _configured
    if _configured:
        return
    level_name = (level or os.getenv('AMOC_LOG_LEVEL', 'INFO')).upper()
    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt='iso'),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            getattr(logging, level_name, logging.INFO)
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=True,
    )
    _configured = True


def get_device():
    """Device every model and tensor is placed on"""
    return torch.device(os.getenv('AMOC_DEVICE', 'cpu'))


def seed_override():
    """Root seed from AMOC_SEED, or None when unset"""
    value = os.getenv('AMOC_SEED')
    if value is None or value.strip() == '':
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"AMOC_SEED must be an integer, got {value!r}")


class SeedStreams:
    """Named random substreams derived from one root seed"""

    NAMES = ('init', 'shuffle', 'augment', 'attack', 'bank', 'head', 'eval')

    def __init__(self, root_seed):
        self.root_seed = int(root_seed)
        self._generators = {}

    def seed_for(self, name):
        """Deterministic 63-bit seed for a named substream"""
        sequence = np.random.SeedSequence([self.root_seed, zlib.crc32(name.encode('utf-8'))])
        state = sequence.generate_state(2, dtype=np.uint32)
        return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)

    def generator(self, name):
        """Torch generator for a named substream, created on first use"""
        if name not in self._generators:
            gen = torch.Generator()
            gen.manual_seed(self.seed_for(name))
            self._generators[name] = gen
        return self._generators[name]

    def numpy(self, name):
        """Fresh numpy generator seeded from a named substream"""
        return np.random.default_rng(self.seed_for(name))

    def get_states(self):
        """Byte states of every generator created so far"""
        return {name: gen.get_state() for name, gen in self._generators.items()}

    def set_states(self, states):
        """Restore generator states captured by get_states"""
        for name, state in states.items():
            self.generator(name).set_state(state)
