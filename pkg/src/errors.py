"""
Error Types for AMOC Lab
Handles the exception hierarchy shared by services and the command line
"""


class AmocError(Exception):
    """Base class for every error raised by AMOC Lab"""


class ArgumentError(AmocError, ValueError):
    """Invalid argument passed to an operation"""


class ConfigError(AmocError):
    """Invalid or unknown configuration value"""


class FormatError(AmocError):
    """File content does not match the expected layout"""


class CorruptRecordError(FormatError):
    """A dataset record holds an impossible value"""


class IncompatibleCheckpointError(AmocError):
    """Checkpoint version or architecture does not match"""


class ArchitectureError(AmocError):
    """Query and key encoders drifted apart structurally"""


class NumericError(AmocError):
    """Non-finite values appeared where finite ones are required"""

    def __init__(self, message, diagnostic=None, rng_states=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
        self.rng_states = rng_states or {}
