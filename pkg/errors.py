"""
Exception hierarchy and process exit codes for DualNoise.
"""

from pathlib import Path
from typing import Optional

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ABORT = 3


class DualNoiseError(Exception):
    """Base class for every error raised by this project"""


class InvalidSpecError(DualNoiseError, ValueError):
    """A noise specification or synthesis request is out of range"""


class ConfigurationError(DualNoiseError, ValueError):
    """An experiment configuration cannot be executed"""


class ContractError(DualNoiseError, RuntimeError):
    """A caller broke an operation's precondition"""


class UndefinedMetricError(DualNoiseError, ValueError):
    """A metric was requested on inputs where it has no value"""


class TrainingAborted(DualNoiseError, RuntimeError):
    """Training stopped on a non-finite loss; a diagnostic dump was written"""

    def __init__(self, message: str, dump_path: Optional[Path] = None):
        super().__init__(message)
        self.dump_path = dump_path


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented CLI exit code"""
    if isinstance(error, (ConfigurationError, InvalidSpecError)):
        return EXIT_CONFIG_ERROR
    if isinstance(error, TrainingAborted):
        return EXIT_RUNTIME_ABORT
    return 1
