"""
Error types for the MixTTT laboratory
Library code raises these; only the CLI maps them to exit codes.
"""

from typing import Any, List, Optional


class MixTTTError(Exception):
    """Base class for every error raised by the package"""

    exit_code = 1


class ConfigurationError(MixTTTError, ValueError):
    """Malformed or inconsistent configuration"""

    exit_code = 2


class InputError(MixTTTError, ValueError):
    """Tensor shapes, labels or sizes do not match what an operation expects"""

    exit_code = 2


class NumericalError(MixTTTError, ArithmeticError):
    """A loss, gradient or norm became non-finite"""

    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None, epoch: Optional[int] = None):
        context = []
        if epoch is not None:
            context.append(f"epoch={epoch}")
        if step is not None:
            context.append(f"step={step}")
        suffix = f" ({', '.join(context)})" if context else ""
        super().__init__(f"{message}{suffix}")
        self.step = step
        self.epoch = epoch


class EpisodeError(NumericalError):
    """Test-time episode aborted; carries the step index and the trace so far"""

    def __init__(self, message: str, step: int, trace: List[Any]):
        super().__init__(message, step=step)
        self.trace = list(trace)


class FormatError(MixTTTError, IOError):
    """Tensor file with bad magic, version, or truncated payload"""

    exit_code = 4
