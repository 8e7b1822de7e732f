# app/errors.py
"""
Exception hierarchy shared by the services and the CLI.

Every error carries the process exit code the CLI should use:
  2 -> data / config problems, 3 -> numeric failures.
"""
from typing import Optional


class RadioSiamError(Exception):
    exit_code = 2


class ConfigError(RadioSiamError):
    exit_code = 2


class ConstraintError(ConfigError):
    """RE/SE batch constraints (even m, m < N/k, k >= 2 for SE)."""


class ShapeError(RadioSiamError, ValueError):
    exit_code = 2


class DataError(RadioSiamError):
    exit_code = 2


class TruncatedPayloadError(DataError):
    pass


class FormatVersionError(DataError):
    pass


class PayloadSizeError(DataError):
    pass


class FingerprintMismatchError(DataError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"config fingerprint mismatch: expected={expected} found={found}")
        self.expected = expected
        self.found = found


class EmptyMaskError(DataError):
    pass


class ClassTooSmallError(DataError):
    def __init__(self, label, size: int, folds: int):
        super().__init__(f"class {label!r} has {size} members, fewer than {folds} folds")
        self.label = label
        self.size = size
        self.folds = folds


class NumericError(RadioSiamError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, layer: Optional[str] = None, step: Optional[int] = None):
        self.message = message
        self.layer = layer
        self.step = step
        parts = [message]
        if layer is not None:
            parts.append(f"layer={layer}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(" ".join(parts))

    def at_step(self, step: int) -> "NumericError":
        return NumericError(self.message, layer=self.layer, step=step)
