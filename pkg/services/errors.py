from __future__ import annotations

from typing import Optional


class DissipatorError(RuntimeError):
    """Базовая ошибка лаборатории. exit_code — код процесса для CLI."""

    exit_code = 3


class SchemaError(DissipatorError):
    """Невалидный конфиг эксперимента; field_path — путь к полю через точку."""

    exit_code = 2

    def __init__(self, field_path: str, message: str) -> None:
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class DimensionError(DissipatorError):
    pass


class SizeError(DissipatorError):
    pass


class BasisMismatchError(DissipatorError):
    pass


class DegenerateError(DissipatorError):
    pass


class ValidationError(DissipatorError):
    pass


class ResonanceError(DissipatorError):
    """Малый знаменатель в уравнении гомологии (переполнение)."""

    def __init__(self, k: int, denominator: float) -> None:
        self.k = k
        self.denominator = denominator
        super().__init__(f"resonant mode k={k}: |e^(2*pi*i*k*alpha) - 1| = {denominator:.3e}")


class ParameterError(DissipatorError):
    pass


class ResolutionError(DissipatorError):
    pass


class StepSizeError(DissipatorError):
    pass


class OracleSizeError(DissipatorError):
    pass


class PreconditionError(DissipatorError):
    pass


class CapabilityError(DissipatorError):
    pass


class GroupingError(DissipatorError):
    pass


class InvariantViolation(DissipatorError):
    def __init__(self, name: str, message: str, value: Optional[float] = None) -> None:
        self.name = name
        self.value = value
        super().__init__(f"{name}: {message}")


class BlowUpError(DissipatorError):
    pass


class WindowError(DissipatorError):
    pass


class EigensolverError(DissipatorError):
    pass
