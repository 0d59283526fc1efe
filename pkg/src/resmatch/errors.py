"""Exception hierarchy shared by every subsystem."""


class ResmatchError(Exception):
    """Base class; the CLI turns these into structured exit messages."""

    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ContractError(ResmatchError, ValueError):
    kind = "contract"


class DimensionError(ContractError):
    kind = "dimension"

    def __init__(self, message: str, axis: str | int | None = None):
        super().__init__(message)
        self.axis = axis

    def to_dict(self) -> dict:
        return {**super().to_dict(), "axis": self.axis}


class ResolutionError(ContractError):
    kind = "resolution"

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer

    def to_dict(self) -> dict:
        return {**super().to_dict(), "layer": self.layer}


class SpecError(ContractError):
    kind = "spec"


class ConfigError(ContractError):
    kind = "config"


class DataError(ResmatchError):
    kind = "data"


class FormatError(DataError):
    kind = "format"

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset

    def to_dict(self) -> dict:
        return {**super().to_dict(), "offset": self.offset}


class NumericError(ResmatchError, ArithmeticError):
    """A non-finite value surfaced; ``term`` names the offending quantity."""

    kind = "numeric"

    def __init__(self, message: str, term: str | None = None, precision: str | None = None,
                 stage: int | None = None, step: int | None = None):
        super().__init__(message)
        self.term = term
        self.precision = precision
        self.stage = stage
        self.step = step

    def with_context(self, stage: int, step: int) -> "NumericError":
        return NumericError(f"{self} (stage {stage}, step {step})", self.term, self.precision,
                            stage, step)

    def to_dict(self) -> dict:
        return {**super().to_dict(), "term": self.term, "precision": self.precision,
                "stage": self.stage, "step": self.step}
