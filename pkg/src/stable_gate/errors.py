"""Exception hierarchy shared by every module of the package."""


class StableGateError(Exception):
    """Base class; the CLI maps these to exit status 1 with the module name."""

    module = "stable_gate"


class UnknownCharacterError(StableGateError, ValueError):
    module = "micro-lm"

    def __init__(self, char: str, text: str):
        self.char = char
        super().__init__(f"character {char!r} is not in the vocabulary (text={text!r})")


class CapacityError(StableGateError, ValueError):
    module = "micro-lm"


class DegenerateInputError(StableGateError, ValueError):
    module = "micro-lm"


class NumericalFailureError(StableGateError, FloatingPointError):
    module = "micro-lm"

    def __init__(self, message: str, layer: str | None = None):
        self.layer = layer
        super().__init__(message if layer is None else f"{message} (layer {layer})")


class ShapeError(StableGateError, ValueError):
    module = "lora"


class ConformanceError(StableGateError, ValueError):
    module = "lora"


class TrainingFailureError(StableGateError, RuntimeError):
    module = "lora"

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class DatasetError(StableGateError, ValueError):
    module = "harness"


class UndefinedStatisticError(StableGateError, ValueError):
    module = "report"


class RecordLoadError(StableGateError, ValueError):
    module = "report"


class CheckpointError(StableGateError, ValueError):
    module = "checkpoint"
