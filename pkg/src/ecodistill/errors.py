"""Exception hierarchy shared by every subsystem."""


class EcoDistillError(Exception):
    """Base class for all engine errors."""


class ValidationError(EcoDistillError):
    """Input failed a declared precondition or schema check."""


class RuntimeFailure(EcoDistillError):
    """A run failed after its inputs validated."""


# graph-core
class InvalidDirectionCode(ValidationError):
    pass


class DirectionIntoNodata(ValidationError):
    pass


class EmptyGrid(ValidationError):
    pass


class CycleDetected(ValidationError):
    def __init__(self, nodes):
        self.nodes = frozenset(nodes)
        super().__init__(f"cycle through nodes {sorted(self.nodes)}")


class IncompleteMap(ValidationError):
    pass


class UnknownMethod(ValidationError):
    pass


# state-data
class ParseError(ValidationError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NonMonotonicDates(ParseError):
    pass


class NegativePrecip(ParseError):
    pass


class GraphMismatch(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class IoError(RuntimeFailure):
    pass


# autodiff
class DomainError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DetachedVariable(ValidationError):
    pass


class NonFiniteEvaluation(RuntimeFailure):
    pass


class InvalidBounds(ValidationError):
    pass


# process updaters / simulator
class InvariantViolation(RuntimeFailure):
    pass


class NonFiniteState(RuntimeFailure):
    pass


class AxisMismatch(ValidationError):
    pass


# ML
class UnknownSoilClass(ValidationError):
    pass


class InsufficientHistory(ValidationError):
    pass


class NonFiniteLoss(RuntimeFailure):
    def __init__(self, epoch, value):
        self.epoch = epoch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")


# distiller
class ConstantObservations(ValidationError):
    pass


class ConstantSeries(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DivergedOptimization(RuntimeFailure):
    pass


class PairingMismatch(ValidationError):
    pass


class EmptyFinetuneSet(ValidationError):
    pass
