class EpisodicGCDError(Exception):
    """Base class for every error raised by this package."""


class ArgumentError(EpisodicGCDError, ValueError):
    pass


class LayoutMismatchError(ArgumentError):
    """Two parameter vectors with different layouts were combined."""


class DegenerateInputError(EpisodicGCDError, ValueError):
    """A zero-norm vector reached an operation that needs a direction."""


class EvaluationError(EpisodicGCDError, ArithmeticError):
    pass


class GenerationError(EpisodicGCDError, RuntimeError):
    pass


class ConfigurationError(EpisodicGCDError, ValueError):
    pass


class StateError(EpisodicGCDError, RuntimeError):
    pass


class DivergenceError(EpisodicGCDError, ArithmeticError):
    """Training produced a non-finite loss or parameters outside the grid range."""


class RunError(EpisodicGCDError, RuntimeError):
    pass


class CheckpointError(EpisodicGCDError, ValueError):
    pass
