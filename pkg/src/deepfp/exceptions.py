"""Exception hierarchy shared by all solver modules."""


class DeepFPError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DeepFPError, ValueError):
    pass


class NumericError(DeepFPError, ArithmeticError):
    pass


class DomainError(DeepFPError, ValueError):
    pass


class OptimizationError(DeepFPError):
    """The Hamiltonian is not strictly convex in the player's own control."""


class ConvergenceError(DeepFPError):
    """An iterative procedure hit its iteration cap.

    ``last`` holds the final iterate and ``residual`` the final residual.
    """

    def __init__(self, message, last=None, residual=None):
        super().__init__(message)
        self.last = last
        self.residual = residual


class ConstructionError(DeepFPError):
    pass


class DerivationError(DeepFPError):
    """The closed-form ansatz failed its HJB residual check."""


class IntegrationError(DeepFPError):
    pass


class SimulationError(DeepFPError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class RolloutError(DeepFPError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(DeepFPError):
    """Training aborted; ``step`` is the failing step, ``last_good`` the last finite nets."""

    def __init__(self, message, step=None, last_good=None, player=None, stage=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
        self.player = player
        self.stage = stage


class UsageError(DeepFPError):
    pass


class CheckpointError(DeepFPError):
    pass


class ConfigError(DeepFPError):
    pass
