"""Exception hierarchy shared by all LILAD modules.

Each class carries the CLI exit code it maps to (1 usage, 2 data/format,
3 numerical/enforcement).
"""


class LiladError(Exception):
    exit_code = 1


class DimensionError(LiladError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LiladError, ValueError):
    """A documented precondition was violated by the caller."""


class ParameterError(LiladError, ValueError):
    """A physical parameter is outside its admissible range."""


class CapacityError(LiladError, ValueError):
    """A prompt is longer than the model's positional table."""


class DataError(LiladError):
    exit_code = 2


class FormatError(DataError):
    """A pool/checkpoint/state file is truncated, corrupt, or of the wrong version."""


class DistributionError(DataError):
    """Rejection sampling could not produce a physical parameter draw."""


class NumericalError(LiladError, ArithmeticError):
    exit_code = 3


class IntegrationError(NumericalError):
    """An RK4 stage produced a non-finite value."""


class SingularityError(NumericalError):
    """A right-hand side hit a vanishing denominator."""


class TrainingError(NumericalError):
    """A loss or gradient became non-finite during training."""


class EnforcementError(NumericalError):
    """The attenuator could not certify the Lyapunov decrease."""


class SolverError(NumericalError):
    """An iterative solver failed to reach its tolerance."""


class RolloutError(NumericalError):
    """A model rollout produced a non-finite prediction."""
