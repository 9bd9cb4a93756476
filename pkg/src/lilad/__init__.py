"""In-context learned dynamics with a jointly learned Lyapunov certificate."""

from .errors import (CapacityError, ContractError, DataError, DimensionError, EnforcementError,
                     FormatError, IntegrationError, LiladError, NumericalError, SolverError,
                     TrainingError)
from .models import ArchConfig, IclDynamicsModel, IclLyapunovModel, WarpConfig
from .systems import make_system
from .training import TrainConfig, train

__version__ = "0.1.0"
