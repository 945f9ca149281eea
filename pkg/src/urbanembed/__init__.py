"""Multi-graph urban region embedding on a small numpy autodiff engine."""

from .errors import ContractError, NumericError, ShapeError, ValidationError
from .evaluation import evaluate_clustering, evaluate_popularity
from .synth import SynthConfig, generate_city
from .training import TrainingConfig, fit, prepare_inputs

__version__ = "0.1.0"

__all__ = [
    "ContractError", "NumericError", "ShapeError", "ValidationError",
    "SynthConfig", "generate_city",
    "TrainingConfig", "prepare_inputs", "fit",
    "evaluate_clustering", "evaluate_popularity",
]
