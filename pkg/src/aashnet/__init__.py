"""Skip-layer shrinkage networks with hyperparameters tuned by reversible SGD."""
from .errors import AAShNetError, NumericalError, ValidationError
from .model import Dataset, HyperParams, Topology, Weights

__version__ = "0.1.0"

__all__ = ["AAShNetError", "NumericalError", "ValidationError", "Dataset", "HyperParams", "Topology", "Weights"]
