"""Independent subnetwork training for GPT-style transformers, simulated on one machine."""
from .config import ModelConfig, SubnetSpec, parse_ratio
from .model import ParameterStore, forward, init_params, extract_physical_subnet
from .tensor import Rng, Tensor

__version__ = "0.1.0"

__all__ = ["ModelConfig", "SubnetSpec", "parse_ratio", "ParameterStore", "forward",
           "init_params", "extract_physical_subnet", "Rng", "Tensor", "__version__"]
