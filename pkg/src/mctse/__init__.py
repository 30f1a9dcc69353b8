"""Multi-clue target sound extraction.

A self-contained numpy implementation of a complex-spectrum extraction
network conditioned on sound-tag, text and video clues, together with the
reverse-mode autodiff core it trains on, an STFT frontend, a synthetic data
simulator, two-stage training, evaluation and a command line.
"""

from .errors import ConfigError, ContractError, InputError
from .tensor import Tensor, backward, constant, parameter, zero_grads

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "InputError",
    "Tensor",
    "backward",
    "constant",
    "parameter",
    "zero_grads",
    "__version__",
]
