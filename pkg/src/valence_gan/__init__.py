"""Semi-supervised emotional-valence classification over speech spectrograms."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    ContractError,
    GraphError,
    IngestionError,
    NumericFault,
    ProtocolError,
    ValenceGanError,
    ValidationError,
)
from .tensor import Tensor, backward, grad_check  # noqa: F401
