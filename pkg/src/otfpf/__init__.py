"""Brain-age estimation from volumetric inputs via optimal-transport set
embeddings over a fused feature pyramid, with overlapped 3D ConvNeXt
pathways and a synthetic-data training harness."""

from .autodiff import Parameter, Tensor, no_grad
from .errors import (ConfigError, DataError, GraphError, NumericalError,
                     OtfpfError, ShapeError)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "OtfpfError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "ShapeError",
    "GraphError",
    "__version__",
]
