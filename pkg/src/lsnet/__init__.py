"""Light Siamese change detection on a small numpy/Cython tensor core."""
from .kernels import BACKEND
from .tensor import Grad, GraphConsumedError, ShapeError, Tape, Tensor

__version__ = "0.1.0"
__all__ = ["BACKEND", "Grad", "GraphConsumedError", "ShapeError", "Tape", "Tensor", "__version__"]
