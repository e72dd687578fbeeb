"""Multi-temporal 3D convolutions on a small numpy autograd core."""
from .tensor import ParamStore, Tensor, no_grad

__all__ = ["ParamStore", "Tensor", "no_grad"]
__version__ = "0.1.0"
