"""Two-pass image captioning with Cross Modification Attention, on numpy."""

from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "no_grad", "__version__"]
