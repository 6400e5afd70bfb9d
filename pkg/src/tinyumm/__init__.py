"""tinyumm: a desk-scale unified multimodal model in pure numpy.

One transformer handles image understanding, text-to-image generation, and
instruction-guided image editing. Images enter through two parallel encoders
at the same 32x spatial reduction and the token streams are fused along the
channel axis, so a picture costs the same number of sequence positions no
matter how many encoders look at it.
"""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeMismatchError, no_grad

__all__ = ["Tensor", "ShapeMismatchError", "no_grad", "__version__"]
