"""ien: a small CPU deep-learning framework where equivariance to image
transformations (rotations, reflections, scale) is learned through an extra
loss term instead of being hard-wired into the architecture."""

__version__ = "0.1.0"

from ien.tensor import Tensor, Tape, backward, grad_check, tensor_new

__all__ = ["Tensor", "Tape", "backward", "grad_check", "tensor_new", "__version__"]
