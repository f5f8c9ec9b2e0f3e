"""Reverse-mode automatic differentiation over dense numpy tensors."""

from . import functional
from .gradcheck import GradcheckResult, gradcheck, relative_error
from .tensor import DEFAULT_DTYPE, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "DEFAULT_DTYPE",
    "GradcheckResult",
    "Tensor",
    "backward",
    "functional",
    "gradcheck",
    "is_grad_enabled",
    "no_grad",
    "relative_error",
]
