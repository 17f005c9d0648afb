"""Desk-scale sparse mixture-of-experts language model laboratory.

Compares routing strategies for token-to-expert assignment (trainable
routers, frozen random routers, hypernetwork-generated routers, and
stochastic selection) on a small decoder-only language model, with
deterministic training, binary checkpoints, and routing diagnostics.
"""

from ._kernels import BACKEND as kernel_backend
from .diffcore import Tensor, grad_check, no_grad, tensor

__version__ = "0.1.0"

__all__ = ["Tensor", "tensor", "no_grad", "grad_check", "kernel_backend", "__version__"]
