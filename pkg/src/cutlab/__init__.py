"""cutlab: desk-scale training lab for structured embedding erasure.

Structured erasure (token / feature / span) of input-embedding matrices,
a combined cross-entropy + Jensen-Shannon consistency objective, tiny
transformer models with from-scratch reverse-mode autodiff, a PGD-style
adversarial baseline with forward/backward pass accounting, and experiment
harnesses over synthetic tasks.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, gradcheck, no_grad

__all__ = ["Tensor", "backward", "gradcheck", "no_grad", "__version__"]
