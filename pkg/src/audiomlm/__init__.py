"""Desk-scale masked-token audio pre-training with iterative tokenizer refinement."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad  # noqa: F401
