"""Continual learning with a dynamically expanded mixture of low-rank experts.

Each task appends a group of LoRA experts and router rows to every MoE site of
a frozen backbone. Token assignment guidance keeps old-looking and ambiguous
tokens on the frozen experts during training, and routing-score
regularizers push the two expert groups towards exclusive, specialized use.
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402

__all__ = ["__version__", "BACKEND"]
