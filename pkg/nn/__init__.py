"""numpyベースのテンソルエンジン"""

from nn.tensor import Tensor, Tape, ShapeError, backward, resolve_dtype

__all__ = ["Tensor", "Tape", "ShapeError", "backward", "resolve_dtype"]
