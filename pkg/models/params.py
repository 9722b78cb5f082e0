import copy
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from models.errors import CheckpointShapeError
from services.tensor import Tensor


class ModelParams:
    """Named parameter set of one backbone, with names kept sorted."""

    def __init__(self, backbone: str, config: Dict, tensors: Dict[str, Tensor]):
        self.backbone = backbone
        self.config = copy.deepcopy(config)
        self._tensors = {name: tensors[name] for name in sorted(tensors)}

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __setitem__(self, name, tensor: Tensor):
        if name not in self._tensors:
            raise KeyError(f"Unknown parameter {name} for backbone {self.backbone}")
        if tensor.shape != self._tensors[name].shape:
            raise CheckpointShapeError(
                f"Parameter {name}: shape {list(tensor.shape)} does not match {list(self._tensors[name].shape)}")
        self._tensors[name] = tensor

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def shapes(self):
        return {name: tuple(t.shape) for name, t in self._tensors.items()}

    def count(self) -> int:
        return int(np.sum([t.size for t in self._tensors.values()]))

    def astype(self, dtype, requires_grad: Optional[bool] = None) -> "ModelParams":
        tensors = {name: t.astype(dtype, requires_grad=requires_grad) for name, t in self._tensors.items()}
        return ModelParams(self.backbone, self.config, tensors)

    def copy(self) -> "ModelParams":
        return self.astype(None)

    def trainable(self) -> "ModelParams":
        return self.astype(None, requires_grad=True)

    def frozen(self) -> "ModelParams":
        return self.astype(None, requires_grad=False)

    def zeros_like(self) -> "ModelParams":
        tensors = {name: Tensor(np.zeros(t.shape), dtype=t.dtype) for name, t in self._tensors.items()}
        return ModelParams(self.backbone, self.config, tensors)

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._tensors.values())

    def grads_finite(self) -> bool:
        return all(t.grad is None or np.isfinite(t.grad).all() for t in self._tensors.values())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of names, shapes, dtypes and values."""
        if self.backbone != other.backbone or self.names() != other.names():
            return False
        return all(a.dtype == other[n].dtype and np.array_equal(a.data, other[n].data)
                   for n, a in self._tensors.items())

    def __repr__(self):
        return f"<ModelParams {self.backbone}: {len(self)} tensors, {self.count()} values>"
