"""Dense tensor value exchanged through GLTENSR1 files."""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

# Little-endian on disk regardless of host
DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}


@dataclass(frozen=True)
class TensorFile:
    """
    Row-major little-endian tensor with a name tag.

    Invariants: ``shape`` has at least one dimension, every dimension is positive,
    and ``len(data) == prod(shape) * itemsize``.
    """

    dtype: str
    shape: Tuple[int, ...]
    data: bytes
    name: str = ""

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"Unsupported dtype '{self.dtype}' (expected one of {sorted(DTYPES)})")
        shape = tuple(int(s) for s in self.shape)
        object.__setattr__(self, "shape", shape)
        validate_shape(shape)
        expected = self.num_elements * DTYPES[self.dtype].itemsize
        if len(self.data) != expected:
            raise ValueError(f"Tensor '{self.name}' holds {len(self.data)} bytes, shape {shape} needs {expected}")

    @property
    def num_elements(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def nbytes(self) -> int:
        return len(self.data)

    @classmethod
    def from_array(cls, array: np.ndarray, name: str = "", dtype: Optional[str] = None) -> "TensorFile":
        """
        Build a TensorFile from a numpy array.

        Args:
            array: Source array (any byte order)
            name: Name tag stored in the header
            dtype: Target dtype; inferred from the array kind when omitted
                   (float -> float32, bool/uint8 -> uint8, other ints -> int32)

        Returns:
            TensorFile with little-endian payload
        """
        array = np.asarray(array)
        if dtype is None:
            if array.dtype.kind == "f":
                dtype = "float32"
            elif array.dtype.kind == "b" or array.dtype == np.uint8:
                dtype = "uint8"
            elif array.dtype.kind in "iu":
                dtype = "int32"
            else:
                raise ValueError(f"Cannot store arrays of dtype {array.dtype}")
        payload = np.ascontiguousarray(array.astype(DTYPES[dtype], copy=False)).tobytes(order="C")
        return cls(dtype=dtype, shape=tuple(array.shape), data=payload, name=name)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, name: str = "", dtype: Optional[str] = None) -> "TensorFile":
        return cls.from_array(tensor.detach().cpu().numpy(), name=name, dtype=dtype)

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=DTYPES[self.dtype]).reshape(self.shape).copy()

    def to_tensor(self) -> torch.Tensor:
        array = self.to_array()
        # torch has no '<i4'/'<f4' distinction; convert to native order first
        return torch.from_numpy(array.astype(array.dtype.newbyteorder("="), copy=False))


def validate_shape(shape: Tuple[int, ...]) -> None:
    if len(shape) < 1:
        raise ValueError("Tensor shape must have at least one dimension")
    if any(s <= 0 for s in shape):
        raise ValueError(f"Tensor shape must contain positive integers, got {shape}")


__all__ = ["DTYPES", "TensorFile", "validate_shape"]
