"""Named, ordered parameter collections with elementwise arithmetic.

A ParameterSet is the unit the training engines move around: the region
network's weights, their gradients, and the optimizer moments all share the
same names and shapes, so SGD/Adam updates and the meta-learning inner loop
reduce to elementwise arithmetic between sets. Order is insertion order and
is stable across save/load, which the checkpoint round-trip tests rely on.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterator, Tuple

import numpy as np


class ParameterSet:
    """Ordered mapping name -> float64 ndarray supporting elementwise ops."""

    __slots__ = ("_data",)

    def __init__(self, tensors: Dict[str, np.ndarray]):
        data = {}
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype=np.float64)
            data[name] = a
        self._data = data

    @property
    def names(self):
        return list(self._data.keys())

    def shapes(self):
        return {k: v.shape for k, v in self._data.items()}

    def num_elements(self) -> int:
        return sum(v.size for v in self._data.values())

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, name: str) -> bool:
        return name in self._data

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if name in self._data and arr.shape != self._data[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {arr.shape} vs {self._data[name].shape}"
            )
        self._data[name] = arr

    def items(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self._data.items())

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self._data.items()})

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet({k: np.zeros_like(v) for k, v in self._data.items()})

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet({k: fn(v) for k, v in self._data.items()})

    def _check_compatible(self, other: "ParameterSet") -> None:
        if self.names != other.names:
            raise ValueError("parameter sets have different names/order")

    def __add__(self, other: "ParameterSet") -> "ParameterSet":
        self._check_compatible(other)
        return ParameterSet({k: v + other._data[k] for k, v in self._data.items()})

    def __sub__(self, other: "ParameterSet") -> "ParameterSet":
        self._check_compatible(other)
        return ParameterSet({k: v - other._data[k] for k, v in self._data.items()})

    def __mul__(self, scalar: float) -> "ParameterSet":
        s = float(scalar)
        return ParameterSet({k: v * s for k, v in self._data.items()})

    __rmul__ = __mul__

    def add_scaled(self, other: "ParameterSet", scale: float) -> "ParameterSet":
        """self + scale * other, without building the intermediate set."""
        self._check_compatible(other)
        s = float(scale)
        return ParameterSet({k: v + s * other._data[k] for k, v in self._data.items()})

    def add_scaled_(self, other: "ParameterSet", scale: float) -> "ParameterSet":
        """In-place self += scale * other. Returns self."""
        self._check_compatible(other)
        s = float(scale)
        for k, v in self._data.items():
            v += s * other._data[k]
        return self

    def to_vector(self) -> np.ndarray:
        if not self._data:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._data.values()])

    def from_vector(self, vec: np.ndarray) -> "ParameterSet":
        """New set with this set's names/shapes, values taken from `vec`."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_elements():
            raise ValueError(f"vector length {vec.size} != {self.num_elements()}")
        out, offset = {}, 0
        for k, v in self._data.items():
            out[k] = vec[offset : offset + v.size].reshape(v.shape).copy()
            offset += v.size
        return ParameterSet(out)

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self._data.values())))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._data.values())

    def allclose(self, other: "ParameterSet", rtol=1e-12, atol=1e-12) -> bool:
        if self.names != other.names:
            return False
        return all(
            np.allclose(v, other._data[k], rtol=rtol, atol=atol)
            for k, v in self._data.items()
        )

    def equals_exact(self, other: "ParameterSet") -> bool:
        if self.names != other.names:
            return False
        return all(np.array_equal(v, other._data[k]) for k, v in self._data.items())

    def __repr__(self) -> str:
        return f"ParameterSet({len(self._data)} tensors, {self.num_elements()} elements)"
