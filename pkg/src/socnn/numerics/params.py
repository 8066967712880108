"""Named parameter storage shared by every layer."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


class MissingParameterError(KeyError):
    pass


class ParamStore:
    """Trainable tensors plus non-trainable buffers (batch-norm running stats).

    Names are dotted paths such as ``"sc1.intra.0.weight"``; layers look their
    parameters up by prefix, so the store is the only stateful object in a
    model.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, value) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self.buffers[name] = arr
        return arr

    def param(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise MissingParameterError(f"parameter {name!r} is not initialised") from None

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self.buffers[name]
        except KeyError:
            raise MissingParameterError(f"buffer {name!r} is not initialised") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping covering params and buffers (no copies)."""
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def copy(self) -> ParamStore:
        return self.astype(self.dtype)

    def astype(self, dtype) -> ParamStore:
        new = ParamStore(dtype)
        for name, t in self.params.items():
            new.add_param(name, t.data)
        for name, b in self.buffers.items():
            new.add_buffer(name, b)
        return new

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise MissingParameterError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            target = self.params[name].data if name in self.params else self.buffers[name]
            if target.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {target.shape}")
            target[...] = arr
