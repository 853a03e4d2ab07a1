"""Named trainable parameters and the Adam optimizer."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, NonFiniteError


class ParamSet:
    """Ordered map of name -> leaf Tensor (weights and biases).

    Single writer during a training step; forward passes may share a
    ParamSet read-only across threads.
    """

    def __init__(self, version: int = 0):
        self._params: dict[str, Tensor] = {}
        self.version = version

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def set_trainable(self, flag: bool):
        """Toggle gradient collection (freeze during the other net's update)."""
        for t in self._params.values():
            t.requires_grad = bool(flag)

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet(version=self.version)
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype))
        return out

    def copy(self) -> "ParamSet":
        out = ParamSet(version=self.version)
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def load_arrays(self, arrays: dict):
        """Overwrite values in place from a name -> ndarray map."""
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter {name!r}")
            src = np.asarray(arrays[name])
            if src.shape != t.data.shape:
                raise DimensionError(f"parameter {name!r}: shape {src.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(src.astype(t.data.dtype))


def grad(loss: Tensor, params: ParamSet) -> dict:
    """Backpropagate a scalar loss; return d(loss)/d(p) for every parameter.

    Parameters the loss does not depend on get zero gradients. The tape is
    consumed: leaves keep their .grad, intermediate state is released.
    """
    params.zero_grad()
    loss.backward()
    out = {}
    for name, t in params.items():
        out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return out


@dataclass
class AdamState:
    """Moment estimates for one ParamSet."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, lr: float, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        for name, tensor in params.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state


def adam_step(params: ParamSet, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place; increments state.t."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {tensor.data.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"NaN/Inf gradient for parameter {name!r} at step {state.t}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data = tensor.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    params.version += 1
