"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, ShapeError

PAPER_LEARNING_RATE = 1e-8
DEFAULT_LEARNING_RATE = 1e-3  # desk scale; PAPER_LEARNING_RATE makes no visible progress here


@dataclass
class AdamState:
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict:
        """Flatten into named arrays for the parameter file format."""
        out = {
            "adam.step": np.asarray(float(self.step)),
            "adam.hyper": np.array([self.lr, self.beta1, self.beta2, self.eps]),
        }
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict) -> "AdamState":
        lr, b1, b2, eps = (float(v) for v in arrays["adam.hyper"])
        st = cls(lr, b1, b2, eps, int(arrays["adam.step"]))
        for key, val in arrays.items():
            if key.startswith("adam.m."):
                st.m[key[len("adam.m."):]] = np.array(val)
            elif key.startswith("adam.v."):
                st.v[key[len("adam.v."):]] = np.array(val)
        return st


def adam_step(params: dict, state: AdamState) -> None:
    """Update every tensor in ``params`` (name -> Tensor) in place from its ``grad``."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient of {name} has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
