"""Parameters with attached gradient/Adam state, and the Adam update."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Parameter:
    """A trainable tensor with its gradient and Adam moment buffers."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    m1: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    step_count: int = 0
    frozen_rows: tuple = ()

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        for name in ("grad", "m1", "m2"):
            buf = getattr(self, name)
            if buf is None:
                setattr(self, name, np.zeros_like(self.value))
            elif buf.shape != self.value.shape:
                raise ValueError(
                    f"{name} shape {buf.shape} != value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self):
        return Parameter(self.value.copy(), self.grad.copy(), self.m1.copy(),
                         self.m2.copy(), self.step_count, self.frozen_rows)


def adam_step(param, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one bias-corrected Adam update in place and zero the gradient.

    Rows listed in ``param.frozen_rows`` (the padding row of an embedding
    table) never move.
    """
    g = param.grad
    if param.frozen_rows:
        g[list(param.frozen_rows)] = 0.0
    param.step_count += 1
    t = param.step_count
    param.m1 *= beta1
    param.m1 += (1.0 - beta1) * g
    param.m2 *= beta2
    param.m2 += (1.0 - beta2) * (g * g)
    m_hat = param.m1 / (1.0 - beta1 ** t)
    v_hat = param.m2 / (1.0 - beta2 ** t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param.zero_grad()
    return param
