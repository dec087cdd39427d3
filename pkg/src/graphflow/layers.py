"""Parameter containers shared by the matching network and the graph stage."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d


def he_std(fan_in: int, gain: str = "relu") -> float:
    """Kaiming-style init scale; 'linear' halves the variance."""
    base = 2.0 if gain == "relu" else 1.0
    return float(np.sqrt(base / fan_in))


class Conv2d:
    """A conv layer owning its weight and bias tensors.

    Biases start at zero so freshly built gates and heads produce
    reproducible, data-independent values.
    """

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, k: int,
                 *, stride: int = 1, padding: int | None = None,
                 bias: bool = True, gain: str = "relu"):
        std = he_std(cin * k * k, gain)
        self.w = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def register(self, params: dict, prefix: str) -> None:
        params[f"{prefix}.w"] = self.w
        if self.b is not None:
            params[f"{prefix}.b"] = self.b


def linear_pair(rng: np.random.Generator, out_dim: int, in_dim: int,
                gain: str = "relu") -> tuple[Tensor, Tensor]:
    """Weight (out, in) and zero bias (out,) for a dense map."""
    w = Tensor(rng.normal(0.0, he_std(in_dim, gain), size=(out_dim, in_dim)),
               requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True)
    return w, b
