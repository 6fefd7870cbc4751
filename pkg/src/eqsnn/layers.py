"""Feed-forward building blocks shared by the regression networks.

Block structure between affine layers is fixed project-wide: linear ->
group normalization -> parametric ReLU -> dropout. The final layer of a
stack stays purely affine so outputs are unbounded regression values.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def fitting_group_count(width: int, cap: int) -> int:
    """Largest divisor of ``width`` not exceeding ``cap``.

    The canonical layer schedule contains widths (220, 170, ...) that the
    nominal group count of 8 does not divide, so each layer falls back to
    the nearest feasible grouping.
    """
    for g in range(min(cap, width), 0, -1):
        if width % g == 0:
            return g
    return 1


class Affine:
    """y = x W + b with Glorot-uniform W and zero b."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.n_in = n_in
        self.n_out = n_out
        self.weight = ad.glorot_uniform(rng, n_in, n_out)
        self.bias = ad.zeros((n_out,))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}


class FeedForward:
    """Affine stack with norm/activation/dropout between layers.

    dims: full width schedule, input first. ``dims=[8, 32, 1]`` builds two
    affine layers with one normalized PReLU block between them.
    norm_groups=0 disables normalization entirely (plain affine + PReLU).
    """

    def __init__(self, dims: list[int], rng: np.random.Generator, *,
                 norm_groups: int = 8, norm_eps: float = 1e-5,
                 dropout_rate: float = 0.15, prelu_init: float = 0.25):
        if len(dims) < 2:
            raise ValueError("need at least input and output widths")
        self.dims = list(dims)
        self.norm_eps = float(norm_eps)
        self.dropout_rate = float(dropout_rate)
        self.use_norm = norm_groups > 0
        self.layers = [Affine(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        # one slope per hidden block, shared across that block's channels
        self.slopes = [Tensor(prelu_init, requires_grad=True)
                       for _ in self.layers[:-1]]
        hidden = dims[1:-1] if self.use_norm else []
        self.norm_groups = [fitting_group_count(w, norm_groups) for w in hidden]
        self.norm_gain = [Tensor(np.ones(w), requires_grad=True) for w in hidden]
        self.norm_bias = [ad.zeros((w,)) for w in hidden]

    def __call__(self, x: Tensor, *, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i == last:
                break
            if self.use_norm:
                h = ad.group_norm(h, self.norm_groups[i], self.norm_eps)
                h = h * self.norm_gain[i] + self.norm_bias[i]
            h = ad.prelu(h, self.slopes[i])
            if training and self.dropout_rate > 0.0:
                h = ad.dropout(h, self.dropout_rate, rng, training=True)
        return h

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}layer{i}."))
            if i < len(self.layers) - 1:
                out[f"{prefix}block{i}.slope"] = self.slopes[i]
                if self.use_norm:
                    out[f"{prefix}block{i}.gain"] = self.norm_gain[i]
                    out[f"{prefix}block{i}.shift"] = self.norm_bias[i]
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def load_named(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into live parameters, by name."""
    for name, tensor in params.items():
        arr = values[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{arr.shape} vs {tensor.data.shape}")
        tensor.data = np.asarray(arr, dtype=np.float64)
