"""Parameterized building blocks: linear layers, MLPs, layer normalization."""

import numpy as np

from .tensor import Tensor, gelu, layer_norm


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


class Linear:
    """y = x @ W + b over the trailing axis."""

    def __init__(self, rng, in_width, out_width, zero_init=False):
        if zero_init:
            w = np.zeros((in_width, out_width))
        else:
            w = glorot_uniform(rng, in_width, out_width)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_width), requires_grad=True)

    @property
    def in_width(self):
        return self.W.shape[0]

    def __call__(self, x):
        if x.ndim > 2:
            # one big dgemm beats a stack of small batched ones
            flat = x.reshape(-1, x.shape[-1])
            return (flat @ self.W + self.b).reshape(x.shape[:-1] + (self.W.shape[1],))
        return x @ self.W + self.b

    def parameters(self, prefix):
        return [(f"{prefix}.W", self.W), (f"{prefix}.b", self.b)]


class MLP:
    """Stack of linear layers with GELU between them (none after the last).

    `widths` lists every layer width including input and output, e.g.
    [2, 64, 64, 64] is a three-layer perceptron.
    """

    def __init__(self, rng, widths, zero_init_last=False):
        self.layers = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            self.layers.append(Linear(rng, a, b, zero_init=zero_init_last and last))

    @property
    def in_width(self):
        return self.layers[0].in_width

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x

    def parameters(self, prefix):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.parameters(f"{prefix}.L{i}"))
        return out


class LayerNorm:
    """Per-token normalization over the trailing axis with learned affine."""

    def __init__(self, width, eps=1e-6):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, eps=self.eps)

    def parameters(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]
