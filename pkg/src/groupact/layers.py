"""Small trainable building blocks shared by the adapter and relation modules."""

from __future__ import annotations

import numpy as np

from .autodiff import (Parameter, Tensor, add, concat_cols, gelu, layer_norm,
                       matmul, mul, row_softmax, slice_cols, transpose)
from .errors import ConfigError


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


class Linear:
    """Affine map x @ W + b with W of shape (d_in, d_out)."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int,
                 zero_init: bool = False):
        w = np.zeros((d_in, d_out)) if zero_init else xavier_uniform(rng, d_in, d_out)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros((1, d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def n_params(self) -> int:
        return self.weight.data.size + self.bias.data.size


class LayerNorm:
    """Row-wise layer norm with learned gain and bias."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones((1, dim)))
        self.bias = Parameter(np.zeros((1, dim)))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]

    def n_params(self) -> int:
        return self.gain.data.size + self.bias.data.size


class MultiHeadSelfAttention:
    """Standard multi-head self-attention over a set of row tokens.

    No positional encoding anywhere: token order is information-free, so
    the block is permutation-equivariant.
    """

    def __init__(self, rng: np.random.Generator, width: int, heads: int):
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.wq = Linear(rng, width, width)
        self.wk = Linear(rng, width, width)
        self.wv = Linear(rng, width, width)
        self.wo = Linear(rng, width, width)

    def __call__(self, x: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        """Returns (output, per-head attention matrices)."""
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        scale = 1.0 / np.sqrt(self.head_dim)
        outs, maps = [], []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = slice_cols(q, lo, hi)
            kh = slice_cols(k, lo, hi)
            vh = slice_cols(v, lo, hi)
            attn = row_softmax(mul(matmul(qh, transpose(kh)), scale))
            outs.append(matmul(attn, vh))
            maps.append(attn.data.copy())
        merged = outs[0] if self.heads == 1 else concat_cols(outs)
        return self.wo(merged), maps

    def parameters(self) -> list[Parameter]:
        ps = []
        for lin in (self.wq, self.wk, self.wv, self.wo):
            ps.extend(lin.parameters())
        return ps

    def n_params(self) -> int:
        return sum(lin.n_params() for lin in (self.wq, self.wk, self.wv, self.wo))


class FeedForward:
    """Two-layer GELU MLP."""

    def __init__(self, rng: np.random.Generator, width: int, hidden: int):
        self.lin1 = Linear(rng, width, hidden)
        self.lin2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(gelu(self.lin1(x)))

    def parameters(self) -> list[Parameter]:
        return self.lin1.parameters() + self.lin2.parameters()

    def n_params(self) -> int:
        return self.lin1.n_params() + self.lin2.n_params()
