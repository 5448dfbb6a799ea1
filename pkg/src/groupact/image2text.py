"""Feature-to-text adapter: Linear -> transformer encoder -> Linear.

The first linear map carries actor features from the image width D1 to
the text-embedding width D2; the encoder mixes the N actors of a scene
through self-attention (action co-occurrence); the second linear map
carries the result back to D1 so it can re-enter the image-branch
relation machinery. The encoder output (width D2, before the second
linear) is the feature that gets distilled toward the teacher.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter, Tensor, add
from .errors import ConfigError, ShapeError
from .layers import FeedForward, LayerNorm, Linear, MultiHeadSelfAttention


class EncoderLayer:
    """Pre-norm transformer encoder layer: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, ffn_width: int):
        self.ln1 = LayerNorm(width)
        self.attn = MultiHeadSelfAttention(rng, width, heads)
        self.ln2 = LayerNorm(width)
        self.ffn = FeedForward(rng, width, ffn_width)

    def __call__(self, x: Tensor) -> tuple[Tensor, list[np.ndarray]]:
        mixed, maps = self.attn(self.ln1(x))
        x = add(x, mixed)
        x = add(x, self.ffn(self.ln2(x)))
        return x, maps

    def parameters(self) -> list[Parameter]:
        return (self.ln1.parameters() + self.attn.parameters()
                + self.ln2.parameters() + self.ffn.parameters())

    def n_params(self) -> int:
        return (self.ln1.n_params() + self.attn.n_params()
                + self.ln2.n_params() + self.ffn.n_params())


class Image2TextAdapter:
    """Linear1 (D1->D2), L pre-norm encoder layers at width D2, Linear2 (D2->D1)."""

    def __init__(self, rng: np.random.Generator, d_image: int, d_text: int,
                 layers: int = 6, heads: int = 4, ffn_width: int | None = None):
        if layers < 0:
            raise ConfigError(f"encoder layer count must be >= 0, got {layers}")
        self.d_image = d_image
        self.d_text = d_text
        self.heads = heads
        self.ffn_width = 4 * d_text if ffn_width is None else ffn_width
        self.linear1 = Linear(rng, d_image, d_text)
        self.encoder_layers = [EncoderLayer(rng, d_text, heads, self.ffn_width)
                               for _ in range(layers)]
        self.linear2 = Linear(rng, d_text, d_image)
        # per-layer lists of per-head attention matrices from the last call
        self.last_attention: list[list[np.ndarray]] = []

    def forward(self, actor_features: Tensor) -> tuple[Tensor, Tensor]:
        """Map N actor rows to (distill_features N x D2, branch_features N x D1)."""
        if actor_features.cols != self.d_image:
            raise ShapeError(
                f"adapter expects width {self.d_image}, got {actor_features.shape}")
        h = self.linear1(actor_features)
        self.last_attention = []
        for layer in self.encoder_layers:
            h, maps = layer(h)
            self.last_attention.append(maps)
        return h, self.linear2(h)

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        ps = self.linear1.parameters()
        for layer in self.encoder_layers:
            ps.extend(layer.parameters())
        ps.extend(self.linear2.parameters())
        return ps

    def count_parameters(self) -> int:
        """Exact count of every weight and bias in the adapter."""
        return (self.linear1.n_params()
                + sum(layer.n_params() for layer in self.encoder_layers)
                + self.linear2.n_params())
