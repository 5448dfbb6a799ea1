"""Interaction relation modules with optional low-rank adapter injection.

Two relation kinds are provided. The attention kind runs one shared
self-attention block over actors within a frame (spatial) and over
frames per actor (temporal); with ``dual_path`` both orders
(spatial-then-temporal and temporal-then-spatial) run and are averaged.
The graph kind builds a similarity adjacency over all actor-frame tokens
and applies two graph convolutions.

A low-rank adapter adds a trainable residual alpha * B @ A next to a
frozen base weight: F(x) = W0(x) + alpha*B(A(x)). For the attention kind
the adapted matrices are exactly the Q, K and V projections, shared by
every pass of both paths; for the graph kind every linear map is
adapted. Either way the module carries exactly three adapted square
matrices, so the trainable count is 3*r*2M at width M.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (Parameter, Tensor, add, concat_rows, gather_rows, gelu,
                       matmul, mul, row_softmax, transpose)
from .errors import ConfigError, EmptyBatchError, ShapeError, StateError
from .layers import LayerNorm, Linear


class LowRankAdapter:
    """Trainable residual alpha * B @ A beside a frozen base weight W0.

    A is (r, M_in) with small uniform init; B is (M_out, r) and starts at
    zero, so an adapter changes nothing until trained. The base weight is
    treated as a constant here: gradients reach only A and B.
    """

    def __init__(self, rng: np.random.Generator, base: Parameter, r: int, alpha: float):
        m_in, m_out = base.shape
        if r < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {r}")
        if r > min(m_in, m_out):
            raise ConfigError(f"adapter rank {r} exceeds base shape {base.shape}")
        bound = 1.0 / np.sqrt(r)
        self.base = base
        self.r = r
        self.alpha = float(alpha)
        self.A = Parameter(rng.uniform(-bound, bound, size=(r, m_in)))
        self.B = Parameter(np.zeros((m_out, r)))

    @property
    def m_in(self) -> int:
        return self.base.shape[0]

    @property
    def m_out(self) -> int:
        return self.base.shape[1]

    def trainable_count(self) -> int:
        return self.r * (self.m_in + self.m_out)


def adapted_apply(adapter: LowRankAdapter, x: Tensor) -> Tensor:
    """W0(x) + alpha * B(A(x)) on row features; no gradient into W0."""
    if x.cols != adapter.m_in:
        raise ShapeError(
            f"adapted_apply expects width {adapter.m_in}, got {x.shape}")
    base_out = matmul(x, Tensor(adapter.base.data))
    residual = matmul(matmul(x, transpose(adapter.A)), transpose(adapter.B))
    return add(base_out, mul(residual, adapter.alpha))


class AdaptedLinear:
    """Linear map whose weight can carry a low-rank adapter."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.linear = Linear(rng, d_in, d_out)
        self.adapter: LowRankAdapter | None = None

    @property
    def weight(self) -> Parameter:
        return self.linear.weight

    @property
    def bias(self) -> Parameter:
        return self.linear.bias

    def attach(self, rng: np.random.Generator, r: int, alpha: float) -> LowRankAdapter:
        self.adapter = LowRankAdapter(rng, self.linear.weight, r, alpha)
        return self.adapter

    def apply(self, x: Tensor, use_adapter: bool) -> Tensor:
        if use_adapter and self.adapter is not None:
            return add(adapted_apply(self.adapter, x), self.linear.bias)
        return self.linear(x)


class RelationModule:
    """Actor interaction relation module (attention or graph-conv kind)."""

    KINDS = ("attention", "graph")

    def __init__(self, rng: np.random.Generator, kind: str, width: int,
                 dual_path: bool = True):
        if kind not in self.KINDS:
            raise ConfigError(f"relation kind must be one of {self.KINDS}, got {kind!r}")
        self.kind = kind
        self.width = width
        self.dual_path = dual_path
        if kind == "attention":
            self.ln = LayerNorm(width)
            self.wq = AdaptedLinear(rng, width, width)
            self.wk = AdaptedLinear(rng, width, width)
            self.wv = AdaptedLinear(rng, width, width)
            self.wo = AdaptedLinear(rng, width, width)
            self._adapted = (self.wq, self.wk, self.wv)
            self._maps_own = (self.wq, self.wk, self.wv, self.wo)
        else:
            self.we = AdaptedLinear(rng, width, width)
            self.w1 = AdaptedLinear(rng, width, width)
            self.w2 = AdaptedLinear(rng, width, width)
            self._adapted = (self.we, self.w1, self.w2)
            self._maps_own = self._adapted

    def attach_adapters(self, rng: np.random.Generator, r: int, alpha: float) -> None:
        for lin in self._adapted:
            lin.attach(rng, r, alpha)

    @property
    def adapters(self) -> list[LowRankAdapter]:
        return [lin.adapter for lin in self._adapted if lin.adapter is not None]

    def count_trainable(self) -> int:
        """Adapter parameter count: sum of r*(M_in + M_out) over adapted maps."""
        adapters = self.adapters
        if not adapters:
            raise StateError("count_trainable requires attached adapters")
        return sum(a.trainable_count() for a in adapters)

    def base_parameters(self) -> list[Parameter]:
        ps = []
        if self.kind == "attention":
            ps.extend(self.ln.parameters())
        for lin in self._maps_own:
            ps.extend([lin.weight, lin.bias])
        return ps

    def adapter_parameters(self) -> list[Parameter]:
        ps = []
        for a in self.adapters:
            ps.extend([a.A, a.B])
        return ps

    # -- forward ---------------------------------------------------------

    def _attend(self, x: Tensor, use_adapters: bool) -> tuple[Tensor, np.ndarray]:
        h = self.ln(x)
        q = self.wq.apply(h, use_adapters)
        k = self.wk.apply(h, use_adapters)
        v = self.wv.apply(h, use_adapters)
        scores = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(self.width))
        attn = row_softmax(scores)
        y = self.wo.apply(matmul(attn, v), use_adapters)
        return add(x, y), attn.data.copy()

    def _axis_pass(self, x: Tensor, n_actors: int, n_frames: int, axis: str,
                   use_adapters: bool, path: str,
                   maps: dict[str, np.ndarray]) -> Tensor:
        """One attention pass along an axis of the frame-major token block.

        Rows are ordered frame-major: token (frame f, actor n) sits at row
        f * n_actors + n. "spatial" attends within each frame, "temporal"
        within each actor's timeline.
        """
        if axis == "spatial":
            groups = [(f"frame{f}", np.arange(f * n_actors, (f + 1) * n_actors))
                      for f in range(n_frames)]
        else:
            groups = [(f"actor{n}", np.arange(n, n_frames * n_actors, n_actors))
                      for n in range(n_actors)]
        outs = []
        order = []
        for key, idx in groups:
            block = gather_rows(x, idx) if len(groups) > 1 else x
            y, attn = self._attend(block, use_adapters)
            outs.append(y)
            order.extend(idx.tolist())
            maps[f"{path}/{axis}/{key}"] = attn
        if len(outs) == 1:
            return outs[0]
        stacked = concat_rows(outs)
        inverse = np.empty(len(order), dtype=np.intp)
        inverse[np.asarray(order)] = np.arange(len(order))
        return gather_rows(stacked, inverse)

    def forward(self, features: Tensor, n_actors: int, n_frames: int,
                use_adapters: bool = False) -> tuple[Tensor, dict[str, np.ndarray]]:
        """Refine an (n_frames * n_actors) x width token block.

        Returns the refined block in the same row order plus the
        attention/adjacency maps keyed by (path, stage, group).
        """
        if n_actors < 1 or n_frames < 1:
            raise EmptyBatchError(f"need at least one actor and one frame, got {n_actors}x{n_frames}")
        if features.rows != n_actors * n_frames or features.cols != self.width:
            raise ShapeError(
                f"expected ({n_actors * n_frames}, {self.width}) features, got {features.shape}")
        if use_adapters and not self.adapters:
            raise StateError("use_adapters=True but no adapters attached")
        maps: dict[str, np.ndarray] = {}
        if self.kind == "graph":
            return self._graph_forward(features, use_adapters, maps), maps
        st = self._axis_pass(features, n_actors, n_frames, "spatial", use_adapters, "st", maps)
        st = self._axis_pass(st, n_actors, n_frames, "temporal", use_adapters, "st", maps)
        if not self.dual_path:
            return st, maps
        ts = self._axis_pass(features, n_actors, n_frames, "temporal", use_adapters, "ts", maps)
        ts = self._axis_pass(ts, n_actors, n_frames, "spatial", use_adapters, "ts", maps)
        return mul(add(st, ts), 0.5), maps

    def _graph_forward(self, x: Tensor, use_adapters: bool,
                       maps: dict[str, np.ndarray]) -> Tensor:
        emb = self.we.apply(x, use_adapters)
        adj = row_softmax(mul(matmul(emb, transpose(emb)), 1.0 / np.sqrt(self.width)))
        maps["graph/adjacency/all"] = adj.data.copy()
        h = gelu(self.w1.apply(matmul(adj, x), use_adapters))
        h = self.w2.apply(matmul(adj, h), use_adapters)
        return add(x, h)

    __call__ = forward
