"""Spatio-temporal synchronous graph convolution layer.

Shapes used throughout: B batch, N nodes, T input steps, H hidden channels,
d_e adaptive-graph width, d kernel width, L static-embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from .graph import (
    AdaptiveGraphBank,
    FastProjection,
    dense_graph_apply,
    fast_aggregate,
    fast_project,
    materialize_graphs,
)
from .tensor import (
    DimensionError,
    Tensor,
    add,
    hadamard,
    layernorm,
    matmul,
    relu,
    reshape,
    softmax_columns,
    transpose_axes,
)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class StsgKernelParams:
    upsilon: Tensor  # [T, L, d]; [T, H, d] when the EP maps are disabled
    dyn_w: Tensor  # [K, d], K = d_e (fast graphs) or N (dense graphs)
    out_w: Tensor  # [d, T*H]
    out_b: Tensor  # [T*H]
    ep_w2: Optional[Tensor] = None  # [T*H, T*L]
    ep_b2: Optional[Tensor] = None
    ep_w3: Optional[Tensor] = None  # [T*H, T*H]
    ep_b3: Optional[Tensor] = None
    dynamic: bool = True

    @property
    def use_ep(self) -> bool:
        return self.ep_w2 is not None

    @classmethod
    def init(cls, T, H, L, d, K, rng, ep=True, dynamic=True):
        TH = T * H
        if not ep:
            L = H
        bound = 1.0 / np.sqrt(d)
        k = cls(
            upsilon=Tensor(rng.uniform(-bound, bound, (T, L, d)), requires_grad=True),
            dyn_w=glorot(rng, (K, d), K, d),
            out_w=glorot(rng, (d, TH), d, TH),
            out_b=zeros(TH),
            dynamic=dynamic,
        )
        if ep:
            k.ep_w2 = glorot(rng, (TH, T * L), T * L, TH)
            k.ep_b2 = zeros(TH)
            k.ep_w3 = glorot(rng, (TH, TH), TH, TH)
            k.ep_b3 = zeros(TH)
        return k


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_w4: Tensor
    ffn_b4: Tensor
    ffn_w5: Tensor
    ffn_b5: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    inter_w6: Tensor
    inter_b6: Tensor
    kernel: StsgKernelParams
    bank: Optional[AdaptiveGraphBank] = None
    proj: Optional[FastProjection] = None
    dense_logits: Optional[Tensor] = None  # [N, N], replaces bank+proj when the fast path is off

    @classmethod
    def init(cls, N, T, H, d_e, L, d, rng, *, fgc=True, dynamic=True, per_dim_graphs=True,
             ep=True, per_channel_projection=False):
        if fgc:
            bank = AdaptiveGraphBank.init(N, d_e, H if per_dim_graphs else None, rng)
            proj = FastProjection.init(d_e, N, rng, H if per_channel_projection else None)
            dense_logits = None
            K = d_e
        else:
            bank = proj = None
            dense_logits = Tensor(rng.uniform(-1.0, 1.0, (N, N)) / np.sqrt(N), requires_grad=True)
            K = N
        return cls(
            ln1_gain=ones(H), ln1_bias=zeros(H),
            ffn_w4=glorot(rng, (H, H), H, H), ffn_b4=zeros(H),
            ffn_w5=glorot(rng, (H, H), H, H), ffn_b5=zeros(H),
            ln2_gain=ones(H), ln2_bias=zeros(H),
            inter_w6=glorot(rng, (H, H), H, H), inter_b6=zeros(H),
            kernel=StsgKernelParams.init(T, H, L, d, K, rng, ep=ep, dynamic=dynamic),
            bank=bank, proj=proj, dense_logits=dense_logits,
        )

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                yield prefix + f.name, v
            elif v is not None:
                for g in fields(v):
                    sub = getattr(v, g.name)
                    if isinstance(sub, Tensor):
                        yield f"{prefix}{f.name}.{g.name}", sub


def static_kernel_part(k: StsgKernelParams) -> Tensor:
    """Input-independent factor of the kernel, [T*H, d]."""
    T, L, d = k.upsilon.shape
    ups = reshape(k.upsilon, (T * L, d))
    if not k.use_ep:
        return ups
    TH = k.ep_w2.shape[0]
    hidden = relu(add(matmul(k.ep_w2, ups), reshape(k.ep_b2, (TH, 1))))
    return add(matmul(k.ep_w3, hidden), reshape(k.ep_b3, (TH, 1)))


def _time_channel_rows(signal: Tensor) -> Tensor:
    """[B,K,T,H] -> [B,T*H,K] with row index t*H + h."""
    B, K, T, H = signal.shape
    return reshape(transpose_axes(signal, (0, 2, 3, 1)), (B, T * H, K))


def dynamic_kernel_part(k: StsgKernelParams, agg: Tensor, static: Optional[Tensor] = None) -> Tensor:
    """Per-sample factor Z = (agg_r @ dyn_w) * static, [B, T*H, d]."""
    if agg.shape[1] != k.dyn_w.shape[0]:
        raise DimensionError(f"dynamic_kernel_part: signal width {agg.shape[1]} != dyn_w {k.dyn_w.shape}")
    if static is None:
        static = static_kernel_part(k)
    x_prime = matmul(_time_channel_rows(agg), k.dyn_w)
    return hadamard(x_prime, static)


def build_kernel(k: StsgKernelParams, agg: Tensor) -> Tensor:
    """Column-softmax kernel over the T*H axis; [B,T*H,d], or [T*H,d] without the dynamic part."""
    static = static_kernel_part(k)
    if not k.dynamic:
        return softmax_columns(static)
    return softmax_columns(dynamic_kernel_part(k, agg, static))


def dense_adjacency(layer: LayerParams) -> Tensor:
    """Learned N x N operator for the dense variant: adj[j, i] = softmax_i(logits[i, j])."""
    return transpose_axes(softmax_columns(layer.dense_logits), (1, 0))


def spatial_step(layer: LayerParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """Node mixing; returns (mixed signal [B,N,T,H], signal consumed by the dynamic kernel)."""
    if layer.dense_logits is not None:
        x_hat = dense_graph_apply(dense_adjacency(layer), x)
        return x_hat, x_hat
    agg = fast_aggregate(layer.bank, x)
    return fast_project(layer.proj, agg), agg


def stsg_convolve(layer: LayerParams, x: Tensor) -> Tensor:
    B, N, T, H = x.shape
    x_hat, agg = spatial_step(layer, x)
    psi = build_kernel(layer.kernel, agg)
    x_bar = matmul(reshape(x_hat, (B, N, T * H)), psi)  # [B,N,d]
    stg = add(matmul(x_bar, layer.kernel.out_w), layer.kernel.out_b)
    return reshape(stg, (B, N, T, H))


def layer_forward(layer: LayerParams, x: Tensor) -> Tensor:
    """STSG convolution, two residual+layernorm sublayers, then the inter-layer residual."""
    x1 = layernorm(add(stsg_convolve(layer, x), x), layer.ln1_gain, layer.ln1_bias)
    ffn = add(matmul(relu(add(matmul(x1, layer.ffn_w4), layer.ffn_b4)), layer.ffn_w5), layer.ffn_b5)
    x2 = layernorm(add(ffn, x1), layer.ln2_gain, layer.ln2_bias)
    return add(add(matmul(x2, layer.inter_w6), layer.inter_b6), x2)


def kernel_flop_count(mode: str, N: int, T: int, H: int, d: int) -> int:
    """FLOPs of the per-node kernel contraction (factorized through d, or a dense T*H square)."""
    TH = T * H
    if mode == "factorized":
        return 2 * N * (TH * d + d * TH)
    if mode == "dense":
        return 2 * N * TH * TH
    raise ValueError(f"unknown mode {mode!r}; expected 'factorized' or 'dense'")


def graph_columns_stochastic(layer: LayerParams) -> Tensor:
    """The column-stochastic node graphs of this layer (for invariant checks)."""
    if layer.dense_logits is not None:
        return softmax_columns(layer.dense_logits)
    return materialize_graphs(layer.bank)
