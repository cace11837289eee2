"""Factorized (linear-time) adaptive graph operations and their dense reference."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    contract_nodes,
    reshape,
    softmax_columns,
    transpose_axes,
)


@dataclass
class AdaptiveGraphBank:
    """Global node embedding plus one local embedding per hidden channel.

    ``local`` is [H, N, d_e]; with a single shared local embedding it is [N, d_e]
    and every channel sees the same graph.
    """

    global_embedding: Tensor
    local: Tensor

    def __post_init__(self):
        N, d_e = self.global_embedding.shape
        if self.local.shape[-2:] != (N, d_e):
            raise DimensionError(
                f"local embeddings {self.local.shape} do not match global {self.global_embedding.shape}")
        if d_e >= N:
            warnings.warn(f"d_e={d_e} >= N={N}: factorized graph saves no work", stacklevel=3)

    @property
    def n_nodes(self) -> int:
        return self.global_embedding.shape[0]

    @property
    def d_e(self) -> int:
        return self.global_embedding.shape[1]

    @property
    def per_channel(self) -> bool:
        return self.local.ndim == 3

    @classmethod
    def init(cls, n_nodes: int, d_e: int, channels: Optional[int], rng: np.random.Generator):
        """Uniform init in [-1/sqrt(d_e), 1/sqrt(d_e)]; ``channels=None`` shares one local embedding."""
        bound = 1.0 / np.sqrt(d_e)
        E = rng.uniform(-bound, bound, (n_nodes, d_e))
        local_shape = (n_nodes, d_e) if channels is None else (channels, n_nodes, d_e)
        e = rng.uniform(-bound, bound, local_shape)
        return cls(Tensor(E, requires_grad=True), Tensor(e, requires_grad=True))


@dataclass
class FastProjection:
    """Learned d_e -> N map (a 1x1 convolution over the node-proxy axis)."""

    weight: Tensor  # [d_e, N] or [H, d_e, N]
    bias: Tensor  # [N]

    @classmethod
    def init(cls, d_e: int, n_nodes: int, rng: np.random.Generator, channels: Optional[int] = None):
        bound = np.sqrt(6.0 / (d_e + n_nodes))
        shape = (d_e, n_nodes) if channels is None else (channels, d_e, n_nodes)
        return cls(Tensor(rng.uniform(-bound, bound, shape), requires_grad=True),
                   Tensor(np.zeros(n_nodes), requires_grad=True))


def materialize_graphs(bank: AdaptiveGraphBank) -> Tensor:
    """A[h] = column-softmax(E + e_h), shape [H, N, d_e] (or [N, d_e] when shared)."""
    return softmax_columns(add(bank.local, bank.global_embedding))


def fast_aggregate(bank: AdaptiveGraphBank, x: Tensor) -> Tensor:
    """[B,N,T,H] -> [B,d_e,T,H] through the per-channel adaptive graphs."""
    if bank.per_channel and x.shape[3] != bank.local.shape[0]:
        raise DimensionError(f"fast_aggregate: x has {x.shape[3]} channels, bank has {bank.local.shape[0]}")
    return contract_nodes(materialize_graphs(bank), x)


def fast_project(p: FastProjection, agg: Tensor) -> Tensor:
    """[B,d_e,T,H] -> [B,N,T,H]: out[b,j,t,h] = sum_k W[k,j] agg[b,k,t,h] + bias[j]."""
    if p.weight.shape[-2] != agg.shape[1]:
        raise DimensionError(f"fast_project: weight {p.weight.shape} vs aggregated {agg.shape}")
    N = p.bias.shape[0]
    return add(contract_nodes(p.weight, agg), reshape(p.bias, (N, 1, 1)))


def dense_graph_apply(adj: Tensor, x: Tensor) -> Tensor:
    """Quadratic reference path: out[b,j,...] = sum_i adj[j,i] x[b,i,...]."""
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise DimensionError(f"dense_graph_apply: adjacency must be square, got {adj.shape}")
    return contract_nodes(transpose_axes(adj, (1, 0)), x)


def fast_operator(bank: AdaptiveGraphBank, p: FastProjection) -> np.ndarray:
    """Materialize the rank-d_e node operator of aggregate-then-project, one [N,N] per channel.

    Returns M with M[h, j, i] = sum_k W[k,j] A[h,i,k]; bias not included.
    """
    A = materialize_graphs(bank).data
    if A.ndim == 2:
        A = A[None]
    W = p.weight.data
    if W.ndim == 2:
        return np.einsum("kj,hik->hji", W, A)
    return np.einsum("hkj,hik->hji", W, A)


def flop_count(mode: str, N: int, d_e: int, T: int, H: int) -> int:
    """Multiply-add FLOPs for one node-mixing pass over a [N,T,H] signal."""
    if mode == "dense":
        return 2 * N * N * T * H
    if mode == "fast":
        return 2 * N * d_e * T * H + 2 * d_e * N * T * H
    raise ValueError(f"unknown mode {mode!r}; expected 'fast' or 'dense'")
