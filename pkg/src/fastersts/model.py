"""The full forecaster: input embedding, stacked STSG layers, skip fusion and output head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .config import ModelConfig
from .layer import LayerParams, glorot, layer_forward, zeros
from .tensor import (
    DimensionError,
    Tensor,
    abs_,
    add,
    embedding_lookup,
    matmul,
    mean_all,
    relu,
    reshape,
    sub,
    transpose_axes,
)


@dataclass
class InputEmbedding:
    value_proj: Tensor  # [C_in, H]
    value_bias: Tensor  # [H]
    tod_table: Tensor  # [tod_slots, H]
    dow_table: Tensor  # [dow_slots, H]
    pos_embed: Tensor  # [T, N, H]

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "InputEmbedding":
        b = 1.0 / math.sqrt(cfg.H)
        return cls(
            value_proj=glorot(rng, (cfg.c_in, cfg.H), cfg.c_in, cfg.H),
            value_bias=zeros(cfg.H),
            # zero rows stay neutral for slots the training range never visits
            tod_table=zeros(cfg.tod_slots, cfg.H),
            dow_table=zeros(cfg.dow_slots, cfg.H),
            pos_embed=Tensor(rng.uniform(-b, b, (cfg.T, cfg.N, cfg.H)), requires_grad=True),
        )


@dataclass
class FusionHead:
    skip_projs: list[Tensor]  # num_layers + 1 of [H, skip_dim]; index 0 is the embedded input
    head_w7: Tensor  # [T*skip_dim, head_hidden]
    head_b7: Tensor
    head_w8: Tensor  # [head_hidden, tau]
    head_b8: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "FusionHead":
        S = cfg.skip_dim
        flat = cfg.T * S
        return cls(
            skip_projs=[glorot(rng, (cfg.H, S), cfg.H, S) for _ in range(cfg.num_layers + 1)],
            head_w7=glorot(rng, (flat, cfg.head_hidden), flat, cfg.head_hidden),
            head_b7=zeros(cfg.head_hidden),
            head_w8=glorot(rng, (cfg.head_hidden, cfg.tau), cfg.head_hidden, cfg.tau),
            head_b8=zeros(cfg.tau),
        )


class FasterSTS:
    """Parameter container. The forward computation lives in :func:`forward`."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        a = cfg.ablations
        self.embedding = InputEmbedding.init(cfg, rng)
        self.layers = [
            LayerParams.init(cfg.N, cfg.T, cfg.H, cfg.d_e, cfg.effective_L, cfg.d, rng,
                             fgc=a.fgc, dynamic=a.dynamic, per_dim_graphs=a.per_dim_graphs,
                             ep=a.ep, per_channel_projection=cfg.per_channel_projection)
            for _ in range(cfg.num_layers)
        ]
        self.head = FusionHead.init(cfg, rng)
        self._check_names()

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        e = self.embedding
        yield "embedding.value_proj", e.value_proj
        yield "embedding.value_bias", e.value_bias
        yield "embedding.tod_table", e.tod_table
        yield "embedding.dow_table", e.dow_table
        yield "embedding.pos_embed", e.pos_embed
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"layers.{i}.")
        for i, w in enumerate(self.head.skip_projs):
            yield f"head.skip_projs.{i}", w
        yield "head.head_w7", self.head.head_w7
        yield "head.head_b7", self.head.head_b7
        yield "head.head_w8", self.head.head_w8
        yield "head.head_b8", self.head.head_b8

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in params.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{n}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _check_names(self):
        for name, p in self.named_parameters():
            p.name = name

    def __call__(self, x_raw, tod_idx, dow_idx) -> Tensor:
        return forward(self, x_raw, tod_idx, dow_idx)


def embed(emb: InputEmbedding, x_raw: Tensor, tod_idx, dow_idx) -> Tensor:
    """[B,T,N,C_in] raw values plus slot indices [B,T] -> node-major [B,N,T,H]."""
    B, T, N, _ = x_raw.shape
    H = emb.value_proj.shape[1]
    if emb.pos_embed.shape[:2] != (T, N):
        raise DimensionError(f"embed: input {x_raw.shape} does not match positional table {emb.pos_embed.shape}")
    tod_idx = np.asarray(tod_idx)
    dow_idx = np.asarray(dow_idx)
    if tod_idx.shape != (B, T) or dow_idx.shape != (B, T):
        raise DimensionError(f"embed: slot indices must be [{B},{T}], got {tod_idx.shape}/{dow_idx.shape}")
    h = add(matmul(x_raw, emb.value_proj), emb.value_bias)
    h = add(h, reshape(embedding_lookup(emb.tod_table, tod_idx), (B, T, 1, H)))
    h = add(h, reshape(embedding_lookup(emb.dow_table, dow_idx), (B, T, 1, H)))
    h = add(h, emb.pos_embed)
    return transpose_axes(h, (0, 2, 1, 3))


def fuse(head: FusionHead, reps: list[Tensor]) -> Tensor:
    """Sum of per-representation channel projections, [B,N,T,skip_dim]."""
    if len(reps) != len(head.skip_projs):
        raise DimensionError(f"fuse: {len(reps)} representations for {len(head.skip_projs)} projections")
    out = None
    for rep, w in zip(reps, head.skip_projs):
        term = matmul(rep, w)
        out = term if out is None else add(out, term)
    return out


def output_head(head: FusionHead, fused: Tensor) -> Tensor:
    B, N, T, S = fused.shape
    flat = reshape(fused, (B, N, T * S))
    hidden = relu(add(matmul(flat, head.head_w7), head.head_b7))
    return add(matmul(hidden, head.head_w8), head.head_b8)


def forward(model: FasterSTS, x_raw, tod_idx, dow_idx) -> Tensor:
    """Normalized inputs [B,T,N,C_in] -> normalized predictions [B,N,tau]."""
    cfg = model.cfg
    if not isinstance(x_raw, Tensor):
        x_raw = Tensor(x_raw)
    if x_raw.ndim != 4 or x_raw.shape[1:] != (cfg.T, cfg.N, cfg.c_in):
        raise DimensionError(f"forward: expected [B,{cfg.T},{cfg.N},{cfg.c_in}], got {x_raw.shape}")
    h = embed(model.embedding, x_raw, tod_idx, dow_idx)
    reps = [h]
    for layer in model.layers:
        h = layer_forward(layer, h)
        reps.append(h)
    return output_head(model.head, fuse(model.head, reps))


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mae_loss: prediction {pred.shape} vs target {target.shape}")
    return mean_all(abs_(sub(pred, target)))


MAPE_FLOOR = 1.0


def metrics(pred, target, mask_zero: bool = True) -> dict[str, Optional[float]]:
    """MAE, RMSE and MAPE (percent) on de-normalized values.

    With ``mask_zero`` entries whose true value is below 1.0 in magnitude are
    left out of MAPE. If every entry is masked, MAPE is ``None``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"metrics: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    mae = float(np.mean(np.abs(diff)))
    rmse = float(np.sqrt(np.mean(diff * diff)))
    keep = np.abs(target) >= MAPE_FLOOR if mask_zero else target != 0
    mape = float(np.mean(np.abs(diff[keep] / target[keep])) * 100.0) if keep.any() else None
    return {"mae": mae, "rmse": rmse, "mape_percent": mape}
