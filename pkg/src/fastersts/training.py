"""Mini-batch training with early stopping, evaluation by horizon, ablation variants."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint
from .config import ModelConfig
from .data import NormStats, WindowedSplit
from .model import FasterSTS, forward, mae_loss, metrics
from .tensor import NumericalError, Tape, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

HORIZONS = (3, 6, 12)


class TrainingError(ValueError):
    pass


class TrainingDiverged(NumericalError):
    pass


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data = p.data - self.lr * (m / c1) / denom


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    test: dict = field(default_factory=dict)
    stopped_early: bool = False

    def to_dict(self, wall_clock: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not wall_clock:
            for e in d["epochs"]:
                e.pop("wall_time_s", None)
        return d

    def to_json(self, wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(wall_clock), sort_keys=True, indent=2)


def predict(model: FasterSTS, split: WindowedSplit, stats: NormStats, batch_size: int = 64) -> np.ndarray:
    """De-normalized predictions [B, N, tau] for every window of ``split``."""
    out = []
    with no_grad():
        for b in split.iter_batches(batch_size):
            out.append(stats.denormalize(forward(model, b.x, b.tod, b.dow).data))
    return np.concatenate(out, axis=0)


def horizon_metrics(pred: np.ndarray, truth: np.ndarray, mask_zero: bool = True) -> dict:
    """Metrics at steps 3/6/12 (15/30/60 minutes at 5-minute sampling) and over all steps."""
    res = {f"horizon_{h}": metrics(pred[..., h - 1], truth[..., h - 1], mask_zero)
           for h in HORIZONS if h <= pred.shape[-1]}
    res["average"] = metrics(pred, truth, mask_zero)
    return res


def horizon_minutes(step: int, interval_minutes: int = 5) -> int:
    return step * interval_minutes


def evaluate(model: FasterSTS, split: WindowedSplit, stats: NormStats, batch_size: int = 64) -> dict:
    truth = split.all().y
    return horizon_metrics(predict(model, split, stats, batch_size), truth)


def train_step(model: FasterSTS, opt: Adam, batch, stats: NormStats, grad_clip: float) -> float:
    params = opt.params
    with Tape():
        pred = forward(model, batch.x, batch.tod, batch.dow)
        loss = mae_loss(pred, Tensor(stats.normalize(batch.y)))
        backward(loss)
    for name, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
    clip_grad_norm(params, grad_clip)
    opt.step()
    model.zero_grad()
    return loss.item()


def train(model: FasterSTS, train_split: WindowedSplit, val_split: WindowedSplit, stats: NormStats,
          test_split: Optional[WindowedSplit] = None, cfg: Optional[ModelConfig] = None,
          checkpoint_path=None) -> TrainReport:
    """Fit ``model`` in place and leave it holding the best-validation parameters."""
    cfg = cfg or model.cfg
    if len(train_split) == 0:
        raise TrainingError("training split is empty")
    if len(val_split) == 0:
        raise TrainingError("validation split is empty")

    opt = Adam(model.parameters(), lr=cfg.lr)
    report = TrainReport()
    best_state = model.state_dict()
    stale = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(train_split))
        losses, sizes = [], []
        for i, b in enumerate(train_split.iter_batches(cfg.batch_size, order)):
            try:
                losses.append(train_step(model, opt, b, stats, cfg.grad_clip))
            except NumericalError as exc:
                raise TrainingDiverged(f"epoch {epoch} batch {i}: {exc}") from exc
            sizes.append(len(b.y))
        train_loss = float(np.average(losses, weights=sizes))
        val = evaluate(model, val_split, stats)["average"]
        report.epochs.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "train_mae": train_loss * stats.std,
            "val_mae": val["mae"],
            "val_rmse": val["rmse"],
            "val_mape": val["mape_percent"],
            "wall_time_s": time.perf_counter() - t0,
        })
        logger.info("epoch %d train %.4f val mae %.4f", epoch, train_loss, val["mae"])
        if val["mae"] < report.best_val_mae:
            report.best_val_mae = val["mae"]
            report.best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                report.stopped_early = True
                break

    model.load_state_dict(best_state)
    if test_split is not None and len(test_split):
        report.test = evaluate(model, test_split, stats)
    if checkpoint_path is not None:
        checkpoint.save(checkpoint_path, model, stats.to_dict())
    return report


def apply_ablation(cfg: ModelConfig, **flags: bool) -> FasterSTS:
    """Build the model variant with the given ablation flags switched (fgc, dynamic, per_dim_graphs, ep)."""
    abl = dataclasses.replace(cfg.ablations, **flags)
    return FasterSTS(dataclasses.replace(cfg, ablations=abl))
