from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional


class ConfigError(ValueError):
    pass


@dataclass
class Ablations:
    fgc: bool = True
    dynamic: bool = True
    per_dim_graphs: bool = True
    ep: bool = True


@dataclass
class ModelConfig:
    """Architecture and training hyperparameters.

    Defaults follow the PEMS04 row of the published hyperparameter table
    (6 layers, batch 16, H 32, D 8, lr 1e-3). ``d`` and ``L`` are the kernel
    width and static-embedding width; ``d`` defaults to ``d_e``.
    """

    N: int = 307
    T: int = 12
    tau: int = 12
    H: int = 32
    num_layers: int = 6
    d_e: int = 8
    d: Optional[int] = None
    L: int = 8
    c_in: int = 1
    skip_dim: Optional[int] = None
    head_hidden: int = 256
    tod_slots: int = 1440
    dow_slots: int = 7
    per_channel_projection: bool = False
    lr: float = 0.001
    batch_size: int = 16
    epochs: int = 200
    patience: int = 15
    grad_clip: float = 5.0
    seed: int = 0
    ablations: Ablations = field(default_factory=Ablations)

    def __post_init__(self):
        if isinstance(self.ablations, dict):
            self.ablations = Ablations(**self.ablations)
        if self.d is None:
            self.d = self.d_e
        if self.skip_dim is None:
            self.skip_dim = self.H
        for name in ("N", "T", "tau", "H", "num_layers", "d_e", "d", "L", "c_in", "skip_dim",
                     "head_hidden", "tod_slots", "dow_slots", "batch_size", "epochs", "patience"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")

    @property
    def effective_L(self) -> int:
        return self.L if self.ablations.ep else self.H

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        abl = d.get("ablations", {})
        if isinstance(abl, dict):
            bad = set(abl) - {f.name for f in fields(Ablations)}
            if bad:
                raise ConfigError(f"unknown ablation flags: {sorted(bad)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def preset(cls, dataset: str, **overrides) -> "ModelConfig":
        """Hyperparameters reported for the four PEMS benchmarks."""
        try:
            layers, batch, H, D, lr, N = PRESETS[dataset.upper()]
        except KeyError:
            raise ConfigError(f"no preset for {dataset!r}; known: {sorted(PRESETS)}") from None
        base = dict(N=N, num_layers=layers, batch_size=batch, H=H, d_e=D, lr=lr)
        base.update(overrides)
        return cls(**base)


# dataset -> (STSGCL layers, batch size, H, D, learning rate, nodes)
PRESETS = {
    "PEMS03": (4, 16, 32, 8, 0.001, 358),
    "PEMS04": (6, 16, 32, 8, 0.001, 307),
    "PEMS07": (2, 16, 32, 10, 0.001, 883),
    "PEMS08": (4, 16, 32, 6, 0.001, 170),
}
