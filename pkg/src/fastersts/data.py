"""Traffic series ingestion, cleaning, sliding windows and the synthetic generator."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, NamedTuple, Optional

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class SidecarError(DataError):
    pass


# name -> nodes, edges, time steps, span, missing ratio (%), interval minutes
PEMS_DATASETS = {
    "PEMS03": dict(nodes=358, edges=866, steps=26208, span=("2018-09-01", "2018-11-30"), missing_pct=0.672),
    "PEMS04": dict(nodes=307, edges=340, steps=16992, span=("2018-01-01", "2018-02-28"), missing_pct=3.182),
    "PEMS07": dict(nodes=883, edges=340, steps=28224, span=("2017-05-01", "2017-08-31"), missing_pct=0.452),
    "PEMS08": dict(nodes=170, edges=277, steps=17856, span=("2016-07-01", "2016-08-31"), missing_pct=0.696),
}


@dataclass(frozen=True)
class TrafficDataset:
    values: np.ndarray  # [S, N]
    interval_minutes: int
    start: datetime
    name: str

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    def slot_indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Minute-of-day slot (0..1439) and weekday (Monday=0) for every step."""
        minutes = self.start.hour * 60 + self.start.minute + np.arange(self.n_steps) * self.interval_minutes
        tod = (minutes % 1440).astype(np.int64)
        dow = ((self.start.weekday() + minutes // 1440) % 7).astype(np.int64)
        return tod, dow


def parse_start(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        raise SidecarError(f"start {text!r} is not an RFC3339 timestamp") from None


def _read_sidecar(meta_path: Path) -> dict:
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SidecarError(f"sidecar {meta_path} not found") from None
    for key in ("name", "interval_minutes", "start"):
        if key not in meta:
            raise SidecarError(f"sidecar {meta_path} is missing field {key!r}")
    return meta


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return s.strip() == ""
    return True


def load_csv(path, meta_path=None) -> TrafficDataset:
    """Rows are time steps, columns are nodes. Blank cells load as NaN.

    ``meta_path`` defaults to the CSV path with a ``.json`` suffix.
    """
    path = Path(path)
    meta = _read_sidecar(Path(meta_path) if meta_path else path.with_suffix(".json"))
    rows = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
            try:
                rows.append([float(c) if c.strip() else math.nan for c in row])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.array(rows, dtype=np.float64)
    sentinel = meta.get("missing_sentinel")
    if sentinel is not None:
        values[values == float(sentinel)] = np.nan
    return TrafficDataset(values, int(meta["interval_minutes"]), parse_start(str(meta["start"])),
                          str(meta["name"]))


def write_rows(ds: TrafficDataset, fh) -> None:
    """``n0,n1,...`` header, then one row per step with round-trippable floats."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([f"n{i}" for i in range(ds.n_nodes)])
    for row in ds.values:
        w.writerow([repr(float(v)) for v in row])


def write_csv(ds: TrafficDataset, path) -> None:
    """CSV plus the JSON sidecar next to it."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_rows(ds, fh)
    meta = {"name": ds.name, "interval_minutes": ds.interval_minutes, "start": ds.start.isoformat()}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def convert_npz(npz_path, csv_path, start: str, interval_minutes: int = 5, channel: int = 0,
                name: Optional[str] = None) -> TrafficDataset:
    """Convert the common ``data`` [S, N, C] archive layout to CSV + sidecar."""
    with np.load(npz_path) as z:
        arr = z["data"]
    values = arr[..., channel] if arr.ndim == 3 else arr
    ds = TrafficDataset(np.asarray(values, dtype=np.float64), interval_minutes, parse_start(start),
                        name or Path(npz_path).stem)
    write_csv(ds, csv_path)
    return ds


def clean(ds: TrafficDataset) -> TrafficDataset:
    """Linear interpolation in time over NaN and negative cells; edges take the nearest valid value."""
    values = ds.values.copy()
    bad = ~np.isfinite(values) | (values < 0)
    if not bad.any():
        return replace(ds, values=values)
    steps = np.arange(ds.n_steps)
    for j in np.flatnonzero(bad.any(axis=0)):
        ok = ~bad[:, j]
        if not ok.any():
            raise DataError(f"node {j} has no valid observations")
        values[bad[:, j], j] = np.interp(steps[bad[:, j]], steps[ok], values[ok, j])
    return replace(ds, values=values)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}


class Batch(NamedTuple):
    x: np.ndarray  # [B, T, N, 1], normalized
    y: np.ndarray  # [B, N, tau], raw units
    tod: np.ndarray  # [B, T]
    dow: np.ndarray  # [B, T]


class WindowedSplit:
    """Sliding windows over a shared series; samples are materialized per batch."""

    def __init__(self, raw: np.ndarray, normed: np.ndarray, tod: np.ndarray, dow: np.ndarray,
                 starts: np.ndarray, T: int, tau: int, role: str):
        self._raw = raw
        self._normed = normed
        self._tod = tod
        self._dow = dow
        self.starts = starts
        self.T = T
        self.tau = tau
        self.role = role

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, indices) -> Batch:
        s = self.starts[np.asarray(indices, dtype=np.int64)]
        xi = s[:, None] + np.arange(self.T)
        yi = s[:, None] + self.T + np.arange(self.tau)
        return Batch(
            x=self._normed[xi][..., None],
            y=np.ascontiguousarray(self._raw[yi].transpose(0, 2, 1)),
            tod=self._tod[xi],
            dow=self._dow[xi],
        )

    def all(self) -> Batch:
        return self.batch(np.arange(len(self)))

    def iter_batches(self, batch_size: int, order=None) -> Iterator[Batch]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i:i + batch_size])

    @property
    def samples(self) -> Iterator[tuple]:
        """(x [T,N,1], y [N,tau], tod [T], dow [T]) per window."""
        for i in range(len(self)):
            b = self.batch([i])
            yield b.x[0], b.y[0], b.tod[0], b.dow[0]


def window_counts(n_steps: int, T: int, tau: int) -> tuple[int, int, int]:
    """Train/val/test window counts for a 6:2:2 chronological split."""
    total = n_steps - T - tau + 1
    if total < 1:
        raise DataError(f"series of {n_steps} steps is shorter than one window ({T}+{tau})")
    n_train = (total * 6) // 10
    n_val = (total * 2) // 10
    return n_train, n_val, total - n_train - n_val


def split_and_window(ds: TrafficDataset, cfg) -> tuple[WindowedSplit, WindowedSplit, WindowedSplit, NormStats]:
    """Window the whole series, then split windows 6:2:2 in time order.

    Normalization statistics come from the series rows covered by training inputs.
    """
    T, tau = cfg.T, cfg.tau
    if np.isnan(ds.values).any():
        raise DataError("dataset contains NaN; call clean() first")
    n_train, n_val, n_test = window_counts(ds.n_steps, T, tau)
    if n_train > 0:
        rows = ds.values[: n_train + T - 1]
    else:
        logger.warning("no training windows; normalization uses every input row")
        rows = ds.values[: ds.n_steps - tau]
    std = float(rows.std())
    stats = NormStats(float(rows.mean()), std if std > 0 else 1.0)
    normed = stats.normalize(ds.values)
    tod, dow = ds.slot_indices()
    starts = np.arange(n_train + n_val + n_test)
    cuts = [0, n_train, n_train + n_val, len(starts)]
    splits = [WindowedSplit(ds.values, normed, tod, dow, starts[a:b], T, tau, role)
              for a, b, role in zip(cuts[:-1], cuts[1:], ("train", "val", "test"))]
    return splits[0], splits[1], splits[2], stats


def synth_generate(n_nodes: int, n_steps: int, seed: int, *, interval_minutes: int = 5,
                   noise: float = 1.0, weekly: float = 0.2,
                   start: datetime = datetime(2018, 1, 1), name: str = "synthetic") -> TrafficDataset:
    """Daily sinusoid per node with a weekly amplitude swing and coupled noise.

    ``noise`` scales both the node-coupled diffusion noise and the i.i.d. noise.
    With ``noise=0`` and ``weekly=0`` the series repeats every day exactly.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(150.0, 300.0, n_nodes)
    amp = rng.uniform(60.0, 120.0, n_nodes)
    phase = rng.uniform(0.0, 2 * np.pi, n_nodes)
    coupling = rng.uniform(0.0, 1.0, (n_nodes, n_nodes))
    coupling /= coupling.sum(axis=1, keepdims=True)
    shocks = rng.standard_normal((n_steps, n_nodes)) * 3.0
    iid = rng.standard_normal((n_steps, n_nodes)) * 2.0

    minutes = start.hour * 60 + start.minute + np.arange(n_steps) * interval_minutes
    day = 2 * np.pi * (minutes % 1440) / 1440.0
    week_pos = ((start.weekday() * 1440 + minutes) % 10080) / 10080.0
    swing = 1.0 + weekly * np.cos(2 * np.pi * week_pos)
    values = base + swing[:, None] * amp * np.sin(day[:, None] + phase)

    if noise:
        z = np.zeros(n_nodes)
        diffusion = np.empty((n_steps, n_nodes))
        for t in range(n_steps):
            z = 0.8 * (coupling @ z) + shocks[t]
            diffusion[t] = z
        values = values + noise * (diffusion + iid)
    return TrafficDataset(values, interval_minutes, start, name)


def persistence_forecast(split: WindowedSplit) -> tuple[np.ndarray, np.ndarray]:
    """Last observed value repeated over the horizon; returns (prediction, truth), both [B,N,tau]."""
    b = split.all()
    s = split.starts
    last = split._raw[s + split.T - 1]  # [B, N]
    pred = np.repeat(last[:, :, None], split.tau, axis=2)
    return pred, b.y


def mean_absolute_deviation(values: np.ndarray) -> float:
    return float(np.mean(np.abs(values - values.mean())))
