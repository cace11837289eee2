"""Binary checkpoint container.

Layout, little-endian throughout::

    b"FSTS"  u32 version
    u32 header_len  header_len bytes of UTF-8 JSON {"config": ..., "norm": {"mean", "std"} | null}
    u32 n_params
    n_params x ( u32 name_len, name bytes, u32 rank, u32 dims[rank], f64 data[prod(dims)] )
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO, Optional

import numpy as np

from .config import ModelConfig
from .model import FasterSTS
from .tensor import DimensionError

MAGIC = b"FSTS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _u32(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<I", v))


def _read(fh: BinaryIO, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _r32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read(fh, 4))[0]


def write_checkpoint(fh: BinaryIO, cfg: ModelConfig, params: dict[str, np.ndarray],
                     norm: Optional[dict] = None) -> None:
    fh.write(MAGIC)
    _u32(fh, VERSION)
    header = json.dumps({"config": cfg.to_dict(), "norm": norm}, sort_keys=True).encode("utf-8")
    _u32(fh, len(header))
    fh.write(header)
    _u32(fh, len(params))
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        _u32(fh, len(raw))
        fh.write(raw)
        _u32(fh, arr.ndim)
        for dim in arr.shape:
            _u32(fh, dim)
        fh.write(arr.tobytes())


def read_checkpoint(fh: BinaryIO) -> tuple[ModelConfig, dict[str, np.ndarray], Optional[dict]]:
    if _read(fh, 4) != MAGIC:
        raise CheckpointError("not a FSTS checkpoint (bad magic)")
    version = _r32(fh)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(_read(fh, _r32(fh)).decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for _ in range(_r32(fh)):
        name = _read(fh, _r32(fh)).decode("utf-8")
        shape = tuple(_r32(fh) for _ in range(_r32(fh)))
        count = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(_read(fh, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return cfg, params, header.get("norm")


def save(path, model: FasterSTS, norm: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, model.cfg, model.state_dict(), norm)


def load(path) -> tuple[FasterSTS, Optional[dict]]:
    with open(path, "rb") as fh:
        cfg, params, norm = read_checkpoint(fh)
    model = FasterSTS(cfg)
    try:
        model.load_state_dict(params)
    except (KeyError, DimensionError) as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config: {exc}") from None
    return model, norm
