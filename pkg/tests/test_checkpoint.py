import io
import json
import struct

import numpy as np
import pytest

from fastersts import FasterSTS, checkpoint
from fastersts.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from fastersts.gradcheck import _randomize, tiny_config


def trained_like(seed=0):
    model = FasterSTS(tiny_config(seed=seed))
    _randomize(model.parameters(), np.random.default_rng(seed))
    return model


def test_round_trip(tmp_path):
    model = trained_like()
    norm = {"mean": 211.5, "std": 48.25}
    checkpoint.save(tmp_path / "m.fsts", model, norm)
    back, back_norm = checkpoint.load(tmp_path / "m.fsts")
    assert back.cfg == model.cfg
    assert back_norm == norm
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2
        assert p1.data.tobytes() == p2.data.tobytes()


def test_layout():
    model = trained_like()
    buf = io.BytesIO()
    write_checkpoint(buf, model.cfg, model.state_dict(), None)
    raw = buf.getvalue()
    assert raw[:4] == b"FSTS"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    hlen = struct.unpack("<I", raw[8:12])[0]
    header = json.loads(raw[12:12 + hlen])
    assert header["config"]["N"] == model.cfg.N and header["norm"] is None
    pos = 12 + hlen
    n_params = struct.unpack("<I", raw[pos:pos + 4])[0]
    assert n_params == len(model.state_dict())
    pos += 4
    name_len = struct.unpack("<I", raw[pos:pos + 4])[0]
    name = raw[pos + 4:pos + 4 + name_len].decode()
    pos += 4 + name_len
    rank = struct.unpack("<I", raw[pos:pos + 4])[0]
    dims = struct.unpack(f"<{rank}I", raw[pos + 4:pos + 4 + 4 * rank])
    pos += 4 + 4 * rank
    first = np.frombuffer(raw[pos:pos + 8 * int(np.prod(dims))], dtype="<f8").reshape(dims)
    np.testing.assert_array_equal(first, model.state_dict()[name])


def test_same_model_same_bytes():
    a, b = io.BytesIO(), io.BytesIO()
    write_checkpoint(a, trained_like(3).cfg, trained_like(3).state_dict())
    write_checkpoint(b, trained_like(3).cfg, trained_like(3).state_dict())
    assert a.getvalue() == b.getvalue()


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(io.BytesIO(b"NOPE" + bytes(20)))


def test_bad_version():
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(io.BytesIO(b"FSTS" + struct.pack("<I", 9)))


def test_truncated():
    buf = io.BytesIO()
    model = trained_like()
    write_checkpoint(buf, model.cfg, model.state_dict())
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(io.BytesIO(buf.getvalue()[:-5]))


def test_parameter_mismatch(tmp_path):
    model = trained_like()
    state = model.state_dict()
    state.pop("head.head_b8")
    with open(tmp_path / "bad.fsts", "wb") as fh:
        write_checkpoint(fh, model.cfg, state)
    with pytest.raises(CheckpointError, match="do not match"):
        checkpoint.load(tmp_path / "bad.fsts")
