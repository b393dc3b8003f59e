import struct

import numpy as np
import pytest

from vitnorm.checkpoint import MAGIC, CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from vitnorm.model import init_params

from conftest import MICRO


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_round_trip_is_bit_exact(tmp_path, dtype):
    cfg = MICRO.replace(stem_norm="dpn", block_extra="subln")
    params = init_params(cfg, seed=3, dtype=dtype)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, params, {"name": "x", "step": 7})
    cfg2, params2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"name": "x", "step": 7}
    assert list(params2) == list(params)
    for k in params:
        assert params2[k].dtype == params[k].dtype
        assert params2[k].data.tobytes() == params[k].data.tobytes()
        assert params2[k].requires_grad
    assert dumps(cfg2, params2, meta) == path.read_bytes()


def test_bytes_are_deterministic():
    a = dumps(MICRO, init_params(MICRO, seed=1), {"k": 1})
    b = dumps(MICRO, init_params(MICRO, seed=1), {"k": 1})
    assert a == b
    assert a[:8] == MAGIC
    version, hlen = struct.unpack("<II", a[8:16])
    assert version == 1 and a[16 + hlen - 1 : 16 + hlen] == b"}"


def test_corrupt_inputs():
    raw = dumps(MICRO, init_params(MICRO), None)
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        loads(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="truncated"):
        loads(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        loads(raw[:20])


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "sub" / "m.ckpt"
    save_checkpoint(path, MICRO, init_params(MICRO))
    save_checkpoint(path, MICRO, init_params(MICRO, seed=2))
    assert [p.name for p in path.parent.iterdir()] == ["m.ckpt"]
