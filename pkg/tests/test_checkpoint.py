import numpy as np
import pytest

from pmrf.checkpoint import CheckpointError, checkpoint_digest, load_checkpoint, save_checkpoint
from pmrf.nets import UNetConfig, init_params

CFG = UNetConfig(base_width=8, depth=1, blocks_per_level=1, time_embed_dim=16)


def test_round_trip_is_bit_exact(tmp_path):
    params = init_params(CFG, seed=7)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, params, train_config={"lr0": 5e-4}, epoch=17)
    loaded, meta = load_checkpoint(path)
    assert loaded.names() == params.names()
    for name, t in params.items():
        assert loaded[name].data.tobytes() == t.data.tobytes()
    assert meta["epoch"] == 17
    assert meta["arch_id"] == CFG.arch_id
    assert loaded.config == CFG


def test_save_load_save_is_byte_identical(tmp_path):
    params = init_params(CFG, seed=3)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, params, train_config={"x": 1}, epoch=2)
    loaded, _ = load_checkpoint(p1)
    save_checkpoint(p2, loaded, train_config={"x": 1}, epoch=2)
    assert p1.read_bytes() == p2.read_bytes()
    assert checkpoint_digest(p1) == checkpoint_digest(p2)


def test_expected_architecture_mismatch(tmp_path):
    params = init_params(CFG, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, params)
    other = UNetConfig(base_width=16, depth=1, blocks_per_level=1)
    with pytest.raises(CheckpointError, match="incompatible"):
        load_checkpoint(path, expect_arch=other.arch_id)


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPTxxxxxxxxxxxx")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_truncated_payload(tmp_path):
    params = init_params(CFG, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, params)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="unexpected end of payload"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path):
    params = init_params(CFG, seed=0)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, params)
    blob = bytearray(path.read_bytes())
    blob[8] = 99  # version field follows the 8-byte magic
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)
