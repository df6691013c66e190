"""Binary parameter checkpoints.

Layout: 8-byte magic, u32 format version, u32 entry count, then per entry
(u16 name length, name, u8 ndim, u32 dims, u64 payload bytes, little-endian
float32 payload), and finally a u64-length-prefixed JSON metadata footer
carrying the architecture id, the network config, a training-config hash and
the epoch. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict

import numpy as np

from pmrf.autodiff import Tensor
from pmrf.nets import ModelParams, UNetConfig

MAGIC = b"PMRFCKP1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"unexpected end of payload while reading {what}")
    return buf


def save_checkpoint(path, params: ModelParams, train_config: dict | None = None, epoch: int | None = None):
    meta = {
        "arch_id": params.arch_id,
        "config": params.config.__dict__,
        "train_config_hash": config_hash(train_config or {}),
        "epoch": epoch,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, t in params.items():
            raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
        blob = json.dumps(meta, sort_keys=True).encode()
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
    return path


def load_checkpoint(path, expect_arch: str | None = None):
    """Read a checkpoint -> (ModelParams, meta). Verifies magic, version and,
    when ``expect_arch`` is given, architecture-id compatibility."""
    tensors = OrderedDict()
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        version, n_entries = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "entry name length"))
            name = _read_exact(fh, name_len, "entry name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "entry rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "entry shape"))
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, "entry size"))
            if nbytes != 4 * int(np.prod(shape)):
                raise CheckpointError(f"{path}: entry '{name}' payload size mismatch")
            raw = _read_exact(fh, nbytes, f"payload of '{name}'")
            data = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            tensors[name] = Tensor(data, requires_grad=True)
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata"))
    cfg_dict = dict(meta["config"])
    cfg = UNetConfig(**cfg_dict)
    if cfg.arch_id != meta["arch_id"]:
        raise CheckpointError(f"{path}: architecture id mismatch inside checkpoint")
    if expect_arch is not None and expect_arch != cfg.arch_id:
        raise CheckpointError(
            f"{path}: checkpoint architecture '{cfg.arch_id}' incompatible with expected '{expect_arch}'"
        )
    return ModelParams(cfg, tensors), meta


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]
