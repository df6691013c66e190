"""Residual 3D U-Nets: the posterior-mean predictor and the time-conditioned
velocity-field network. Both share one parameter container and one forward
walk; time conditioning adds a sinusoidal embedding injected into each
residual block as a learned per-channel shift.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from pmrf import autodiff as ad
from pmrf.autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_width: int = 16
    depth: int = 3
    blocks_per_level: int = 2
    time_conditioned: bool = False
    time_embed_dim: int = 64
    norm_groups: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_width < 4:
            raise ConfigError("base_width must be >= 4")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError("time_embed_dim must be even")

    @property
    def arch_id(self) -> str:
        return (
            f"resunet3d-v1/in{self.in_channels}out{self.out_channels}"
            f"w{self.base_width}d{self.depth}b{self.blocks_per_level}"
            f"t{int(self.time_conditioned)}e{self.time_embed_dim}g{self.norm_groups}"
        )

    def width(self, level: int) -> int:
        return self.base_width * (2**level)

    def groups_for(self, channels: int) -> int:
        g = min(self.norm_groups, channels)
        while channels % g:
            g -= 1
        return g


class ModelParams:
    """Ordered name -> Tensor map for one network, tied to its UNetConfig."""

    def __init__(self, config: UNetConfig, tensors: OrderedDict):
        self.config = config
        self._tensors = tensors

    @property
    def arch_id(self) -> str:
        return self.config.arch_id

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors.keys())

    def tensors(self):
        return list(self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        dup = OrderedDict()
        for k, t in self._tensors.items():
            dup[k] = Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return ModelParams(self.config, dup)

    def load_values(self, other: "ModelParams"):
        for k, t in self._tensors.items():
            np.copyto(t.data, other[k].data)

    @property
    def n_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features [sin(w_i t), cos(w_i t)] with geometric w_i in [1, 50].

    ``t`` may be a scalar (returns shape [dim]) or a vector (returns [N, dim]).
    """
    if dim % 2 != 0:
        raise ConfigError(f"time embedding dim must be even, got {dim}")
    omega = np.geomspace(1.0, 50.0, dim // 2)
    tv = np.asarray(t, dtype=np.float64)
    phase = tv[..., None] * omega
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1).astype(np.float32)


# -- parameter construction ---------------------------------------------------


def _conv_init(rng, f, c, k, scale=1.0, dtype=np.float32):
    std = scale * np.sqrt(2.0 / (c * k * k * k))
    return (rng.standard_normal((f, c, k, k, k)) * std).astype(dtype)


def _block_param_specs(prefix, channels, cfg):
    specs = [
        (f"{prefix}.gn1.g", "ones", (channels,)),
        (f"{prefix}.gn1.b", "zeros", (channels,)),
        (f"{prefix}.conv1.w", "he", (channels, channels, 3)),
        (f"{prefix}.conv1.b", "zeros", (channels,)),
    ]
    if cfg.time_conditioned:
        specs += [
            (f"{prefix}.shift.w", "small", (cfg.time_embed_dim, channels)),
            (f"{prefix}.shift.b", "zeros", (channels,)),
        ]
    specs += [
        (f"{prefix}.gn2.g", "ones", (channels,)),
        (f"{prefix}.gn2.b", "zeros", (channels,)),
        (f"{prefix}.conv2.w", "he", (channels, channels, 3)),
        (f"{prefix}.conv2.b", "zeros", (channels,)),
    ]
    return specs


def _param_specs(cfg: UNetConfig):
    specs = [("stem.w", "he", (cfg.width(0), cfg.in_channels, 3)), ("stem.b", "zeros", (cfg.width(0),))]
    if cfg.time_conditioned:
        e = cfg.time_embed_dim
        specs += [
            ("tmlp1.w", "he2d", (e, e)),
            ("tmlp1.b", "zeros", (e,)),
            ("tmlp2.w", "he2d", (e, e)),
            ("tmlp2.b", "zeros", (e,)),
        ]
    for lv in range(cfg.depth):
        w = cfg.width(lv)
        for i in range(cfg.blocks_per_level):
            specs += _block_param_specs(f"enc{lv}.block{i}", w, cfg)
        specs += [
            (f"enc{lv}.down.w", "he", (cfg.width(lv + 1), w, 3)),
            (f"enc{lv}.down.b", "zeros", (cfg.width(lv + 1),)),
        ]
    for i in range(cfg.blocks_per_level):
        specs += _block_param_specs(f"mid.block{i}", cfg.width(cfg.depth), cfg)
    for lv in reversed(range(cfg.depth)):
        w = cfg.width(lv)
        specs += [
            (f"dec{lv}.up.w", "he", (w, cfg.width(lv + 1), 3)),
            (f"dec{lv}.up.b", "zeros", (w,)),
            (f"dec{lv}.fuse.w", "he", (w, 2 * w, 3)),
            (f"dec{lv}.fuse.b", "zeros", (w,)),
        ]
        for i in range(cfg.blocks_per_level):
            specs += _block_param_specs(f"dec{lv}.block{i}", w, cfg)
    specs += [("head.w", "head", (cfg.out_channels, cfg.width(0), 3)), ("head.b", "zeros", (cfg.out_channels,))]
    return specs


def parameter_count(cfg: UNetConfig) -> int:
    n = 0
    for _, kind, shape in _param_specs(cfg):
        if kind in ("he", "head"):
            f, c, k = shape
            n += f * c * k * k * k
        else:
            n += int(np.prod(shape))
    return n


def init_params(cfg: UNetConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """He-initialized parameters; the output head starts near zero so both
    networks begin as a small perturbation of their skip/zero baseline."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, kind, shape in _param_specs(cfg):
        if kind == "he":
            data = _conv_init(rng, shape[0], shape[1], shape[2], dtype=dtype)
        elif kind == "head":
            data = _conv_init(rng, shape[0], shape[1], shape[2], scale=0.05, dtype=dtype)
        elif kind == "he2d":
            std = np.sqrt(2.0 / shape[0])
            data = (rng.standard_normal(shape) * std).astype(dtype)
        elif kind == "small":
            data = (rng.standard_normal(shape) * 0.1).astype(dtype)
        elif kind == "ones":
            data = np.ones(shape, dtype=dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(cfg, tensors)


# -- forward -------------------------------------------------------------------


def _resblock(params, prefix, h, emb, cfg, channels):
    p = params
    g = cfg.groups_for(channels)
    r = ad.group_norm(h, p[f"{prefix}.gn1.g"], p[f"{prefix}.gn1.b"], g)
    r = ad.silu(r)
    r = ad.conv3d(r, p[f"{prefix}.conv1.w"], bias=p[f"{prefix}.conv1.b"], stride=1, padding=1)
    if emb is not None:
        shift = ad.add(ad.matmul(emb, p[f"{prefix}.shift.w"]), p[f"{prefix}.shift.b"])
        r = ad.add(r, ad.reshape(shift, (shift.shape[0], channels, 1, 1, 1)))
    r = ad.group_norm(r, p[f"{prefix}.gn2.g"], p[f"{prefix}.gn2.b"], g)
    r = ad.silu(r)
    r = ad.conv3d(r, p[f"{prefix}.conv2.w"], bias=p[f"{prefix}.conv2.b"], stride=1, padding=1)
    return ad.add(h, r)


def unet_forward(x: Tensor, params: ModelParams, t=None) -> Tensor:
    """Shared U-Net walk. ``t`` (scalar or per-sample vector) is required iff
    the config is time-conditioned."""
    cfg = params.config
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ConfigError(f"expected input [N,{cfg.in_channels},D,H,W], got {x.shape}")
    side = x.shape[2:]
    if any(s % (2**cfg.depth) for s in side):
        raise ConfigError(f"spatial dims {side} must be divisible by {2 ** cfg.depth}")
    if cfg.time_conditioned:
        if t is None:
            raise ConfigError("time-conditioned network requires t")
        tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(tv < 0.0) or np.any(tv > 1.0):
            raise ConfigError(f"t must lie in [0, 1], got {tv}")
        if tv.size == 1:
            tv = np.full(x.shape[0], tv[0])
        emb = Tensor(time_embedding(tv, cfg.time_embed_dim))
        emb = ad.silu(ad.add(ad.matmul(emb, params["tmlp1.w"]), params["tmlp1.b"]))
        emb = ad.add(ad.matmul(emb, params["tmlp2.w"]), params["tmlp2.b"])
    elif t is not None:
        raise ConfigError("network is not time-conditioned but t was given")
    else:
        emb = None

    h = ad.conv3d(x, params["stem.w"], bias=params["stem.b"], stride=1, padding=1)
    skips = []
    for lv in range(cfg.depth):
        for i in range(cfg.blocks_per_level):
            h = _resblock(params, f"enc{lv}.block{i}", h, emb, cfg, cfg.width(lv))
        skips.append(h)
        h = ad.silu(ad.conv3d(h, params[f"enc{lv}.down.w"], bias=params[f"enc{lv}.down.b"], stride=2, padding=1))
    for i in range(cfg.blocks_per_level):
        h = _resblock(params, f"mid.block{i}", h, emb, cfg, cfg.width(cfg.depth))
    for lv in reversed(range(cfg.depth)):
        h = ad.upsample_nearest(h, 2)
        h = ad.conv3d(h, params[f"dec{lv}.up.w"], bias=params[f"dec{lv}.up.b"], stride=1, padding=1)
        h = ad.concat([skips[lv], h], axis=1)
        h = ad.silu(ad.conv3d(h, params[f"dec{lv}.fuse.w"], bias=params[f"dec{lv}.fuse.b"], stride=1, padding=1))
        for i in range(cfg.blocks_per_level):
            h = _resblock(params, f"dec{lv}.block{i}", h, emb, cfg, cfg.width(lv))
    return ad.conv3d(h, params["head.w"], bias=params["head.b"], stride=1, padding=1)


def posterior_mean_forward(x_patch, params: ModelParams) -> Tensor:
    """Stage-1 prediction: the network output is a correction added to the
    input (global residual skip)."""
    if params.config.time_conditioned:
        raise ConfigError("posterior-mean network must not be time-conditioned")
    if params.config.in_channels != params.config.out_channels:
        raise ConfigError("residual skip requires in_channels == out_channels")
    if not isinstance(x_patch, Tensor):
        x_patch = Tensor(x_patch)
    return ad.add(x_patch, unet_forward(x_patch, params))


def flow_field_forward(z_patch, t, params: ModelParams) -> Tensor:
    """Velocity-field prediction of the time-conditioned network."""
    if not params.config.time_conditioned:
        raise ConfigError("flow-field network must be time-conditioned")
    return unet_forward(z_patch, params, t=t)
