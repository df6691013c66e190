"""Full-volume inference: explicit Euler transport of the learned field over
Hann-blended overlapping tiles.

Per-tile noise comes from a counter-style generator keyed on (seed, origin),
so results do not depend on tile processing order; a shared-noise mode slices
one volume-shaped field instead so overlapping tiles agree on their
perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from pmrf import autodiff as ad
from pmrf.autodiff import Tensor
from pmrf.data import Volume
from pmrf.nets import ModelParams, flow_field_forward, posterior_mean_forward

MODES = ("pm", "pmrf", "rf")


class InferError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 100
    sigma_s: float = 0.1
    seed: int = 0
    shared_noise: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise InferError("steps (K) must be >= 1")
        if self.sigma_s < 0:
            raise InferError("sigma_s must be >= 0")


@dataclass
class TilerConfig:
    patch_side: int = 64
    overlap: int = 32

    def __post_init__(self):
        if not 0 <= self.overlap < self.patch_side:
            raise InferError(
                f"overlap must satisfy 0 <= overlap < patch_side, got overlap={self.overlap}, patch_side={self.patch_side}"
            )


def euler_integrate(z0: np.ndarray, field, K: int) -> np.ndarray:
    """z_{k+1} = z_k + (1/K) field(z_k, k/K); returns z_K."""
    if K < 1:
        raise InferError("K must be >= 1")
    z = np.array(z0, dtype=np.float32, copy=True)
    dt = np.float32(1.0 / K)
    for k in range(K):
        v = np.asarray(field(z, k / K))
        if not np.all(np.isfinite(v)):
            raise InferError(f"non-finite field output at Euler step {k}/{K}")
        z += dt * v
    return z


def hann_window3d(side: int, floor: float = 1e-3) -> np.ndarray:
    """Separable raised-cosine weights, floored so boundary voxels keep a
    representable weight."""
    if side < 2:
        raise InferError("window side must be >= 2")
    n = np.arange(side)
    w1 = 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (side - 1)))
    w = w1[:, None, None] * w1[None, :, None] * w1[None, None, :]
    return np.maximum(w, floor)


def _axis_origins(length: int, side: int, stride: int):
    origins = list(range(0, length - side + 1, stride))
    last = length - side
    if origins[-1] != last:
        origins.append(last)
    return origins


def tile_volume(shape, tiler: TilerConfig):
    """Grid of patch origins with stride patch_side - overlap; the final
    origin per axis is clamped so the last patch ends at the boundary."""
    side = tiler.patch_side
    if any(s < side for s in shape):
        raise InferError(f"volume shape {shape} smaller than patch side {side}; pad first")
    stride = side - tiler.overlap
    axes = [_axis_origins(s, side, stride) for s in shape]
    return list(product(*axes))


class FusionAccumulator:
    """Weighted-sum / weight-sum pair; finalize() divides and checks coverage."""

    def __init__(self, shape):
        self.value_sum = np.zeros(shape, dtype=np.float64)
        self.weight_sum = np.zeros(shape, dtype=np.float64)

    def add(self, patch, origin, window):
        sl = tuple(slice(o, o + s) for o, s in zip(origin, window.shape))
        self.value_sum[sl] += patch * window
        self.weight_sum[sl] += window

    def finalize(self) -> np.ndarray:
        if np.any(self.weight_sum == 0):
            n = int(np.sum(self.weight_sum == 0))
            raise InferError(f"fusion left {n} voxels uncovered (tiling bug)")
        return (self.value_sum / self.weight_sum).astype(np.float32)


def fuse(patches, origins, window, out_shape) -> np.ndarray:
    acc = FusionAccumulator(out_shape)
    for patch, origin in zip(patches, origins):
        acc.add(patch, origin, window)
    return acc.finalize()


# -- tile-level model application ------------------------------------------------


def _patch_noise(seed: int, origin, shape) -> np.ndarray:
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFF, *[int(o) for o in origin]])
    return np.random.default_rng(ss).standard_normal(shape).astype(np.float32)


def _shared_noise_field(seed: int, shape) -> np.ndarray:
    ss = np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 0x5EED])
    return np.random.default_rng(ss).standard_normal(shape).astype(np.float32)


def _batched(items, size):
    for lo in range(0, len(items), size):
        yield lo, items[lo : lo + size]


def pm_tile_predictions(voxels, stage1: ModelParams, origins, side, batch_tiles=4):
    """Stage-1 forward over all tiles; returns float32 patches."""
    out = [None] * len(origins)
    with ad.no_grad():
        for lo, chunk in _batched(origins, batch_tiles):
            xb = np.stack(
                [voxels[o[0] : o[0] + side, o[1] : o[1] + side, o[2] : o[2] + side] for o in chunk]
            )[:, None]
            pred = posterior_mean_forward(Tensor(xb), stage1).data
            for i in range(len(chunk)):
                out[lo + i] = pred[i, 0]
    return out


def refine_tiles(anchors, origins, flow: ModelParams, sampler: SamplerConfig, volume_shape=None, batch_tiles=4):
    """Perturb each anchor tile and transport it with K Euler steps of the
    learned field."""
    side = anchors[0].shape[0]
    if sampler.shared_noise:
        if volume_shape is None:
            raise InferError("shared noise requires the volume shape")
        field_noise = _shared_noise_field(sampler.seed, volume_shape)

    def flow_field(z, t):
        with ad.no_grad():
            return flow_field_forward(Tensor(z), t, flow).data

    out = [None] * len(origins)
    for lo, chunk in _batched(origins, batch_tiles):
        z0 = np.stack(anchors[lo : lo + len(chunk)])[:, None].astype(np.float32)
        for i, o in enumerate(chunk):
            if sampler.shared_noise:
                eps = field_noise[o[0] : o[0] + side, o[1] : o[1] + side, o[2] : o[2] + side]
            else:
                eps = _patch_noise(sampler.seed, o, (side, side, side))
            z0[i, 0] += np.float32(sampler.sigma_s) * eps
        zk = euler_integrate(z0, flow_field, sampler.steps)
        for i in range(len(chunk)):
            out[lo + i] = zk[i, 0]
    return out


def _check_params(mode, stage1, flow):
    if mode not in MODES:
        raise InferError(f"unknown mode '{mode}', expected one of {MODES}")
    if mode in ("pm", "pmrf"):
        if stage1 is None:
            raise InferError(f"mode '{mode}' requires the stage-1 checkpoint")
        if stage1.config.time_conditioned:
            raise InferError("stage-1 checkpoint is time-conditioned; architecture mismatch")
    if mode in ("pmrf", "rf"):
        if flow is None:
            raise InferError(f"mode '{mode}' requires the flow checkpoint")
        if not flow.config.time_conditioned:
            raise InferError("flow checkpoint is not time-conditioned; architecture mismatch")


def infer_volume(
    x: Volume,
    stage1: ModelParams | None,
    flow: ModelParams | None,
    sampler: SamplerConfig,
    tiler: TilerConfig,
    mode: str,
    denorm_stats=None,
    batch_tiles=4,
) -> Volume:
    """Tiled end-to-end inference.

    pm:   tile -> stage1 -> fuse
    pmrf: tile -> stage1 -> + sigma_s noise -> Euler transport -> fuse
    rf:   tile -> input + sigma_s noise -> Euler transport -> fuse

    Output stays in normalized space unless ``denorm_stats=(mean, std)`` is
    given. Volumes smaller than the patch side are zero-padded and cropped
    back after fusion.
    """
    _check_params(mode, stage1, flow)
    from pmrf.data import crop_back, pad_to_min

    padded = pad_to_min(x, tiler.patch_side)
    vox = padded.voxels
    origins = tile_volume(vox.shape, tiler)
    side = tiler.patch_side

    if mode in ("pm", "pmrf"):
        anchors = pm_tile_predictions(vox, stage1, origins, side, batch_tiles)
    else:
        anchors = [
            vox[o[0] : o[0] + side, o[1] : o[1] + side, o[2] : o[2] + side].astype(np.float32) for o in origins
        ]
    if mode in ("pmrf", "rf"):
        anchors = refine_tiles(anchors, origins, flow, sampler, vox.shape, batch_tiles)

    window = hann_window3d(side)
    fused = fuse(anchors, origins, window, vox.shape)
    out = Volume(fused, modality="ce", mean=x.mean, std=x.std, meta=dict(padded.meta))
    out = crop_back(out)
    if denorm_stats is not None:
        mean, std = denorm_stats
        out = Volume(
            (out.voxels.astype(np.float64) * std + mean).astype(np.float32), "ce", None, None, out.meta
        )
    return out
